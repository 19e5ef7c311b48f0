//! Binary checkpoints.
//!
//! Layout: magic `SNRF`, `u32` format version, `u32` byte length of a JSON
//! header, the header, then the flat parameter array, the Adam first
//! moments and the Adam second moments, all little-endian in the header's
//! `dtype`. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use snerf_core::adam::Adam;
use snerf_core::field::{FieldConfig, FieldParams};
use snerf_core::loss::TrainConfig;
use snerf_core::trainer::{RngState, Trainer};

pub const MAGIC: &[u8; 4] = b"SNRF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Exact; reloads reproduce outputs bit for bit.
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    field: FieldConfig,
    train: TrainConfig,
    iteration: u64,
    param_count: usize,
    dtype: Dtype,
    rng_seed: String,
    rng_word_pos: String,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub train: TrainConfig,
    pub adam: Adam,
    pub iteration: u64,
    pub rng: RngState,
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).context("rng seed must be 64 hex digits")?;
    Ok(out)
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            params: t.params.clone(),
            train: t.cfg,
            adam: t.adam.clone(),
            iteration: t.iter,
            rng: t.rng_state(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Ok(Trainer::restore(self.params, self.train, self.adam, self.iteration, self.rng)?)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let header = Header {
            field: self.params.config,
            train: self.train,
            iteration: self.iteration,
            param_count: self.params.config.param_count(),
            dtype,
            rng_seed: hex::encode(self.rng.seed),
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_lr: self.adam.lr,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            adam_t: self.adam.t,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // Write to a sibling and rename so a crash never leaves a torn file.
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(&json)?;
            for block in [&self.params.flatten(), &self.adam.m, &self.adam.v] {
                for v in block.iter() {
                    match dtype {
                        Dtype::F64 => w.write_all(&v.to_le_bytes())?,
                        Dtype::F32 => w.write_all(&(*v as f32).to_le_bytes())?,
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if &word != MAGIC {
            bail!("{}: not a checkpoint", path.display());
        }
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        ensure!(version == VERSION, "{}: unsupported checkpoint version {version}", path.display());
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json).with_context(|| format!("{}: bad header", path.display()))?;
        let n = h.field.param_count();
        ensure!(n == h.param_count, "{}: parameter count does not match the field config", path.display());
        let mut read_block = || -> Result<Vec<f64>> {
            let width = match h.dtype {
                Dtype::F64 => 8,
                Dtype::F32 => 4,
            };
            let mut buf = vec![0u8; n * width];
            r.read_exact(&mut buf).with_context(|| format!("{}: truncated", path.display()))?;
            Ok(buf
                .chunks_exact(width)
                .map(|c| match h.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect())
        };
        let flat = read_block()?;
        let m = read_block()?;
        let v = read_block()?;
        let params = FieldParams::unflatten(&h.field, &flat)?;
        let adam = Adam {
            lr: h.adam_lr,
            beta1: h.adam_beta1,
            beta2: h.adam_beta2,
            eps: h.adam_eps,
            t: h.adam_t,
            m,
            v,
        };
        Ok(Checkpoint {
            params,
            train: h.train,
            adam,
            iteration: h.iteration,
            rng: RngState {
                seed: unhex(&h.rng_seed)?,
                word_pos: h.rng_word_pos.parse()?,
            },
        })
    }
}
