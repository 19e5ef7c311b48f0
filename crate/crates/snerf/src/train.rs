//! The training loop: batches, optional worker partitions, logging and
//! checkpoints.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snerf_core::field::{init_params, FieldConfig, FieldParams};
use snerf_core::loss::TrainConfig;
use snerf_core::metrics::depth_error_map;
use snerf_core::render::{DepthMode, Ray};
use snerf_core::trainer::{partition_grad, PartitionGrad, RaySet, StepStats, Trainer};

use crate::checkpoint::{Checkpoint, Dtype};
use crate::dataset::Dataset;
use crate::io::{csv_writer, opt};
use crate::pool;
use crate::render::{render_rays, RenderSettings};

/// Which rays the log's depth-error and bound columns are measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Dataset views to monitor.
    pub views: Vec<usize>,
    /// Every `pixel_stride`-th pixel of those views.
    pub pixel_stride: usize,
    pub depth_mode: DepthMode,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            views: vec![0],
            pixel_stride: 4,
            depth_mode: DepthMode::FirstNonZero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub monitor: MonitorConfig,
    pub checkpoint_dtype: Dtype,
}

/// Monitor rays with their ground-truth depths.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    pub rays: Vec<Ray>,
    pub gt: Vec<Option<f64>>,
    pub depth_mode: DepthMode,
}

impl Monitor {
    pub fn from_dataset(ds: &Dataset, cfg: &MonitorConfig) -> Result<Self> {
        let stride = cfg.pixel_stride.max(1);
        let mut rays = Vec::new();
        let mut gt = Vec::new();
        for &v in &cfg.views {
            let cam = ds.manifest.cameras.get(v).with_context(|| format!("monitor view {v} not in dataset"))?;
            for (i, ray) in cam.rays().into_iter().enumerate().step_by(stride) {
                rays.push(ray);
                gt.push(ds.depths[v][i]);
            }
        }
        Ok(Monitor {
            rays,
            gt,
            depth_mode: cfg.depth_mode,
        })
    }

    /// Mean mutually-foreground depth error and mean `abs_bound` over rays
    /// with a surface.
    pub fn measure(&self, params: &FieldParams, samples: usize, background: snerf_core::Vec3, workers: usize) -> Result<(Option<f64>, Option<f64>)> {
        if self.rays.is_empty() {
            return Ok((None, None));
        }
        let s = RenderSettings {
            samples,
            depth_mode: self.depth_mode,
            background,
        };
        let res = render_rays(params, &self.rays, &s, workers)?;
        let pred: Vec<Option<f64>> = res.iter().map(|r| r.depth_extracted).collect();
        let err = depth_error_map(&pred, &self.gt)?.mean;
        let bound = crate::render::mean(res.iter().filter_map(|r| r.bound.map(|b| b.abs_bound)));
        Ok((err, bound))
    }
}

pub const METRICS_HEADER: [&str; 9] = ["iter", "l_rgb", "l_v", "l_g", "v_th", "k", "r", "depth_err", "abs_bound"];

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Completed steps.
    pub iter: u64,
    pub stats: StepStats,
    pub depth_err: Option<f64>,
    pub abs_bound: Option<f64>,
}

impl LogRow {
    fn record(&self) -> Vec<String> {
        let s = &self.stats;
        vec![
            self.iter.to_string(),
            s.l_rgb.to_string(),
            s.l_v.to_string(),
            s.l_g.to_string(),
            s.v_th.to_string(),
            s.k.to_string(),
            s.r.to_string(),
            opt(self.depth_err),
            opt(self.abs_bound),
        ]
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    /// Checkpoints written, in iteration order.
    pub checkpoints: Vec<(u64, PathBuf)>,
}

pub fn checkpoint_name(iter: u64) -> String {
    format!("ckpt_{iter:07}.snrf")
}

/// One optimization step with the batch split over `workers` partitions.
pub fn parallel_step(tr: &mut Trainer, set: &RaySet, workers: usize) -> Result<StepStats> {
    let plan = tr.plan(set)?;
    let parts = plan.partitions(workers);
    let grads: Vec<PartitionGrad> = if parts.len() == 1 {
        vec![partition_grad(&tr.params, &tr.cfg, set, &plan, parts[0].clone())?]
    } else {
        let (params, cfg) = (&tr.params, &tr.cfg);
        pool(workers)?.install(|| {
            parts
                .par_iter()
                .map(|r| partition_grad(params, cfg, set, &plan, r.clone()))
                .collect::<snerf_core::Result<_>>()
        })?
    };
    Ok(tr.apply(&plan, &grads)?)
}

/// Trains from `trainer`'s current state until its configured iteration
/// count, writing `metrics.csv` and checkpoints into `out`.
///
/// A non-finite loss or gradient stops the run with an error; checkpoints
/// already written are left in place.
pub fn train_rays(
    mut trainer: Trainer,
    set: &RaySet,
    monitor: &Monitor,
    out: &Path,
    dtype: Dtype,
    workers: usize,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = csv_writer(&out.join("metrics.csv"), &METRICS_HEADER)?;
    let mut checkpoints = Vec::new();
    let save = |tr: &Trainer, checkpoints: &mut Vec<(u64, PathBuf)>| -> Result<()> {
        let p = out.join(checkpoint_name(tr.iter));
        Checkpoint::from_trainer(tr).save(&p, dtype)?;
        checkpoints.push((tr.iter, p));
        Ok(())
    };
    save(&trainer, &mut checkpoints)?;
    let cfg = trainer.cfg;
    let mut log = Vec::new();
    while !trainer.finished() {
        let stats = parallel_step(&mut trainer, set, workers)
            .with_context(|| format!("training halted at iteration {}", trainer.iter))?;
        let done = trainer.iter;
        if done % cfg.log_every.max(1) == 0 || trainer.finished() {
            let (depth_err, abs_bound) = monitor.measure(&trainer.params, cfg.samples_per_ray, set.background, workers)?;
            let row = LogRow {
                iter: done,
                stats,
                depth_err,
                abs_bound,
            };
            csv.write_record(row.record())?;
            csv.flush()?;
            log.push(row);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.finished() {
            save(&trainer, &mut checkpoints)?;
        }
    }
    if checkpoints.last().map(|c| c.0) != Some(trainer.iter) {
        save(&trainer, &mut checkpoints)?;
    }
    Checkpoint::from_trainer(&trainer).save(&out.join("final.snrf"), dtype)?;
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoints,
    })
}

/// Fresh training run on a dataset.
pub fn train_loop(ds: &Dataset, run: &RunConfig, out: &Path, workers: usize) -> Result<TrainOutcome> {
    let params = init_params(&run.field)?;
    let trainer = Trainer::new(params, run.train)?;
    let set = ds.ray_set()?;
    let monitor = Monitor::from_dataset(ds, &run.monitor)?;
    train_rays(trainer, &set, &monitor, out, run.checkpoint_dtype, workers)
}
