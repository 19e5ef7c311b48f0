//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use snerf_core::bound_check::random_trials;
use snerf_core::metrics::tau_grid;
use snerf_core::neuron::NeuronKind;
use snerf_core::render::DepthMode;
use snerf_core::scene::{CameraSpec, DEFAULT_SAMPLES};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_dataset, resolve_scene, seeded_cameras, Dataset, GenSettings};
use crate::eval::{bound_check_field, evaluate, export_points, threshold_sweep, write_sweep, write_threshold_free};
use crate::io::{csv_writer, read_json, write_json, write_ply};
use crate::render::{bound_row, render_view, RenderSettings, BOUND_HEADER};
use crate::train::{train_loop, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "snerf", version, about = "Spiking density fields: data, training, rendering, evaluation")]
pub struct Cli {
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from a builtin or JSON scene.
    GenScene(GenSceneArgs),
    /// Train a field on a dataset.
    Train(TrainArgs),
    /// Render a checkpoint from one camera or a list of cameras.
    Render(RenderArgs),
    /// Depth error, Chamfer distance and optional threshold sweep.
    Eval(EvalArgs),
    /// Check the depth envelope on random rays or on a trained field.
    BoundCheck(BoundCheckArgs),
    /// Back-projected surface points as ASCII PLY.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Builtin name (sphere, box, thin-sheet, semi-slab, slanted-slab) or a scene JSON path.
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "64x64")]
    pub res: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Quadrature samples per ray for the ground-truth colors.
    #[arg(long, default_value_t = 2048)]
    pub n_fine: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the iteration count (warmup becomes a tenth of it).
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Overrides both the initialization and the batch-sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A camera JSON object or an array of them.
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Extract depth at a density threshold instead of the first non-zero sample.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Relu,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Geometric threshold grid t0:t1:steps.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Evaluate as a thresholded baseline at its best global sweep threshold.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundCheckArgs {
    /// Number of random synthetic rays.
    #[arg(long, conflicts_with_all = ["ckpt", "data"])]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, requires = "data")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON array of cameras.
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub ply: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

/// Parses `argv` (program name first) and runs it. Returns the exit code:
/// 0 on success, 1 on a usage error, 2 on a runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Prints the resolved config and writes it next to the outputs.
fn echo<T: Serialize>(cfg: &T, sidecar: &Path) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    write_json(sidecar, cfg)
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sidecar_of(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    file.with_file_name(name)
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).with_context(|| format!("resolution '{s}' is not WxH"))?;
    let (w, h) = (w.parse()?, h.parse()?);
    ensure!(w > 0 && h > 0, "resolution must be positive");
    Ok((w, h))
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    ensure!(parts.len() == 3, "sweep '{s}' is not t0:t1:steps");
    Ok(tau_grid(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?)?)
}

fn depth_mode(tau: Option<f64>) -> Result<DepthMode> {
    match tau {
        None => Ok(DepthMode::FirstNonZero),
        Some(t) if t > 0.0 => Ok(DepthMode::Threshold(t)),
        Some(t) => bail!("tau must be positive, got {t}"),
    }
}

fn read_cameras(path: &Path) -> Result<Vec<CameraSpec>> {
    let v: serde_json::Value = read_json(path)?;
    let cams: Vec<CameraSpec> = if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    };
    ensure!(!cams.is_empty(), "{}: no cameras", path.display());
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

fn samples_or(s: Option<usize>, ck: &Checkpoint) -> usize {
    s.unwrap_or(ck.train.samples_per_ray).max(1)
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::GenScene(a) => {
            let (width, height) = parse_res(&a.res)?;
            let scene = resolve_scene(&a.scene)?;
            let settings = GenSettings {
                views: a.views,
                width,
                height,
                n_fine: a.n_fine,
                seed: a.seed,
            };
            ensure!(settings.views >= 1, "need at least one view");
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                scene: &'a str,
                out: &'a Path,
                settings: &'a GenSettings,
                workers: usize,
            }
            out_dir(&a.out)?;
            echo(
                &Resolved { command: "gen-scene", scene: &a.scene, out: &a.out, settings: &settings, workers },
                &a.out.join("gen-scene.config.json"),
            )?;
            let cams = seeded_cameras(&scene, &settings);
            generate_dataset(&scene, &cams, settings.n_fine, settings.seed, &a.out, workers)?;
        }
        Command::Train(a) => {
            let mut run: RunConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => RunConfig::default(),
            };
            if let Some(n) = a.iterations {
                let fresh = snerf_core::loss::TrainConfig::with_iterations(n);
                run.train.iterations = fresh.iterations;
                run.train.warmup_iters = fresh.warmup_iters;
            }
            if let Some(s) = a.seed {
                run.train.seed = s;
                run.field.seed = s;
            }
            run.field.validate()?;
            run.train.validate()?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                data: &'a Path,
                out: &'a Path,
                run: &'a RunConfig,
                workers: usize,
            }
            out_dir(&a.out)?;
            echo(
                &Resolved { command: "train", data: &a.data, out: &a.out, run: &run, workers },
                &a.out.join("train.config.json"),
            )?;
            let ds = Dataset::load(&a.data)?;
            let outcome = train_loop(&ds, &run, &a.out, workers)?;
            if let Some(last) = outcome.log.last() {
                eprintln!(
                    "iter {} l_rgb {:.6} v_th {:.6} depth_err {}",
                    last.iter,
                    last.stats.l_rgb,
                    last.stats.v_th,
                    crate::io::opt(last.depth_err)
                );
            }
        }
        Command::Render(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let cams = read_cameras(&a.camera)?;
            let settings = RenderSettings {
                samples: a.samples.unwrap_or(DEFAULT_SAMPLES).max(1),
                depth_mode: depth_mode(a.tau)?,
                background: [1.0; 3],
            };
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                ckpt: &'a Path,
                cameras: &'a [CameraSpec],
                out: &'a Path,
                settings: &'a RenderSettings,
                workers: usize,
            }
            out_dir(&a.out)?;
            echo(
                &Resolved { command: "render", ckpt: &a.ckpt, cameras: &cams, out: &a.out, settings: &settings, workers },
                &a.out.join("render.config.json"),
            )?;
            for (i, cam) in cams.iter().enumerate() {
                let dir = if cams.len() == 1 { a.out.clone() } else { a.out.join(format!("view_{i:03}")) };
                out_dir(&dir)?;
                render_view(&ck.params, cam, &settings, workers)?.write(&dir)?;
            }
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let ds = Dataset::load(&a.data)?;
            let samples = samples_or(a.samples, &ck);
            let taus = a.sweep.as_deref().map(parse_sweep).transpose()?;
            let is_relu = ck.params.config.density_activation.kind == NeuronKind::Relu;
            if a.baseline == Some(Baseline::Relu) {
                ensure!(is_relu, "--baseline relu needs a checkpoint with a ReLU density activation");
            }
            let taus = match (&taus, a.baseline) {
                (None, Some(Baseline::Relu)) => Some(tau_grid(1e-2, 1e3, 61)?),
                _ => taus,
            };
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                ckpt: &'a Path,
                data: &'a Path,
                out: &'a Path,
                samples: usize,
                taus: &'a Option<Vec<f64>>,
                baseline: Option<Baseline>,
                workers: usize,
            }
            out_dir(&a.out)?;
            echo(
                &Resolved {
                    command: "eval",
                    ckpt: &a.ckpt,
                    data: &a.data,
                    out: &a.out,
                    samples,
                    taus: &taus,
                    baseline: a.baseline,
                    workers,
                },
                &a.out.join("eval.config.json"),
            )?;
            let mut mode = DepthMode::FirstNonZero;
            if let Some(taus) = &taus {
                if is_relu {
                    let views: Vec<usize> = (0..ds.manifest.cameras.len()).collect();
                    let sweep = threshold_sweep(&ck.params, &ds, None, taus, samples, workers)?;
                    write_sweep(&sweep, &views, &a.out)?;
                    if a.baseline.is_some() {
                        mode = DepthMode::Threshold(sweep.best_global_tau);
                    }
                }
            }
            let report = evaluate(&ck.params, &ds, None, samples, mode, workers)?;
            report.write(&a.out)?;
            if taus.is_some() && !is_relu {
                write_threshold_free(&report, &a.out)?;
            }
            eprintln!(
                "mean depth error {} chamfer {}",
                crate::io::opt(report.mean_error()),
                crate::io::opt(report.chamfer.map(|c| c.value))
            );
        }
        Command::BoundCheck(a) => {
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                random: Option<usize>,
                seed: u64,
                ckpt: &'a Option<PathBuf>,
                data: &'a Option<PathBuf>,
                samples: Option<usize>,
                out: &'a Path,
                workers: usize,
            }
            let resolved = Resolved {
                command: "bound-check",
                random: a.random,
                seed: a.seed,
                ckpt: &a.ckpt,
                data: &a.data,
                samples: a.samples,
                out: &a.out,
                workers,
            };
            if let Some(dir) = a.out.parent() {
                if !dir.as_os_str().is_empty() {
                    out_dir(dir)?;
                }
            }
            let (checked, violations) = match (a.random, &a.ckpt, &a.data) {
                (Some(n), None, None) => {
                    ensure!(n >= 1, "--random needs at least one trial");
                    echo(&resolved, &sidecar_of(&a.out))?;
                    let trials = random_trials(n, a.seed)?;
                    let mut w = csv_writer(&a.out, &BOUND_HEADER)?;
                    for t in &trials {
                        w.write_record(bound_row(t.id, &t.report, Some(t.violation)))?;
                    }
                    w.flush()?;
                    (trials.len(), trials.iter().filter(|t| t.violation).count())
                }
                (None, Some(ckpt), Some(data)) => {
                    let resolved = Resolved { samples: a.samples.or(Some(DEFAULT_SAMPLES)), ..resolved };
                    echo(&resolved, &sidecar_of(&a.out))?;
                    let ck = Checkpoint::load(ckpt)?;
                    let ds = Dataset::load(data)?;
                    bound_check_field(&ck.params, &ds, None, samples_or(a.samples, &ck), workers, &a.out)?
                }
                _ => bail!("bound-check needs either --random N or both --ckpt and --data"),
            };
            eprintln!("{checked} rays checked, {violations} violations");
        }
        Command::Export(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let cams = read_cameras(&a.views)?;
            let samples = samples_or(a.samples, &ck);
            let mode = depth_mode(a.tau)?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                ckpt: &'a Path,
                cameras: &'a [CameraSpec],
                ply: &'a Path,
                samples: usize,
                depth_mode: DepthMode,
                workers: usize,
            }
            if let Some(dir) = a.ply.parent() {
                if !dir.as_os_str().is_empty() {
                    out_dir(dir)?;
                }
            }
            echo(
                &Resolved { command: "export", ckpt: &a.ckpt, cameras: &cams, ply: &a.ply, samples, depth_mode: mode, workers },
                &sidecar_of(&a.ply),
            )?;
            let pts = export_points(&ck.params, &cams, samples, mode, [1.0; 3], workers)?;
            write_ply(&a.ply, &pts)?;
        }
    }
    Ok(())
}
