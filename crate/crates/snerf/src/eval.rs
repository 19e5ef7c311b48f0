//! Evaluation against a dataset's ground truth.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::Serialize;
use snerf_core::field::FieldParams;
use snerf_core::metrics::{
    backproject, chamfer, check_taus, completed_error, depth_error_map, summarize_sweep, sweep_view, ChamferResult,
    DepthErrorMap, SweepResult,
};
use snerf_core::render::{bound_report, DepthMode};
use snerf_core::scene::CameraSpec;
use snerf_core::Vec3;

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::io::{csv_writer, opt};
use crate::render::{render_view, sample_rays, RenderSettings, BOUND_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEval {
    pub view: usize,
    pub errors: DepthErrorMap,
    /// Error over the union of foregrounds, a missing depth counted as `far`.
    pub completed: Option<f64>,
    pub mean_abs_bound: Option<f64>,
    pub depth: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewEval>,
    /// Back-projected prediction against back-projected ground truth.
    pub chamfer: Option<ChamferResult>,
}

impl EvalReport {
    /// Mean over all mutually foreground pixels of every view.
    pub fn mean_error(&self) -> Option<f64> {
        let (sum, n) = self.views.iter().fold((0.0, 0usize), |(s, n), v| {
            (s + v.errors.mean.unwrap_or(0.0) * v.errors.foreground as f64, n + v.errors.foreground)
        });
        (n > 0).then(|| sum / n as f64)
    }

    pub fn mean_completed(&self) -> Option<f64> {
        crate::render::mean(self.views.iter().filter_map(|v| v.completed))
    }

    pub fn mean_abs_bound(&self) -> Option<f64> {
        crate::render::mean(self.views.iter().filter_map(|v| v.mean_abs_bound))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv_writer(
            &dir.join("eval.csv"),
            &["view", "mean_err", "max_err", "foreground", "misses", "false_surfaces", "completed_err", "mean_abs_bound"],
        )?;
        for v in &self.views {
            w.write_record([
                v.view.to_string(),
                opt(v.errors.mean),
                opt(v.errors.max),
                v.errors.foreground.to_string(),
                v.errors.misses.to_string(),
                v.errors.false_surfaces.to_string(),
                opt(v.completed),
                opt(v.mean_abs_bound),
            ])?;
        }
        w.flush()?;
        let mut c = csv_writer(&dir.join("chamfer.csv"), &["value", "pred_to_gt", "gt_to_pred", "n_pred", "n_gt"])?;
        if let Some(r) = &self.chamfer {
            c.write_record([
                r.value.to_string(),
                r.a_to_b.to_string(),
                r.b_to_a.to_string(),
                r.n_a.to_string(),
                r.n_b.to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    }
}

fn all_views(ds: &Dataset, views: Option<&[usize]>) -> Result<Vec<usize>> {
    let v: Vec<usize> = views.map_or_else(|| (0..ds.manifest.cameras.len()).collect(), <[usize]>::to_vec);
    for &i in &v {
        ensure!(i < ds.manifest.cameras.len(), "view {i} not in dataset");
    }
    Ok(v)
}

/// Depth errors per view and the Chamfer distance of the pooled
/// back-projected clouds.
pub fn evaluate(
    params: &FieldParams,
    ds: &Dataset,
    views: Option<&[usize]>,
    samples: usize,
    mode: DepthMode,
    workers: usize,
) -> Result<EvalReport> {
    let settings = RenderSettings {
        samples,
        depth_mode: mode,
        background: ds.scene.background,
    };
    let mut out = Vec::new();
    let mut pred_cloud: Vec<Vec3> = Vec::new();
    let mut gt_cloud: Vec<Vec3> = Vec::new();
    for v in all_views(ds, views)? {
        let cam = &ds.manifest.cameras[v];
        let r = render_view(params, cam, &settings, workers).with_context(|| format!("view {v}"))?;
        let depth = r.depth_extracted();
        let gt = &ds.depths[v];
        pred_cloud.extend(backproject(&depth, cam)?);
        gt_cloud.extend(backproject(gt, cam)?);
        out.push(ViewEval {
            view: v,
            errors: depth_error_map(&depth, gt)?,
            completed: completed_error(&depth, gt, cam.far)?,
            mean_abs_bound: r.mean_abs_bound(),
            depth,
        });
    }
    let chamfer = if pred_cloud.is_empty() || gt_cloud.is_empty() {
        None
    } else {
        Some(chamfer(&pred_cloud, &gt_cloud)?)
    };
    Ok(EvalReport { views: out, chamfer })
}

/// Per-view completed depth error over a threshold grid.
pub fn threshold_sweep(
    params: &FieldParams,
    ds: &Dataset,
    views: Option<&[usize]>,
    taus: &[f64],
    samples: usize,
    workers: usize,
) -> Result<SweepResult> {
    check_taus(taus)?;
    let mut curves = Vec::new();
    for v in all_views(ds, views)? {
        let cam = &ds.manifest.cameras[v];
        let batches = sample_rays(params, &cam.rays(), samples, workers)?;
        curves.push(sweep_view(&batches, &ds.depths[v], taus, cam.far)?);
    }
    Ok(summarize_sweep(taus, curves)?)
}

pub fn write_sweep(r: &SweepResult, views: &[usize], dir: &Path) -> Result<()> {
    let mut w = csv_writer(&dir.join("sweep.csv"), &["view", "tau", "error"])?;
    for (v, curve) in views.iter().zip(&r.curves) {
        for (tau, e) in r.taus.iter().zip(curve) {
            w.write_record([v.to_string(), tau.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    let mut s = csv_writer(&dir.join("sweep_summary.csv"), &["view", "best_tau", "best_error"])?;
    for ((v, t), e) in views.iter().zip(&r.best_tau).zip(&r.best_error) {
        s.write_record([v.to_string(), t.to_string(), e.to_string()])?;
    }
    s.write_record(["global".to_string(), r.best_global_tau.to_string(), r.best_global_error.to_string()])?;
    s.write_record(["spread".to_string(), r.spread.to_string(), String::new()])?;
    s.flush()?;
    Ok(())
}

/// Without a threshold parameter the sweep has a single row per view.
pub fn write_threshold_free(report: &EvalReport, dir: &Path) -> Result<()> {
    let mut w = csv_writer(&dir.join("sweep.csv"), &["view", "tau", "error"])?;
    for v in &report.views {
        w.write_record([v.view.to_string(), String::new(), opt(v.completed)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackRow {
    pub iter: u64,
    pub depth_err: Option<f64>,
    pub abs_bound: Option<f64>,
}

/// Mean depth error and mean bound for each checkpoint.
pub fn bound_tracking(
    checkpoints: &[PathBuf],
    ds: &Dataset,
    views: Option<&[usize]>,
    samples: usize,
    workers: usize,
) -> Result<Vec<TrackRow>> {
    ensure!(checkpoints.len() >= 2, "bound tracking needs at least two checkpoints");
    checkpoints
        .iter()
        .map(|p| {
            let ck = Checkpoint::load(p)?;
            let r = evaluate(&ck.params, ds, views, samples, DepthMode::FirstNonZero, workers)?;
            Ok(TrackRow {
                iter: ck.iteration,
                depth_err: r.mean_error(),
                abs_bound: r.mean_abs_bound(),
            })
        })
        .collect()
}

pub fn write_tracking(rows: &[TrackRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path, &["iter", "depth_err", "abs_bound"])?;
    for r in rows {
        w.write_record([r.iter.to_string(), opt(r.depth_err), opt(r.abs_bound)])?;
    }
    w.flush()?;
    Ok(())
}

/// Back-projected extracted-depth points of every camera.
pub fn export_points(
    params: &FieldParams,
    cams: &[CameraSpec],
    samples: usize,
    mode: DepthMode,
    background: Vec3,
    workers: usize,
) -> Result<Vec<Vec3>> {
    let s = RenderSettings {
        samples,
        depth_mode: mode,
        background,
    };
    let mut pts = Vec::new();
    for cam in cams {
        let r = render_view(params, cam, &s, workers)?;
        pts.extend(backproject(&r.depth_extracted(), cam)?);
    }
    Ok(pts)
}

/// Bound reports of a field's rays over dataset views, written as CSV with
/// a violation column. Returns (rays with a surface, violations).
pub fn bound_check_field(
    params: &FieldParams,
    ds: &Dataset,
    views: Option<&[usize]>,
    samples: usize,
    workers: usize,
    path: &Path,
) -> Result<(usize, usize)> {
    let mut w = csv_writer(path, &BOUND_HEADER)?;
    let (mut n, mut bad) = (0, 0);
    let mut id = 0;
    for v in all_views(ds, views)? {
        let cam = &ds.manifest.cameras[v];
        for b in sample_rays(params, &cam.rays(), samples, workers)? {
            if let Ok(rep) = bound_report(&b, params.neuron.v_th) {
                let violation = !rep.holds();
                n += 1;
                bad += usize::from(violation);
                w.write_record(crate::render::bound_row(id, &rep, Some(violation)))?;
            }
            id += 1;
        }
    }
    w.flush()?;
    Ok((n, bad))
}
