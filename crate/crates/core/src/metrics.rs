//! Depth-error maps, Chamfer distance and threshold sweeps.
//!
//! Depth maps are row-major slices of `Option<f64>`, `None` marking
//! background.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{norm, sub};
use crate::render::{extract_depth, DepthMode, RaySampleBatch};
use crate::scene::CameraSpec;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthErrorMap {
    /// `|pred − gt|` where both are foreground.
    pub errors: Vec<Option<f64>>,
    /// Mean over mutually foreground pixels (absent when there are none).
    pub mean: Option<f64>,
    pub max: Option<f64>,
    /// Mutually foreground pixel count.
    pub foreground: usize,
    /// Foreground in the ground truth only.
    pub misses: usize,
    /// Foreground in the prediction only.
    pub false_surfaces: usize,
}

pub fn depth_error_map(pred: &[Option<f64>], gt: &[Option<f64>]) -> Result<DepthErrorMap> {
    if pred.len() != gt.len() {
        return Err(Error::contract("depth_error_map", "depth maps differ in resolution"));
    }
    let mut errors = Vec::with_capacity(pred.len());
    let (mut sum, mut max, mut fg, mut misses, mut false_surfaces) = (0.0, 0.0f64, 0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        let e = match (p, g) {
            (Some(p), Some(g)) => {
                let e = (p - g).abs();
                sum += e;
                max = max.max(e);
                fg += 1;
                Some(e)
            }
            (None, Some(_)) => {
                misses += 1;
                None
            }
            (Some(_), None) => {
                false_surfaces += 1;
                None
            }
            (None, None) => None,
        };
        errors.push(e);
    }
    Ok(DepthErrorMap {
        errors,
        mean: (fg > 0).then(|| sum / fg as f64),
        max: (fg > 0).then_some(max),
        foreground: fg,
        misses,
        false_surfaces,
    })
}

/// Mean `|pred − gt|` over pixels that are foreground in either map, with an
/// absent depth replaced by `far`. Misses and false surfaces are therefore
/// penalized instead of dropped. `None` when both maps are empty.
pub fn completed_error(pred: &[Option<f64>], gt: &[Option<f64>], far: f64) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::contract("completed_error", "depth maps differ in resolution"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.is_none() && g.is_none() {
            continue;
        }
        sum += (p.unwrap_or(far) - g.unwrap_or(far)).abs();
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// One surface point per foreground pixel.
pub fn backproject(depth: &[Option<f64>], camera: &CameraSpec) -> Result<Vec<Vec3>> {
    if depth.len() != camera.width * camera.height {
        return Err(Error::contract("backproject", "depth map does not match the camera"));
    }
    let mut out = Vec::new();
    for (i, d) in depth.iter().enumerate() {
        if let Some(d) = d {
            let ray = camera.ray(i % camera.width, i / camera.width);
            out.push(ray.at(*d));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    pub value: f64,
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            best = best.min(norm(sub(*p, *q)));
        }
        total += best;
    }
    total / from.len() as f64
}

/// Halved sum of the two mean nearest-neighbour distances (not squared).
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<ChamferResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer", "point sets must be non-empty"));
    }
    let a_to_b = mean_nearest(a, b);
    let b_to_a = mean_nearest(b, a);
    Ok(ChamferResult {
        value: 0.5 * (a_to_b + b_to_a),
        a_to_b,
        b_to_a,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Depth map extracted from sampled rays.
pub fn extract_depth_map(batches: &[RaySampleBatch], mode: DepthMode) -> Vec<Option<f64>> {
    batches.iter().map(|b| extract_depth(b, mode)).collect()
}

/// Completed depth error of one view at each threshold.
pub fn sweep_view(batches: &[RaySampleBatch], gt: &[Option<f64>], taus: &[f64], far: f64) -> Result<Vec<f64>> {
    taus.iter()
        .map(|&tau| {
            let pred = extract_depth_map(batches, DepthMode::Threshold(tau));
            Ok(completed_error(&pred, gt, far)?.unwrap_or(0.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub taus: Vec<f64>,
    /// `curves[v][j]`: error of view `v` at `taus[j]`.
    pub curves: Vec<Vec<f64>>,
    /// Per view, the smallest threshold reaching that view's minimum.
    pub best_tau: Vec<f64>,
    pub best_error: Vec<f64>,
    /// Mean error over views at each threshold.
    pub global_curve: Vec<f64>,
    pub best_global_tau: f64,
    pub best_global_error: f64,
    /// `max − min` of the per-view best thresholds.
    pub spread: f64,
}

impl SweepResult {
    /// Mean over views of each view's optimum.
    pub fn mean_best_error(&self) -> f64 {
        self.best_error.iter().sum::<f64>() / self.best_error.len() as f64
    }
}

pub fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) || taus.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract("threshold_sweep", "thresholds must be positive and ascending"));
    }
    Ok(())
}

/// Summarizes per-view error curves over a common threshold grid.
pub fn summarize_sweep(taus: &[f64], curves: Vec<Vec<f64>>) -> Result<SweepResult> {
    check_taus(taus)?;
    if curves.is_empty() || curves.iter().any(|c| c.len() != taus.len()) {
        return Err(Error::contract("threshold_sweep", "one curve per view with one value per threshold"));
    }
    let argmin = |c: &[f64]| {
        let mut best = 0;
        for (j, v) in c.iter().enumerate() {
            if *v < c[best] {
                best = j;
            }
        }
        best
    };
    let best_idx: Vec<usize> = curves.iter().map(|c| argmin(c)).collect();
    let best_tau: Vec<f64> = best_idx.iter().map(|&j| taus[j]).collect();
    let best_error: Vec<f64> = curves.iter().zip(&best_idx).map(|(c, &j)| c[j]).collect();
    let global_curve: Vec<f64> = (0..taus.len())
        .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64)
        .collect();
    let g = argmin(&global_curve);
    let lo = best_tau.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = best_tau.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SweepResult {
        taus: taus.to_vec(),
        curves,
        best_tau,
        best_error,
        best_global_tau: taus[g],
        best_global_error: global_curve[g],
        global_curve,
        spread: hi - lo,
    })
}

/// Geometric threshold grid from `t0` to `t1` inclusive.
pub fn tau_grid(t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>> {
    if !(t0 > 0.0 && t1 > t0) || steps < 2 {
        return Err(Error::contract("tau_grid", "need 0 < t0 < t1 and at least two steps"));
    }
    let ratio = crate::math::ln(t1 / t0) / (steps - 1) as f64;
    Ok((0..steps).map(|i| t0 * crate::math::exp(ratio * i as f64)).collect())
}
