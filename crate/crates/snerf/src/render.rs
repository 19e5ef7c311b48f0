//! Rendering a trained field: colors, depths and per-ray bound reports.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snerf_core::field::{eval_points, FieldParams, EVAL_CHUNK};
use snerf_core::render::{bound_report, composite, extract_depth, sample_ray, BoundReport, DepthMode, Ray, RaySampleBatch};
use snerf_core::scene::CameraSpec;
use snerf_core::{Error, Vec3};

use crate::io::{csv_writer, write_pfm, write_ppm};
use crate::pool;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub samples: usize,
    pub depth_mode: DepthMode,
    pub background: Vec3,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples: snerf_core::scene::DEFAULT_SAMPLES,
            depth_mode: DepthMode::FirstNonZero,
            background: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayResult {
    pub rgb: Vec3,
    /// Integrated depth `Σ w t`, absent when nothing absorbs.
    pub depth_integrated: Option<f64>,
    pub depth_extracted: Option<f64>,
    /// Present when some sample has non-zero density.
    pub bound: Option<BoundReport>,
}

/// Centre-sampled field densities and colors along each ray.
pub fn sample_field(params: &FieldParams, rays: &[Ray], samples: usize) -> Result<Vec<RaySampleBatch>> {
    let mut pos = Vec::with_capacity(rays.len() * samples);
    let mut dirs = Vec::with_capacity(rays.len() * samples);
    let mut ts = Vec::with_capacity(rays.len());
    for ray in rays {
        let (t, dt) = sample_ray(ray, samples, None)?;
        pos.extend(t.iter().map(|&ti| ray.at(ti)));
        dirs.extend(std::iter::repeat(ray.dir).take(samples));
        ts.push((t, dt));
    }
    let pts = eval_points(params, &pos, &dirs)?;
    rays.iter()
        .zip(ts)
        .zip(pts.chunks(samples))
        .map(|((ray, (t, dt)), p)| {
            let sigma = p.iter().map(|s| s.sigma).collect();
            let color = p.iter().map(|s| s.rgb).collect();
            Ok(RaySampleBatch::new(ray.near, ray.far, t, dt, sigma, color)?)
        })
        .collect()
}

fn finish(batch: &RaySampleBatch, v_th: f64, s: &RenderSettings) -> Result<RayResult> {
    let c = composite(batch);
    let bound = match bound_report(batch, v_th) {
        Ok(b) => Some(b),
        Err(Error::NoSurface) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(RayResult {
        rgb: c.over(s.background),
        depth_integrated: (c.weight_sum > 0.0).then_some(c.depth),
        depth_extracted: extract_depth(batch, s.depth_mode),
        bound,
    })
}

/// Renders rays in chunks, in parallel over `workers` threads. Results are
/// in input order and do not depend on the worker count.
pub fn render_rays(params: &FieldParams, rays: &[Ray], s: &RenderSettings, workers: usize) -> Result<Vec<RayResult>> {
    let per_chunk = (EVAL_CHUNK / s.samples).max(1);
    let v_th = params.neuron.v_th;
    let chunks: Vec<Vec<RayResult>> = pool(workers)?.install(|| {
        rays.par_chunks(per_chunk)
            .enumerate()
            .map(|(ci, chunk)| {
                let batches = sample_field(params, chunk, s.samples)
                    .with_context(|| format!("rays {}..{}", ci * per_chunk, ci * per_chunk + chunk.len()))?;
                batches.iter().map(|b| finish(b, v_th, s)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Sampled batches for rays, in parallel; used by threshold sweeps.
pub fn sample_rays(params: &FieldParams, rays: &[Ray], samples: usize, workers: usize) -> Result<Vec<RaySampleBatch>> {
    let per_chunk = (EVAL_CHUNK / samples).max(1);
    let chunks: Vec<Vec<RaySampleBatch>> = pool(workers)?.install(|| {
        rays.par_chunks(per_chunk)
            .map(|chunk| sample_field(params, chunk, samples))
            .collect::<Result<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<RayResult>,
}

impl RenderedView {
    pub fn rgb(&self) -> Vec<Vec3> {
        self.pixels.iter().map(|p| p.rgb).collect()
    }

    pub fn depth_extracted(&self) -> Vec<Option<f64>> {
        self.pixels.iter().map(|p| p.depth_extracted).collect()
    }

    pub fn depth_integrated(&self) -> Vec<Option<f64>> {
        self.pixels.iter().map(|p| p.depth_integrated).collect()
    }

    /// Mean `abs_bound` over rays with a surface.
    pub fn mean_abs_bound(&self) -> Option<f64> {
        mean(self.pixels.iter().filter_map(|p| p.bound.map(|b| b.abs_bound)))
    }

    /// Writes `rgb.ppm`, `depth_extracted.pfm`, `depth_integrated.pfm` and
    /// `bounds.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_ppm(&dir.join("rgb.ppm"), self.width, self.height, &self.rgb())?;
        write_pfm(&dir.join("depth_extracted.pfm"), self.width, self.height, &self.depth_extracted())?;
        write_pfm(&dir.join("depth_integrated.pfm"), self.width, self.height, &self.depth_integrated())?;
        let mut w = csv_writer(&dir.join("bounds.csv"), &BOUND_HEADER)?;
        for (i, p) in self.pixels.iter().enumerate() {
            if let Some(b) = &p.bound {
                w.write_record(bound_row(i, b, None))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub const BOUND_HEADER: [&str; 10] = [
    "ray_id", "v_th", "v_max", "dt_m", "lower", "upper", "abs_bound", "d_int", "d_ext", "violation",
];

/// CSV row for a bound report; the last column is the violation flag
/// (`0`/`1`) or empty when it is not evaluated.
pub fn bound_row(id: usize, b: &BoundReport, violation: Option<bool>) -> Vec<String> {
    vec![
        id.to_string(),
        b.v_th.to_string(),
        b.v_max.to_string(),
        b.dt_m.to_string(),
        b.lower.to_string(),
        b.upper.to_string(),
        b.abs_bound.to_string(),
        b.d_integrated.to_string(),
        b.d_extracted.to_string(),
        violation.map_or_else(String::new, |v| u8::from(v).to_string()),
    ]
}

pub fn render_view(params: &FieldParams, cam: &CameraSpec, s: &RenderSettings, workers: usize) -> Result<RenderedView> {
    cam.validate()?;
    Ok(RenderedView {
        width: cam.width,
        height: cam.height,
        pixels: render_rays(params, &cam.rays(), s, workers)?,
    })
}

pub fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
