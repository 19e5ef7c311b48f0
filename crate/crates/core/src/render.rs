//! Ray sampling, volume-rendering quadrature and depth extraction.
//!
//! Quadrature weights follow `w_i = T_i (1 − e^{−σ_i Δt_i})` with
//! `T_i = exp(−Σ_{j<i} σ_j Δt_j)`, so `Σ w_i = 1 − Π β_i` with
//! `β_i = e^{−σ_i Δt_i}`. The integrated depth is `Σ w_i t_i` and the
//! extracted depth is the first sample whose density is non-zero (or clears
//! a threshold).
//!
//! [`bound_report`] evaluates the two-sided envelope on the gap between the
//! two depths for a ray whose first fired density equals the threshold:
//!
//! ```text
//! (Δt_{m+1} − T e^{−V_max Δt_{m'}}) e^{−V_th Δt_m}
//!     < d − d_v <
//! T (1 − e^{−V_max T}) e^{−V_th Δt_m}
//! ```
//!
//! where `m` is the first fired index, `m'` the index of the largest density
//! after it and `T` the length of the sampling range.

use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::math::{exp, norm};
use crate::tensor::Tensor;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        if !(near < far) {
            return Err(Error::contract("Ray::new", "near must be below far"));
        }
        if (norm(dir) - 1.0).abs() > 1e-6 {
            return Err(Error::contract("Ray::new", "direction is not unit length"));
        }
        Ok(Ray {
            origin,
            dir,
            near,
            far,
        })
    }

    /// Length of the sampling range, `far − near`.
    pub fn t_range(&self) -> f64 {
        self.far - self.near
    }

    pub fn at(&self, t: f64) -> Vec3 {
        crate::math::at(self.origin, self.dir, t)
    }
}

/// Sample positions and intervals along a ray.
///
/// `n` equal bins cover `[near, far]`. Without a generator each sample sits
/// at its bin centre; with one it is jittered uniformly inside the bin.
/// `dt[i] = t[i] − t[i−1]`, and the first interval is measured from a
/// virtual sample half a bin before `near`, so centre sampling has every
/// `dt` equal to the bin width and `Σ dt = far − near`.
pub fn sample_ray(ray: &Ray, n: usize, rng: Option<&mut dyn RngCore>) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(Error::contract("sample_ray", "need at least two samples"));
    }
    let bin = ray.t_range() / n as f64;
    let t: Vec<f64> = match rng {
        None => (0..n).map(|i| ray.near + (i as f64 + 0.5) * bin).collect(),
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * bin)
            .collect(),
    };
    let mut dt = Vec::with_capacity(n);
    let mut prev = ray.near - 0.5 * bin;
    for &ti in &t {
        dt.push(ti - prev);
        prev = ti;
    }
    Ok((t, dt))
}

/// Quadrature weights and transmittance for densities over intervals.
pub fn composite_weights(sigma: &[f64], dt: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma.len() != dt.len() {
        return Err(Error::contract("composite", "sigma and dt differ in length"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::contract(
            "composite",
            alloc::format!("density {s} is negative or NaN"),
        ));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    let mut optical = 0.0;
    for (&s, &d) in sigma.iter().zip(dt) {
        let t_i = exp(-optical);
        trans.push(t_i);
        weights.push(t_i * -libm::expm1(-s * d));
        optical += s * d;
    }
    Ok((weights, trans))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleBatch {
    pub near: f64,
    pub far: f64,
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl RaySampleBatch {
    /// Builds a batch and computes its weights. Densities must be
    /// non-negative; `t` must be ascending.
    pub fn new(
        near: f64,
        far: f64,
        t: Vec<f64>,
        dt: Vec<f64>,
        sigma: Vec<f64>,
        color: Vec<Vec3>,
    ) -> Result<Self> {
        if t.len() != sigma.len() || color.len() != sigma.len() {
            return Err(Error::contract("RaySampleBatch::new", "sample arrays differ in length"));
        }
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("RaySampleBatch::new", "sample distances not ascending"));
        }
        let (weights, transmittance) = composite_weights(&sigma, &dt)?;
        Ok(RaySampleBatch {
            near,
            far,
            t,
            dt,
            sigma,
            color,
            weights,
            transmittance,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `Π β_i`, the transmittance past the last sample.
    pub fn residual_transmittance(&self) -> f64 {
        let optical: f64 = self.sigma.iter().zip(&self.dt).map(|(s, d)| s * d).sum();
        exp(-optical)
    }
}

/// Output of [`composite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    /// `Σ w_i c_i`, without background.
    pub color: Vec3,
    /// `Σ w_i t_i`.
    pub depth: f64,
    /// `Σ w_i`.
    pub weight_sum: f64,
}

impl Composite {
    /// Color with the background showing through the residual transmittance.
    pub fn over(&self, background: Vec3) -> Vec3 {
        let rest = 1.0 - self.weight_sum;
        [
            self.color[0] + rest * background[0],
            self.color[1] + rest * background[1],
            self.color[2] + rest * background[2],
        ]
    }
}

pub fn composite(batch: &RaySampleBatch) -> Composite {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut weight_sum = 0.0;
    for ((w, c), t) in batch.weights.iter().zip(&batch.color).zip(&batch.t) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * t;
        weight_sum += w;
    }
    Composite {
        color,
        depth,
        weight_sum,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "tau")]
pub enum DepthMode {
    /// First sample with non-zero density.
    FirstNonZero,
    /// First sample with density at least `tau`.
    Threshold(f64),
}

/// Index of the first qualifying sample.
pub fn first_surface_index(sigma: &[f64], mode: DepthMode) -> Option<usize> {
    match mode {
        DepthMode::FirstNonZero => sigma.iter().position(|&s| s > 0.0),
        DepthMode::Threshold(tau) => sigma.iter().position(|&s| s >= tau),
    }
}

/// Extracted depth, or `None` when the ray escapes.
pub fn extract_depth(batch: &RaySampleBatch, mode: DepthMode) -> Option<f64> {
    first_surface_index(&batch.sigma, mode).map(|i| batch.t[i])
}

/// Envelope on the gap between integrated and extracted depth for one ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub v_th: f64,
    /// Largest density after the first fired sample.
    pub v_max: f64,
    pub dt_m: f64,
    pub dt_m1: f64,
    pub dt_mp: f64,
    pub t_range: f64,
    pub lower: f64,
    pub upper: f64,
    pub abs_bound: f64,
    pub d_integrated: f64,
    pub d_extracted: f64,
    /// Index of the first fired sample.
    pub m: usize,
    /// `d − d_v` with distances measured from the start of the sampling
    /// range (identical to `d_integrated − d_extracted` when `near = 0`).
    pub offset: f64,
    /// The fired sample was the last one, so `v_max` fell back to `σ_m`.
    pub degenerate: bool,
}

impl BoundReport {
    /// Whether `lower < offset < upper`.
    pub fn holds(&self) -> bool {
        self.lower < self.offset && self.offset < self.upper
    }
}

/// Envelope with a single interval length `dt` for every index.
pub fn bound_scalar(v_th: f64, v_max: f64, dt: f64, t_range: f64) -> (f64, f64) {
    bound_terms(v_th, v_max, dt, dt, dt, t_range)
}

fn bound_terms(v_th: f64, v_max: f64, dt_m: f64, dt_m1: f64, dt_mp: f64, t_range: f64) -> (f64, f64) {
    let shared = exp(-v_th * dt_m);
    let lower = (dt_m1 - t_range * exp(-v_max * dt_mp)) * shared;
    let upper = t_range * (1.0 - exp(-v_max * t_range)) * shared;
    (lower, upper)
}

/// Evaluates the envelope for a composited ray with per-index intervals.
pub fn bound_report(batch: &RaySampleBatch, v_th: f64) -> Result<BoundReport> {
    let m = first_surface_index(&batch.sigma, DepthMode::FirstNonZero).ok_or(Error::NoSurface)?;
    let n = batch.len();
    let degenerate = m + 1 >= n;
    let (v_max, m_prime) = if degenerate {
        (batch.sigma[m], m)
    } else {
        let mut best = (batch.sigma[m + 1], m + 1);
        for i in m + 2..n {
            if batch.sigma[i] > best.0 {
                best = (batch.sigma[i], i);
            }
        }
        best
    };
    let dt_m = batch.dt[m];
    let dt_m1 = if degenerate { dt_m } else { batch.dt[m + 1] };
    let dt_mp = batch.dt[m_prime];
    let t_range = batch.far - batch.near;
    let (lower, upper) = bound_terms(v_th, v_max, dt_m, dt_m1, dt_mp, t_range);
    let c = composite(batch);
    let d_extracted = batch.t[m];
    let offset = (c.depth - batch.near * c.weight_sum) - (d_extracted - batch.near);
    Ok(BoundReport {
        v_th,
        v_max,
        dt_m,
        dt_m1,
        dt_mp,
        t_range,
        lower,
        upper,
        abs_bound: lower.abs().max(upper.abs()),
        d_integrated: c.depth,
        d_extracted,
        m,
        offset,
        degenerate,
    })
}

/// Tape outputs of [`composite_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct TapeComposite {
    /// `R×3` colors including background.
    pub color: Var,
    /// `R×1` integrated depths.
    pub depth: Var,
    /// `P×1` quadrature weights.
    pub weights: Var,
}

/// Differentiable compositing of `R` rays with `samples` consecutive rows
/// each. `t` and `dt` are `P×1` constants.
pub fn composite_on_tape(
    tape: &mut Tape,
    sigma: Var,
    rgb: Var,
    t: &Tensor,
    dt: &Tensor,
    samples: usize,
    background: Vec3,
) -> Result<TapeComposite> {
    let p = tape.value(sigma).rows();
    if p % samples != 0 || t.rows() != p || dt.rows() != p {
        return Err(Error::contract("composite_on_tape", "batch is not rays × samples"));
    }
    let dt_v = tape.constant(dt.clone());
    let t_v = tape.constant(t.clone());
    let optical = tape.mul(sigma, dt_v)?;
    let before = tape.exclusive_cumsum(optical, samples)?;
    let neg_before = tape.neg(before)?;
    let trans = tape.exp(neg_before)?;
    let neg_optical = tape.neg(optical)?;
    let beta = tape.exp(neg_optical)?;
    let one = tape.constant_scalar(1.0);
    let alpha = tape.sub(one, beta)?;
    let weights = tape.mul(trans, alpha)?;
    let weighted = tape.scale_rows(rgb, weights)?;
    let color = tape.segment_sum(weighted, samples)?;
    let acc = tape.segment_sum(weights, samples)?;
    let rest = tape.sub(one, acc)?;
    let rays = p / samples;
    let bg = tape.constant(Tensor::from_rows(&alloc::vec![background; rays]));
    let bg_term = tape.scale_rows(bg, rest)?;
    let color = tape.add(color, bg_term)?;
    let wt = tape.mul(weights, t_v)?;
    let depth = tape.segment_sum(wt, samples)?;
    Ok(TapeComposite {
        color,
        depth,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_ray() -> Ray {
        Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap()
    }

    fn batch(t: &[f64], dt: &[f64], sigma: &[f64]) -> RaySampleBatch {
        RaySampleBatch::new(
            0.0,
            1.0,
            t.to_vec(),
            dt.to_vec(),
            sigma.to_vec(),
            alloc::vec![[1.0, 0.5, 0.25]; t.len()],
        )
        .unwrap()
    }

    #[test]
    fn ray_validation() {
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 1.0], 1.0, 1.0).is_err());
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn centre_sampling() {
        let (t, dt) = sample_ray(&unit_ray(), 4, None).unwrap();
        assert_eq!(t, [0.125, 0.375, 0.625, 0.875]);
        assert_eq!(dt, [0.25; 4]);
        let (_, dt) = sample_ray(&Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.3, 2.9).unwrap(), 37, None).unwrap();
        assert!((dt.iter().sum::<f64>() - 2.6).abs() < 1e-12);
        assert!(sample_ray(&unit_ray(), 1, None).is_err());
    }

    #[test]
    fn stratified_sampling_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let (ta, _) = sample_ray(&unit_ray(), 16, Some(&mut a)).unwrap();
        let (tb, dtb) = sample_ray(&unit_ray(), 16, Some(&mut b)).unwrap();
        assert_eq!(ta, tb);
        for (i, t) in ta.iter().enumerate() {
            assert!(*t >= i as f64 / 16.0 && *t < (i + 1) as f64 / 16.0);
        }
        assert!(dtb.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn empty_space_composites_to_nothing() {
        let b = batch(&[0.1, 0.2], &[0.1, 0.1], &[0.0, 0.0]);
        let c = composite(&b);
        assert_eq!((c.color, c.depth, c.weight_sum), ([0.0; 3], 0.0, 0.0));
        assert_eq!(extract_depth(&b, DepthMode::FirstNonZero), None);
    }

    #[test]
    fn constant_density_weight_sum() {
        let n = 50;
        let (t, dt) = sample_ray(&unit_ray(), n, None).unwrap();
        let b = batch(&t, &dt, &alloc::vec![3.0; n]);
        let expected = 1.0 - exp(-3.0 * n as f64 * (1.0 / n as f64));
        assert!((composite(&b).weight_sum - expected).abs() < 1e-14);
        assert!((composite(&b).weight_sum - (1.0 - b.residual_transmittance())).abs() < 1e-14);
    }

    #[test]
    fn negative_density_is_rejected() {
        assert!(RaySampleBatch::new(0.0, 1.0, alloc::vec![0.5], alloc::vec![0.1], alloc::vec![-1.0], alloc::vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn extraction_modes() {
        let b = batch(&[0.1, 0.2, 0.3, 0.4], &[0.1; 4], &[0.0, 0.0, 4.0, 7.0]);
        assert_eq!(extract_depth(&b, DepthMode::FirstNonZero), Some(0.3));
        let b = batch(&[0.1, 0.2, 0.3], &[0.1; 3], &[0.2, 0.9, 3.0]);
        assert_eq!(extract_depth(&b, DepthMode::Threshold(1.0)), Some(0.3));
        assert_eq!(extract_depth(&b, DepthMode::Threshold(5.0)), None);
    }

    #[test]
    fn scalar_envelope_reference_values() {
        let (lo, up) = bound_scalar(10.0, 5.0, 0.01, 2.0);
        // Reference values from 30-digit evaluation.
        assert!((lo - -1.712_367_578_669_756).abs() < 1e-12);
        assert!((up - 1.809_592_676_961_468_5).abs() < 1e-12);
        let (lo0, up0) = bound_scalar(0.0, 5.0, 0.01, 2.0);
        let (lo5, up5) = bound_scalar(500.0, 5.0, 0.01, 2.0);
        let ratio = exp(-5.0);
        assert!((lo5 / lo0 - ratio).abs() < 1e-12 && (up5 / up0 - ratio).abs() < 1e-12);
    }

    #[test]
    fn report_requires_a_surface() {
        let b = batch(&[0.1, 0.2], &[0.1, 0.1], &[0.0, 0.0]);
        assert_eq!(bound_report(&b, 1.0), Err(Error::NoSurface));
    }

    #[test]
    fn degenerate_last_sample_falls_back() {
        let b = batch(&[0.1, 0.2, 0.3], &[0.1; 3], &[0.0, 0.0, 6.0]);
        let r = bound_report(&b, 6.0).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.v_max, 6.0);
        assert!(r.abs_bound.is_finite());
    }

    #[test]
    fn report_uses_successor_peak() {
        let b = batch(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0.1; 5], &[0.0, 2.0, 9.0, 4.0, 9.0]);
        let r = bound_report(&b, 2.0).unwrap();
        assert_eq!((r.m, r.v_max, r.degenerate), (1, 9.0, false));
        assert!(r.holds(), "{r:?}");
        assert_eq!(r.abs_bound, r.lower.abs().max(r.upper.abs()));
    }

    #[test]
    fn tape_composite_matches_plain() {
        let sig = [0.0, 0.5, 3.0, 0.2, 0.0, 1.0];
        let rgb = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.4], [0.3, 0.3, 0.3], [0.5, 0.6, 0.7], [0.2, 0.8, 0.1], [1.0, 0.0, 0.5]];
        let t = [0.2, 0.4, 0.6, 0.3, 0.5, 0.7];
        let dt = [0.2; 6];
        let bg = [1.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let s = tape.param(Tensor::column(&sig));
        let c = tape.param(Tensor::from_rows(&rgb));
        let out = composite_on_tape(&mut tape, s, c, &Tensor::column(&t), &Tensor::column(&dt), 3, bg).unwrap();
        for ray in 0..2 {
            let r = 3 * ray..3 * ray + 3;
            let b = RaySampleBatch::new(0.0, 1.0, t[r.clone()].to_vec(), dt[r.clone()].to_vec(), sig[r.clone()].to_vec(), rgb[r].to_vec()).unwrap();
            let plain = composite(&b);
            let col = plain.over(bg);
            for k in 0..3 {
                assert!((tape.value(out.color).get(ray, k) - col[k]).abs() < 1e-14);
            }
            assert!((tape.value(out.depth).get(ray, 0) - plain.depth).abs() < 1e-14);
        }
    }
}
