//! Training objective: photometric loss, threshold regularizer, geometry
//! smoothness term and their schedule.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::math::{exp, ln};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbNorm {
    /// Squared L2 norm of the per-pixel residual.
    SquaredL2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub iterations: u64,
    pub lr: f64,
    pub lambda1_start: f64,
    pub lambda1_end: f64,
    pub lambda2_start: f64,
    pub lambda2_end: f64,
    pub warmup_iters: u64,
    pub eps_v: f64,
    pub fd_eps: f64,
    /// Rays per batch that also get the geometry term (all when `None`).
    pub lg_rays: Option<usize>,
    pub rgb_norm: RgbNorm,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_batch: 1024,
            samples_per_ray: 64,
            stratified: true,
            iterations: 20_000,
            lr: 5e-4,
            lambda1_start: 0.15,
            lambda1_end: 1.5,
            lambda2_start: 1e-4,
            lambda2_end: 1e-6,
            warmup_iters: 2_000,
            eps_v: 1e-3,
            fd_eps: 1e-3,
            lg_rays: None,
            rgb_norm: RgbNorm::SquaredL2,
            seed: 0,
            checkpoint_every: 5_000,
            log_every: 250,
        }
    }
}

impl TrainConfig {
    /// Config with the warmup set to 10% of `iterations`.
    pub fn with_iterations(iterations: u64) -> Self {
        TrainConfig {
            iterations,
            warmup_iters: iterations / 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.warmup_iters >= self.iterations {
            return Err(Error::contract("TrainConfig", "warmup must end before the last iteration"));
        }
        let positive = [
            self.lambda1_start,
            self.lambda1_end,
            self.lambda2_start,
            self.lambda2_end,
            self.eps_v,
            self.fd_eps,
            self.lr,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("TrainConfig", "lambdas, epsilons and lr must be positive"));
        }
        if self.rays_per_batch == 0 || self.samples_per_ray < 2 {
            return Err(Error::contract("TrainConfig", "need rays and at least two samples per ray"));
        }
        Ok(())
    }
}

/// Loss weights for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v_th_frozen: bool,
}

/// During warmup the threshold is frozen at its initial value and `L_v` is
/// off. Afterwards `λ1` rises linearly and `λ2` decays geometrically, both
/// reaching their end values on the last iteration.
pub fn schedule(iter: u64, cfg: &TrainConfig) -> Schedule {
    if iter < cfg.warmup_iters {
        return Schedule {
            lambda1: 0.0,
            lambda2: cfg.lambda2_start,
            v_th_frozen: true,
        };
    }
    let span = cfg.iterations.saturating_sub(1).saturating_sub(cfg.warmup_iters);
    let frac = if span == 0 {
        0.0
    } else {
        ((iter - cfg.warmup_iters) as f64 / span as f64).min(1.0)
    };
    let lambda1 = cfg.lambda1_start + frac * (cfg.lambda1_end - cfg.lambda1_start);
    let lambda2 = cfg.lambda2_start * exp(frac * ln(cfg.lambda2_end / cfg.lambda2_start));
    Schedule {
        lambda1,
        lambda2,
        v_th_frozen: false,
    }
}

/// Mean over pixels of the residual norm between predicted and target
/// colors (`R×3` each).
pub fn loss_rgb(tape: &mut Tape, pred: Var, target: &Tensor, norm: RgbNorm) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::contract("loss_rgb", "prediction and target sizes differ"));
    }
    let gt = tape.constant(target.clone());
    let diff = tape.sub(pred, gt)?;
    let per = match norm {
        RgbNorm::SquaredL2 => tape.mul(diff, diff)?,
        RgbNorm::L1 => tape.abs(diff)?,
    };
    let per_pixel = tape.row_sum(per)?;
    tape.mean(per_pixel)
}

/// `1 / (v_th + eps_v)`; minimizing it pushes the threshold up.
pub fn loss_v(tape: &mut Tape, v_th: Var, eps_v: f64) -> Result<Var> {
    let guarded = tape.add_const(v_th, eps_v)?;
    let one = tape.constant_scalar(1.0);
    tape.div(one, guarded)
}

/// `Σ w_i max(−d·∇σ_i, 0)` over samples. `weights` is `P×1`, `dirs` is
/// `P×3` and `grad_sigma` holds the three `P×1` gradient components.
pub fn loss_g(tape: &mut Tape, weights: Var, dirs: &Tensor, grad_sigma: [Var; 3]) -> Result<Var> {
    let p = tape.value(weights).rows();
    if dirs.rows() != p || grad_sigma.iter().any(|g| tape.value(*g).rows() != p) {
        return Err(Error::contract("loss_g", "weights, directions and gradients differ in length"));
    }
    let mut along: Option<Var> = None;
    for (axis, g) in grad_sigma.iter().enumerate() {
        let comp: alloc::vec::Vec<f64> = (0..p).map(|r| -dirs.get(r, axis)).collect();
        let d = tape.constant(Tensor::column(&comp));
        let term = tape.mul(*g, d)?;
        along = Some(match along {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let facing = tape.relu(along.expect("three axes"))?;
    let weighted = tape.mul(weights, facing)?;
    tape.sum(weighted)
}

/// `L_rgb + λ1 L_v + λ2 L_g`; absent terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    l_rgb: Var,
    l_v: Option<Var>,
    l_g: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let mut total = l_rgb;
    if let Some(v) = l_v {
        let t = tape.scale(v, lambda1)?;
        total = tape.add(total, t)?;
    }
    if let Some(g) = l_g {
        let t = tape.scale(g, lambda2)?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_loss_cases() {
        let mut t = Tape::new();
        let target = Tensor::from_rows(&[[0.2, 0.4, 0.6]]);
        let same = t.param(target.clone());
        let l = loss_rgb(&mut t, same, &target, RgbNorm::SquaredL2).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let off = t.param(Tensor::from_rows(&[[1.2, 0.4, 0.6]]));
        let l = loss_rgb(&mut t, off, &target, RgbNorm::SquaredL2).unwrap();
        assert!((t.scalar(l) - 1.0).abs() < 1e-15);
        let l1 = loss_rgb(&mut t, off, &target, RgbNorm::L1).unwrap();
        assert!((t.scalar(l1) - 1.0).abs() < 1e-15);

        let wrong = t.param(Tensor::zeros(2, 3));
        assert!(loss_rgb(&mut t, wrong, &target, RgbNorm::SquaredL2).is_err());
    }

    #[test]
    fn threshold_loss_values() {
        let mut t = Tape::new();
        let v = t.param_scalar(2.0);
        let l = loss_v(&mut t, v, 1e-3).unwrap();
        assert!((t.scalar(l) - 1.0 / 2.001).abs() < 1e-15);
        let g = t.backward(l).unwrap().scalar(v);
        assert!((g + 1.0 / (2.001 * 2.001)).abs() < 1e-15);

        let mut t = Tape::new();
        let v = t.param_scalar(0.0);
        let l = loss_v(&mut t, v, 1e-3).unwrap();
        assert!((t.scalar(l) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn geometry_loss_cases() {
        let dirs = Tensor::from_rows(&[[0.0, 0.0, 1.0]]);
        let eval = |gz: f64, w: f64| {
            let mut t = Tape::new();
            let wv = t.param(Tensor::column(&[w]));
            let g = [
                t.param(Tensor::column(&[0.0])),
                t.param(Tensor::column(&[0.0])),
                t.param(Tensor::column(&[gz])),
            ];
            let l = loss_g(&mut t, wv, &dirs, g).unwrap();
            t.scalar(l)
        };
        assert_eq!(eval(-3.0, 0.5), 1.5);
        assert_eq!(eval(3.0, 0.5), 0.0);
        assert_eq!(eval(-3.0, 0.0), 0.0);
    }

    #[test]
    fn total_loss_combination() {
        let mut t = Tape::new();
        let a = t.param_scalar(1.0);
        let b = t.param_scalar(2.0);
        let c = t.param_scalar(3.0);
        let l = total_loss(&mut t, a, Some(b), Some(c), 0.5, 0.1).unwrap();
        assert!((t.scalar(l) - 2.3).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert_eq!((g.scalar(a), g.scalar(b), g.scalar(c)), (1.0, 0.5, 0.1));
        let only = total_loss(&mut t, a, Some(b), Some(c), 0.0, 0.0).unwrap();
        assert_eq!(t.scalar(only), 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::with_iterations(1000);
        let s0 = schedule(0, &cfg);
        assert_eq!((s0.lambda1, s0.v_th_frozen), (0.0, true));
        let sw = schedule(cfg.warmup_iters, &cfg);
        assert_eq!((sw.lambda1, sw.lambda2, sw.v_th_frozen), (0.15, 1e-4, false));
        let se = schedule(cfg.iterations - 1, &cfg);
        assert!((se.lambda1 - cfg.lambda1_end).abs() < 1e-12);
        assert!((se.lambda2 - cfg.lambda2_end).abs() < 1e-18);
        let mid = schedule(500, &cfg);
        assert!(mid.lambda1 > 0.15 && mid.lambda1 < 1.5);
        assert!(mid.lambda2 < 1e-4 && mid.lambda2 > 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_iters: 20_000, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { eps_v: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::with_iterations(0).validate().is_ok());
    }
}
