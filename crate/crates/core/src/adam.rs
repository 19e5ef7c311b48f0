//! Adam over a flat parameter vector.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::field::{FieldConfig, FieldParams};
use crate::math::sqrt;
use crate::{Error, Result};

/// Smallest value `k` and `r` may take after a step.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected update. Coordinates listed in `frozen` keep their
    /// value and moments. A non-finite gradient aborts before anything is
    /// modified; `name` maps its index to a readable parameter name.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        frozen: &[usize],
        name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("adam_step", "lr must be positive"));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", name(i)),
            });
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.contains(&i) {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= self.lr * m_hat / (sqrt(v_hat) + self.eps);
        }
        Ok(())
    }

    /// Updates field parameters in place. `v_th` is skipped while frozen and
    /// clamped at 0 afterwards; `k` and `r` stay at or above
    /// [`SCALE_FLOOR`].
    pub fn step_field(&mut self, params: &mut FieldParams, grads: &[f64], v_th_frozen: bool) -> Result<()> {
        let mut flat = params.flatten();
        let vi = params.v_th_index();
        let frozen: &[usize] = if v_th_frozen { &[vi] } else { &[] };
        let config = params.config;
        self.step(&mut flat, grads, frozen, |i| param_name(&config, i))?;
        flat[vi] = flat[vi].max(0.0);
        flat[vi - 2] = flat[vi - 2].max(SCALE_FLOOR);
        flat[vi - 1] = flat[vi - 1].max(SCALE_FLOOR);
        params.load_flat(&flat);
        Ok(())
    }
}

/// Human-readable name of a flat parameter index, e.g. `trunk.1.weight[5]`.
pub fn param_name(config: &FieldConfig, index: usize) -> String {
    let shapes = config.layer_shapes();
    let n_trunk = config.depth_layers;
    let mut offset = 0;
    for (layer, (fan_in, fan_out)) in shapes.iter().enumerate() {
        let label = if layer < n_trunk {
            format!("trunk.{layer}")
        } else {
            String::from(["density", "radiance_hidden", "radiance_out"][layer - n_trunk])
        };
        for (part, n) in [("weight", fan_in * fan_out), ("bias", *fan_out)] {
            if index < offset + n {
                return format!("{label}.{part}[{}]", index - offset);
            }
            offset += n;
        }
    }
    match index - offset {
        0 => String::from("k"),
        1 => String::from("r"),
        2 => String::from("v_th"),
        _ => format!("<out of range {index}>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::init_params;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(3, 1e-2);
        let mut p = [1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], &[], |_| String::new()).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3, -7.0, 1e3] {
            let mut opt = Adam::new(1, 1e-3);
            let mut p = [0.0];
            opt.step(&mut p, &[g], &[], |_| String::new()).unwrap();
            assert!((p[0].abs() - 1e-3).abs() < 1e-8, "{g}: {}", p[0]);
            assert!(p[0].signum() == -g.signum());
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = FieldConfig { hidden_width: 8, depth_layers: 1, radiance_width: 4, ..FieldConfig::default() };
        let mut params = init_params(&cfg).unwrap();
        let before = params.clone();
        let mut grads = vec![0.0; cfg.param_count()];
        grads[3] = f64::NAN;
        let mut opt = Adam::new(grads.len(), 1e-3);
        match opt.step_field(&mut params, &grads, false) {
            Err(Error::NonFinite { op }) => assert!(op.contains("trunk.0.weight[3]"), "{op}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn frozen_threshold_and_clamp() {
        let cfg = FieldConfig { hidden_width: 8, depth_layers: 1, radiance_width: 4, ..FieldConfig::default() };
        let mut params = init_params(&cfg).unwrap();
        let n = cfg.param_count();
        let mut grads = vec![0.0; n];
        grads[n - 1] = -5.0;
        let mut opt = Adam::new(n, 0.1);
        opt.step_field(&mut params, &grads, true).unwrap();
        assert_eq!(params.neuron.v_th, 0.0);

        grads[n - 1] = 5.0;
        opt.step_field(&mut params, &grads, false).unwrap();
        assert_eq!(params.neuron.v_th, 0.0);
        grads[n - 1] = -5.0;
        for _ in 0..5 {
            opt.step_field(&mut params, &grads, false).unwrap();
        }
        assert!(params.neuron.v_th > 0.0);
    }

    #[test]
    fn names_cover_layout() {
        let cfg = FieldConfig { hidden_width: 8, depth_layers: 2, radiance_width: 4, ..FieldConfig::default() };
        let n = cfg.param_count();
        assert_eq!(param_name(&cfg, 0), "trunk.0.weight[0]");
        assert_eq!(param_name(&cfg, n - 3), "k");
        assert_eq!(param_name(&cfg, n - 1), "v_th");
        assert!(param_name(&cfg, n - 4).starts_with("radiance_out.bias"));
    }
}
