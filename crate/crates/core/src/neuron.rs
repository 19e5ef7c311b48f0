//! Spiking activations for the density output.
//!
//! All neurons fire when the membrane potential reaches the threshold
//! (`u_pre >= v_th`; ties fire). The full-precision variants emit the
//! membrane potential itself instead of the threshold, and the bounded
//! variant squashes the potential through `k·r·tanh(drive / r)` so the
//! largest possible output sits just below `k·r`.
//!
//! Firing has a zero-almost-everywhere derivative, so training uses a
//! surrogate: the output passes the gradient of `u_pre` through on fired
//! samples, and the threshold receives a piecewise-linear window gradient
//! centred on `v_th`.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{CustomOpId, Tape};
use crate::math::tanh;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    /// Integrate-and-fire: emits `v_th` on a spike.
    If,
    /// Full-precision integrate-and-fire: emits `u_pre` on a spike.
    Fif,
    /// Bounded full-precision: `u_pre = k·r·tanh(drive/r)`.
    Bfif,
    /// Full-precision with a hard clip at `hard_bound_b`.
    HardBoundFif,
    /// Non-spiking ReLU, the conventional density activation.
    Relu,
}

/// Width of the threshold surrogate window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowScale {
    /// Window half-width `k`.
    K,
    /// Window half-width `k·r`.
    KR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateVariant {
    /// Triangular window around the threshold, scaled by `u_pre`.
    PiecewiseLinear,
    /// Spike-count style `1 − o`; unstable with a single time step, kept for
    /// comparison.
    AccumCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub v_th: f64,
    pub k: f64,
    pub r: f64,
    pub lambda_sg: f64,
    pub kind: NeuronKind,
    pub hard_bound_b: f64,
    #[serde(default = "default_window")]
    pub window: WindowScale,
    #[serde(default = "default_surrogate")]
    pub surrogate: SurrogateVariant,
}

fn default_window() -> WindowScale {
    WindowScale::K
}

fn default_surrogate() -> SurrogateVariant {
    SurrogateVariant::PiecewiseLinear
}

impl Default for NeuronParams {
    /// Bounded neuron at its initial state: `k = 1`, `r = 100`, `v_th = 0`.
    fn default() -> Self {
        NeuronParams {
            v_th: 0.0,
            k: 1.0,
            r: 100.0,
            lambda_sg: 1.0,
            kind: NeuronKind::Bfif,
            hard_bound_b: 100.0,
            window: WindowScale::K,
            surrogate: SurrogateVariant::PiecewiseLinear,
        }
    }
}

impl NeuronParams {
    pub fn with_kind(kind: NeuronKind) -> Self {
        NeuronParams {
            kind,
            ..Self::default()
        }
    }

    /// Supremum of the bounded neuron's output, `k·r`.
    pub fn bfif_ceiling(&self) -> f64 {
        self.k * self.r
    }

    /// A bounded neuron can only fire if its threshold is below `k·r`.
    pub fn can_fire(&self) -> bool {
        match self.kind {
            NeuronKind::Bfif => self.v_th < self.bfif_ceiling(),
            _ => true,
        }
    }

    fn window_width(&self) -> f64 {
        match self.window {
            WindowScale::K => self.k,
            WindowScale::KR => self.k * self.r,
        }
    }
}

/// Membrane state of a multi-step IF neuron.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeuronState {
    pub membrane_u: f64,
    pub step: u64,
}

/// Result of evaluating a full-precision neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub y: f64,
    pub u_pre: f64,
    pub fired: bool,
}

/// Gradients produced by the surrogate rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateGrad {
    pub grad_u_pre: f64,
    pub grad_v_th: f64,
}

fn expect_kind(op: &'static str, params: &NeuronParams, kind: NeuronKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::contract(
            op,
            alloc::format!("neuron kind is {:?}", params.kind),
        ));
    }
    Ok(())
}

fn finite(op: &'static str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::non_finite(op))
    }
}

/// One time step of an integrate-and-fire neuron.
pub fn if_step(state: NeuronState, drive: f64, params: &NeuronParams) -> Result<(f64, NeuronState)> {
    expect_kind("if_step", params, NeuronKind::If)?;
    let u_pre = state.membrane_u + finite("if_step", drive)?;
    let step = state.step + 1;
    if u_pre >= params.v_th {
        Ok((params.v_th, NeuronState { membrane_u: 0.0, step }))
    } else {
        Ok((0.0, NeuronState { membrane_u: u_pre, step }))
    }
}

/// Single-step full-precision IF: the drive passes through once it reaches
/// the threshold.
pub fn fif_forward(drive: f64, params: &NeuronParams) -> Result<f64> {
    expect_kind("fif_forward", params, NeuronKind::Fif)?;
    let u_pre = finite("fif_forward", drive)?;
    Ok(if u_pre >= params.v_th { u_pre } else { 0.0 })
}

/// `k·r·tanh(drive/r)`, kept strictly below `k·r` so the open upper bound
/// survives rounding.
#[inline]
pub fn bfif_potential(drive: f64, k: f64, r: f64) -> f64 {
    let ceiling = k * r;
    (ceiling * tanh(drive / r)).min(ceiling.next_down())
}

pub fn bfif_forward(drive: f64, params: &NeuronParams) -> Result<Activation> {
    expect_kind("bfif_forward", params, NeuronKind::Bfif)?;
    if params.k <= 0.0 || params.r <= 0.0 {
        return Err(Error::contract("bfif_forward", "k and r must be positive"));
    }
    let u_pre = bfif_potential(finite("bfif_forward", drive)?, params.k, params.r);
    let fired = u_pre >= params.v_th;
    Ok(Activation {
        y: if fired { u_pre } else { 0.0 },
        u_pre,
        fired,
    })
}

/// Full-precision output clipped at `hard_bound_b`.
pub fn hardbound_fif_forward(drive: f64, params: &NeuronParams) -> Result<f64> {
    expect_kind("hardbound_fif_forward", params, NeuronKind::HardBoundFif)?;
    if params.hard_bound_b <= 0.0 {
        return Err(Error::contract("hardbound_fif_forward", "bound must be positive"));
    }
    let u_pre = finite("hardbound_fif_forward", drive)?;
    let fired = u_pre >= params.v_th;
    Ok(if fired { u_pre.min(params.hard_bound_b) } else { 0.0 })
}

/// Evaluates any single-step activation kind. IF is evaluated from a zero
/// membrane.
pub fn activate(drive: f64, params: &NeuronParams) -> Result<Activation> {
    match params.kind {
        NeuronKind::Bfif => bfif_forward(drive, params),
        NeuronKind::Fif => {
            let y = fif_forward(drive, params)?;
            Ok(Activation {
                y,
                u_pre: drive,
                fired: drive >= params.v_th,
            })
        }
        NeuronKind::HardBoundFif => {
            let y = hardbound_fif_forward(drive, params)?;
            Ok(Activation {
                y,
                u_pre: drive,
                fired: drive >= params.v_th,
            })
        }
        NeuronKind::If => {
            let (y, _) = if_step(NeuronState::default(), drive, params)?;
            Ok(Activation {
                y,
                u_pre: drive,
                fired: drive >= params.v_th,
            })
        }
        NeuronKind::Relu => {
            let d = finite("relu", drive)?;
            Ok(Activation {
                y: d.max(0.0),
                u_pre: d,
                fired: d > 0.0,
            })
        }
    }
}

/// Surrogate gradients of a full-precision spike `y = o·u_pre`.
pub fn surrogate_backward(
    u_pre: f64,
    fired: bool,
    upstream: f64,
    params: &NeuronParams,
    variant: SurrogateVariant,
) -> Result<SurrogateGrad> {
    let width = params.window_width();
    if width <= 0.0 {
        return Err(Error::contract("surrogate_backward", "window width must be positive"));
    }
    let o = if fired { 1.0 } else { 0.0 };
    let grad_v_th = match variant {
        SurrogateVariant::PiecewiseLinear => {
            let window = ((width - (u_pre - params.v_th).abs()) / (width * width)).max(0.0);
            upstream * params.lambda_sg * window * u_pre
        }
        SurrogateVariant::AccumCount => upstream * (1.0 - o),
    };
    Ok(SurrogateGrad {
        grad_u_pre: upstream * o,
        grad_v_th,
    })
}

/// Registers the density activation as a tape op with inputs
/// `(drive: P×1, k: 1×1, r: 1×1, v_th: 1×1)`.
///
/// `k`, `r` and `v_th` are read from the tape, so they can be parameters;
/// the remaining fields (kind, surrogate settings, hard bound) come from
/// `params`.
pub fn register_activation(tape: &mut Tape, params: &NeuronParams) -> Result<CustomOpId> {
    let p = *params;
    if p.kind == NeuronKind::If {
        return Err(Error::contract(
            "register_activation",
            "IF is multi-step and has no single-step differentiable form",
        ));
    }
    let forward = move |xs: &[&Tensor]| -> Result<Tensor> {
        let cur = NeuronParams {
            k: xs[1].item(),
            r: xs[2].item(),
            v_th: xs[3].item(),
            ..p
        };
        let mut out = Tensor::zeros(xs[0].rows(), xs[0].cols());
        for (o, &z) in out.data_mut().iter_mut().zip(xs[0].data()) {
            *o = activate(z, &cur)?.y;
        }
        Ok(out)
    };
    let backward = move |xs: &[&Tensor], _out: &Tensor, g: &Tensor| -> Vec<Tensor> {
        let (k, r, v_th) = (xs[1].item(), xs[2].item(), xs[3].item());
        let cur = NeuronParams { k, r, v_th, ..p };
        let mut gz = Tensor::zeros(xs[0].rows(), xs[0].cols());
        let (mut gk, mut gr, mut gv) = (0.0, 0.0, 0.0);
        for ((gzi, &z), &up) in gz.data_mut().iter_mut().zip(xs[0].data()).zip(g.data()) {
            match p.kind {
                NeuronKind::Relu => {
                    *gzi = if z > 0.0 { up } else { 0.0 };
                }
                NeuronKind::Bfif => {
                    let th = tanh(z / r);
                    let u_pre = bfif_potential(z, k, r);
                    let fired = u_pre >= v_th;
                    // Unwrap is safe: the window width k (or k·r) is positive
                    // whenever the forward pass succeeded.
                    let s = surrogate_backward(u_pre, fired, up, &cur, p.surrogate)
                        .unwrap_or(SurrogateGrad { grad_u_pre: 0.0, grad_v_th: 0.0 });
                    let sech2 = 1.0 - th * th;
                    *gzi = s.grad_u_pre * k * sech2;
                    gk += s.grad_u_pre * r * th;
                    gr += s.grad_u_pre * k * (th - (z / r) * sech2);
                    gv += s.grad_v_th;
                }
                NeuronKind::Fif | NeuronKind::HardBoundFif => {
                    let fired = z >= v_th;
                    let s = surrogate_backward(z, fired, up, &cur, p.surrogate)
                        .unwrap_or(SurrogateGrad { grad_u_pre: 0.0, grad_v_th: 0.0 });
                    let clipped = p.kind == NeuronKind::HardBoundFif && z > p.hard_bound_b;
                    *gzi = if clipped { 0.0 } else { s.grad_u_pre };
                    gv += s.grad_v_th;
                }
                NeuronKind::If => unreachable!("rejected at registration"),
            }
        }
        vec![gz, Tensor::scalar(gk), Tensor::scalar(gr), Tensor::scalar(gv)]
    };
    let name = match p.kind {
        NeuronKind::Bfif => "bfif",
        NeuronKind::Fif => "fif",
        NeuronKind::HardBoundFif => "hardbound_fif",
        NeuronKind::Relu => "relu_density",
        NeuronKind::If => unreachable!(),
    };
    Ok(tape.register_custom_op(name, 4, Rc::new(forward), Rc::new(backward)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kind: NeuronKind, v_th: f64) -> NeuronParams {
        NeuronParams {
            v_th,
            ..NeuronParams::with_kind(kind)
        }
    }

    #[test]
    fn if_accumulates_then_fires_and_resets() {
        let p = params(NeuronKind::If, 1.0);
        let (y, s) = if_step(NeuronState::default(), 0.3, &p).unwrap();
        assert_eq!(y, 0.0);
        assert_eq!(s.membrane_u, 0.3);
        let (y, s) = if_step(s, 0.8, &p).unwrap();
        assert_eq!(y, 1.0);
        assert_eq!(s.membrane_u, 0.0);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn if_zero_threshold_always_fires() {
        let p = params(NeuronKind::If, 0.0);
        let mut s = NeuronState::default();
        for drive in [0.0, 0.1, 3.0] {
            let (y, next) = if_step(s, drive, &p).unwrap();
            assert_eq!(y, 0.0); // fires with output v_th = 0
            assert_eq!(next.membrane_u, 0.0);
            s = next;
        }
        assert!(if_step(s, f64::NAN, &p).is_err());
    }

    #[test]
    fn fif_cases() {
        let p = params(NeuronKind::Fif, 1.0);
        assert_eq!(fif_forward(2.7, &p).unwrap(), 2.7);
        assert_eq!(fif_forward(0.5, &p).unwrap(), 0.0);
        assert_eq!(fif_forward(1.0, &p).unwrap(), 1.0);
        assert!(fif_forward(f64::INFINITY, &p).is_err());
        assert!(fif_forward(1.0, &params(NeuronKind::Bfif, 1.0)).is_err());
    }

    #[test]
    fn bfif_examples() {
        let p = params(NeuronKind::Bfif, 0.5);
        let a = bfif_forward(0.3, &p).unwrap();
        // 100·tanh(0.003) = 0.29999910000323998...
        assert!((a.u_pre - 0.299_999_100_003_240).abs() < 1e-14);
        assert_eq!(a.y, 0.0);
        assert!(!a.fired);
        let b = bfif_forward(1.0, &p).unwrap();
        // 100·tanh(0.01) = 0.99996666799994603...
        assert!((b.u_pre - 0.999_966_667_999_946_0).abs() < 1e-14);
        assert_eq!(b.y, b.u_pre);
        let big = bfif_forward(1e9, &p).unwrap();
        assert!(big.y < 100.0 && big.y > 99.99);
        let zero = bfif_forward(0.0, &p).unwrap();
        assert_eq!(zero.y, 0.0);
        let fires_at_zero = bfif_forward(0.0, &params(NeuronKind::Bfif, 0.0)).unwrap();
        assert!(fires_at_zero.fired);
        assert_eq!(fires_at_zero.y, 0.0);
    }

    #[test]
    fn hardbound_cases() {
        let mut p = params(NeuronKind::HardBoundFif, 1.0);
        p.hard_bound_b = 3.0;
        assert_eq!(hardbound_fif_forward(5.0, &p).unwrap(), 3.0);
        assert_eq!(hardbound_fif_forward(2.0, &p).unwrap(), 2.0);
        p.v_th = 4.0;
        for drive in [-1.0, 0.0, 3.9, 4.0, 7.0, 100.0] {
            let y = hardbound_fif_forward(drive, &p).unwrap();
            assert!(y == 0.0 || y == 3.0, "{drive} -> {y}");
        }
    }

    #[test]
    fn surrogate_examples() {
        let p = NeuronParams {
            v_th: 0.5,
            k: 1.0,
            lambda_sg: 1.0,
            ..NeuronParams::default()
        };
        let g = surrogate_backward(0.8, true, 1.0, &p, SurrogateVariant::PiecewiseLinear).unwrap();
        assert!((g.grad_v_th - 0.56).abs() < 1e-15);
        assert_eq!(g.grad_u_pre, 1.0);

        let k2 = NeuronParams { k: 2.0, ..p };
        let at = surrogate_backward(0.5, true, 1.0, &k2, SurrogateVariant::PiecewiseLinear).unwrap();
        assert_eq!(at.grad_v_th, 0.5 / 2.0);

        let far = surrogate_backward(1.6, true, 1.0, &p, SurrogateVariant::PiecewiseLinear).unwrap();
        assert_eq!(far.grad_v_th, 0.0);

        let off = surrogate_backward(0.4, false, 1.0, &p, SurrogateVariant::PiecewiseLinear).unwrap();
        assert_eq!(off.grad_u_pre, 0.0);

        let acc = surrogate_backward(0.4, false, 2.0, &p, SurrogateVariant::AccumCount).unwrap();
        assert_eq!(acc.grad_v_th, 2.0);
        let acc = surrogate_backward(0.6, true, 2.0, &p, SurrogateVariant::AccumCount).unwrap();
        assert_eq!(acc.grad_v_th, 0.0);

        let bad = NeuronParams { k: 0.0, ..p };
        assert!(surrogate_backward(0.6, true, 1.0, &bad, SurrogateVariant::PiecewiseLinear).is_err());
    }

    #[test]
    fn window_scale_switch() {
        let p = NeuronParams {
            v_th: 0.5,
            k: 1.0,
            r: 4.0,
            window: WindowScale::KR,
            ..NeuronParams::default()
        };
        let g = surrogate_backward(2.0, true, 1.0, &p, SurrogateVariant::PiecewiseLinear).unwrap();
        // width 4: (4 - 1.5) / 16 * 2
        assert!((g.grad_v_th - 2.5 / 16.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerates_to_fif_for_large_r() {
        let b = NeuronParams { r: 1e6, ..NeuronParams::default() };
        let f = NeuronParams { kind: NeuronKind::Fif, ..b };
        let mut worst: f64 = 0.0;
        for i in 0..=20_000 {
            let drive = -10.0 + i as f64 * 1e-3;
            let yb = bfif_forward(drive, &b).unwrap().y;
            let yf = fif_forward(drive, &f).unwrap();
            worst = worst.max((yb - yf).abs());
        }
        assert!(worst < 1e-3, "{worst}");

        // With a positive threshold the two can disagree on whether a drive
        // sitting within rounding of V_th fires; away from it they agree.
        let b = NeuronParams { v_th: 1.0, ..b };
        let f = NeuronParams { v_th: 1.0, ..f };
        for i in 0..=20_000 {
            let drive = -10.0 + i as f64 * 1e-3;
            if (drive - 1.0).abs() < 1e-6 {
                continue;
            }
            let yb = bfif_forward(drive, &b).unwrap().y;
            let yf = fif_forward(drive, &f).unwrap();
            assert!((yb - yf).abs() < 1e-3, "{drive}");
        }
    }

    #[test]
    fn tape_op_matches_hand_written_partials() {
        let p = NeuronParams { v_th: 0.4, k: 1.3, r: 2.0, lambda_sg: 0.7, ..NeuronParams::default() };
        let drives = [-0.5, 0.2, 0.45, 0.9, 3.0];
        let mut tape = Tape::new();
        let op = register_activation(&mut tape, &p).unwrap();
        let z = tape.param(Tensor::column(&drives));
        let k = tape.param_scalar(p.k);
        let r = tape.param_scalar(p.r);
        let v = tape.param_scalar(p.v_th);
        let y = tape.custom(op, &[z, k, r, v]).unwrap();
        let w = tape.constant(Tensor::column(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let s = tape.dot(y, w).unwrap();
        let g = tape.backward(s).unwrap();

        let (mut gk, mut gr, mut gv) = (0.0, 0.0, 0.0);
        for (i, &d) in drives.iter().enumerate() {
            let up = (i + 1) as f64;
            let th = libm::tanh(d / p.r);
            let u = p.k * p.r * th;
            let o = if u >= p.v_th { 1.0 } else { 0.0 };
            let dz = up * o * p.k * (1.0 - th * th);
            assert!((g.get(z).unwrap().data()[i] - dz).abs() < 1e-14);
            gk += up * o * p.r * th;
            gr += up * o * p.k * (th - d / p.r * (1.0 - th * th));
            gv += up * p.lambda_sg * ((p.k - (u - p.v_th).abs()) / (p.k * p.k)).max(0.0) * u;
        }
        assert!((g.scalar(k) - gk).abs() < 1e-12);
        assert!((g.scalar(r) - gr).abs() < 1e-12);
        assert!((g.scalar(v) - gv).abs() < 1e-12);
    }

    #[test]
    fn if_cannot_be_registered() {
        let mut tape = Tape::new();
        assert!(register_activation(&mut tape, &NeuronParams::with_kind(NeuronKind::If)).is_err());
    }
}
