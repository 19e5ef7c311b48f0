//! Sinusoidal positional encoding.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::math::sincos;
use crate::tensor::Tensor;

/// Output width of [`positional_encode`] for a `dim`-vector.
pub fn encoded_dim(dim: usize, freqs: usize, include_raw: bool) -> usize {
    (if include_raw { dim } else { 0 }) + 2 * freqs * dim
}

/// `[v] ++ [sin(2^j π v), cos(2^j π v) for j in 0..freqs]`, each block over
/// all components of `v`.
pub fn positional_encode(v: &[f64], freqs: usize, include_raw: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(v.len(), freqs, include_raw));
    encode_into(v, freqs, include_raw, &mut out);
    out
}

fn encode_into(v: &[f64], freqs: usize, include_raw: bool, out: &mut Vec<f64>) {
    if include_raw {
        out.extend_from_slice(v);
    }
    let mut scale = PI;
    for _ in 0..freqs {
        let start = out.len();
        out.resize(start + 2 * v.len(), 0.0);
        let (s, c) = out[start..].split_at_mut(v.len());
        for ((&x, s), c) in v.iter().zip(s).zip(c) {
            (*s, *c) = sincos(scale * x);
        }
        scale *= 2.0;
    }
}

/// Encodes every row of a `P×d` tensor.
pub fn encode_rows(rows: &Tensor, freqs: usize, include_raw: bool) -> Tensor {
    let width = encoded_dim(rows.cols(), freqs, include_raw);
    let mut data = Vec::with_capacity(rows.rows() * width);
    for r in 0..rows.rows() {
        encode_into(rows.row(r), freqs, include_raw, &mut data);
    }
    Tensor::from_vec(rows.rows(), width, data).expect("encoded width")
}
