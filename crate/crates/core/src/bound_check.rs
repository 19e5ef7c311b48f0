//! Randomized verification of the depth-error envelope on synthetic rays.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::render::{bound_report, BoundReport, RaySampleBatch};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTrial {
    pub id: usize,
    pub samples: usize,
    pub report: BoundReport,
    pub violation: bool,
}

/// Random ray with a first fired sample at density `V_th` followed by
/// densities no larger than a cap `V_max ≥ V_th`, which at least one
/// successor attains. About one trial in ten has every successor empty.
pub fn random_batch(rng: &mut impl Rng) -> (RaySampleBatch, f64) {
    let n = rng.gen_range(16..=256usize);
    let dt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.002..0.05)).collect();
    let mut t = Vec::with_capacity(n);
    let mut acc = 0.0;
    for d in &dt {
        acc += d;
        t.push(acc);
    }
    let far = acc + rng.gen_range(0.001..0.05);
    let m = rng.gen_range(0..=n - 2);
    let v_th = rng.gen_range(0.5..50.0);
    let mut sigma = vec![0.0; n];
    sigma[m] = v_th;
    if rng.gen::<f64>() >= 0.1 {
        let cap = rng.gen_range(v_th..=200.0f64.max(v_th));
        for s in sigma.iter_mut().skip(m + 1) {
            *s = rng.gen_range(0.0..=cap);
        }
        let peak = rng.gen_range(m + 1..n);
        sigma[peak] = cap;
    }
    let batch = RaySampleBatch::new(0.0, far, t, dt, sigma, vec![[0.0; 3]; n]).expect("valid synthetic ray");
    (batch, v_th)
}

/// `n` trials from a seeded generator.
pub fn random_trials(n: usize, seed: u64) -> Result<Vec<BoundTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let (batch, v_th) = random_batch(&mut rng);
            let report = bound_report(&batch, v_th)?;
            Ok(BoundTrial {
                id,
                samples: batch.len(),
                violation: !report.holds(),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trials_hold_and_repeat() {
        let a = random_trials(500, 3).unwrap();
        assert!(a.iter().all(|t| !t.violation));
        assert!(a.iter().any(|t| t.report.v_max == 0.0));
        assert_eq!(a, random_trials(500, 3).unwrap());
    }
}
