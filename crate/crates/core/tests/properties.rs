use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snerf_core::diff::{GradCheckOptions, Tape};
use snerf_core::field::{init_params, FieldConfig};
use snerf_core::loss::TrainConfig;
use snerf_core::metrics::chamfer;
use snerf_core::neuron::{bfif_forward, NeuronParams};
use snerf_core::render::{bound_scalar, composite_weights, Ray};
use snerf_core::tensor::Tensor;
use snerf_core::trainer::{partition_grad, RaySet, Trainer};
use snerf_core::verify::{check_random_graphs, check_total_loss, RandomGraph};

#[test]
fn thousand_random_graphs_match_central_differences() {
    let s = check_random_graphs(1000, 5, 2024, GradCheckOptions::default()).unwrap();
    assert_eq!(s.failures, 0, "{s:?}");
    assert!(s.worst_rel_err < 1e-6 || s.worst_abs_err < 1e-10, "{s:?}");
}

fn grads_of(g: &RandomGraph, x: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let v = t.param(Tensor::column(x));
    let out = g.build(&mut t, v).unwrap();
    t.backward(out).unwrap().get(v).unwrap().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = RandomGraph::generate(&mut rng, 5);
        let n = f.inputs;
        let mut g = RandomGraph::generate(&mut rng, 5);
        while g.inputs != n {
            g = RandomGraph::generate(&mut rng, 5);
        }
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let v = t.param(Tensor::column(&x));
        let fv = f.build(&mut t, v).unwrap();
        let gv = g.build(&mut t, v).unwrap();
        let af = t.scale(fv, a).unwrap();
        let bg = t.scale(gv, b).unwrap();
        let sum = t.add(af, bg).unwrap();
        let combined = t.backward(sum).unwrap().get(v).unwrap().data().to_vec();
        let (gf, gg) = (grads_of(&f, &x), grads_of(&g, &x));
        for i in 0..n {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn backward_is_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = RandomGraph::generate(&mut rng, 8);
        let x: Vec<f64> = (0..g.inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let v = t.param(Tensor::column(&x));
        let out = g.build(&mut t, v).unwrap();
        let first = t.backward(out).unwrap().get(v).unwrap().clone();
        let second = t.backward(out).unwrap().get(v).unwrap().clone();
        prop_assert_eq!(
            first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn chamfer_symmetric_and_translation_invariant(
        a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..30),
        b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..30),
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        prop_assert_eq!(ab.value, ba.value);
        let mv = |p: &Vec<[f64; 3]>| -> Vec<[f64; 3]> {
            p.iter().map(|x| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]]).collect()
        };
        let moved = chamfer(&mv(&a), &mv(&b)).unwrap();
        prop_assert!((moved.value - ab.value).abs() < 1e-12);
        prop_assert!(ab.value >= 0.0);
    }

    #[test]
    fn bound_shrinks_as_threshold_grows(
        v_th in 0.0f64..100.0, extra in 0.0f64..50.0, v_max in 0.0f64..500.0,
        dt in 1e-3f64..0.1, t_range in 0.2f64..4.0,
    ) {
        let (lo1, up1) = bound_scalar(v_th, v_max, dt, t_range);
        let (lo2, up2) = bound_scalar(v_th + extra, v_max, dt, t_range);
        prop_assert!(up2 <= up1);
        prop_assert!(lo2.abs().max(up2.abs()) <= lo1.abs().max(up1.abs()));
    }

    #[test]
    fn bfif_output_set(drive in -1e3f64..1e3, v_th in 0.0f64..5.0, k in 0.1f64..3.0, r in 0.5f64..200.0) {
        let p = NeuronParams { v_th, k, r, ..NeuronParams::default() };
        let a = bfif_forward(drive, &p).unwrap();
        prop_assert!(a.y == 0.0 || (a.y >= v_th && a.y < k * r));
    }
}

#[test]
fn weight_identity_on_random_rays() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=256usize);
        let sigma: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..100.0) })
            .collect();
        let dt: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.05)).collect();
        let (w, _) = composite_weights(&sigma, &dt).unwrap();
        let sum: f64 = w.iter().sum();
        let prod: f64 = sigma.iter().zip(&dt).map(|(s, d)| (-s * d).exp()).product();
        worst = worst.max((sum - (1.0 - prod)).abs());
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn full_loss_gradient_on_eight_rays() {
    let fc = FieldConfig {
        pos_freqs: 2,
        dir_freqs: 1,
        hidden_width: 8,
        depth_layers: 2,
        radiance_width: 4,
        seed: 5,
        ..FieldConfig::default()
    };
    let mut params = init_params(&fc).unwrap();
    params.neuron.v_th = 0.05;
    // Bias the density head so that most samples fire and every loss term
    // contributes.
    for b in params.density.bias.data_mut() {
        *b = 0.15;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rays: Vec<Ray> = (0..8)
        .map(|_| {
            let o = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.0];
            Ray::new(o, [0.0, 0.0, 1.0], 0.0, 2.0).unwrap()
        })
        .collect();
    let colors = (0..8).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let set = RaySet::new(rays, colors, [1.0; 3]).unwrap();
    let cfg = TrainConfig {
        rays_per_batch: 8,
        samples_per_ray: 12,
        iterations: 10,
        warmup_iters: 0,
        lambda2_start: 0.1,
        lambda2_end: 0.1,
        fd_eps: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(params.clone(), cfg).unwrap();
    let plan = tr.plan(&set).unwrap();
    assert!(!plan.schedule.v_th_frozen);
    let g = partition_grad(&params, &cfg, &set, &plan, 0..8).unwrap();
    assert!(g.l_g > 0.0);
    assert!(g.grads.iter().filter(|v| **v != 0.0).count() * 2 > g.grads.len());
    let opts = GradCheckOptions { tol: 1e-4, abs_floor: 0.0, ..GradCheckOptions::default() };
    let r = check_total_loss(&params, &cfg, &set, &plan, opts).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > r.excluded.len() * 4, "{r:?}");
}
