//! Gradient oracles: random elementary-op graphs and the full training loss
//! compared against central differences.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{grad_check, GradCheckOptions, GradReport, Tape, Var};
use crate::encoding::encode_rows;
use crate::field::FieldParams;
use crate::loss::TrainConfig;
use crate::neuron::{self, NeuronKind};
use crate::tensor::Tensor;
use crate::trainer::{partition_grad, RaySet, StepPlan};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    ExpTanh,
    Scale(f64),
    AddConst(f64),
    CumSum,
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    /// `a / (1.5 + tanh b)`, keeping the denominator in `[0.5, 2.5]`.
    SafeDiv,
    Dot,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    /// Constant `n×n` matrix times a column.
    MatVec(Tensor, usize),
}

/// A randomly drawn composition of smooth built-in ops over an `n×1` input.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomGraph {
    pub inputs: usize,
    nodes: Vec<Node>,
    readout: Vec<f64>,
}

impl RandomGraph {
    /// At least `depth` ops; every node feeds a later one or the readout.
    pub fn generate(rng: &mut impl Rng, depth: usize) -> Self {
        let n = rng.gen_range(2..=6usize);
        // shapes[i]: true for n×1, false for 1×1; node 0 is the input.
        let mut shapes = vec![true];
        let mut nodes = Vec::new();
        for _ in 0..depth.max(1) {
            let last = shapes.len() - 1;
            let other = rng.gen_range(0..shapes.len());
            let node = match rng.gen_range(0..14) {
                0 => Node::Unary(Unary::Neg, last),
                1 => Node::Unary(Unary::Tanh, last),
                2 => Node::Unary(Unary::Sigmoid, last),
                3 => Node::Unary(Unary::ExpTanh, last),
                4 => Node::Unary(Unary::Scale(rng.gen_range(-2.0..2.0)), last),
                5 => Node::Unary(Unary::AddConst(rng.gen_range(-1.0..1.0)), last),
                6 if shapes[last] => Node::Unary(Unary::CumSum, last),
                7 if shapes[last] => Node::Unary(if rng.gen() { Unary::Sum } else { Unary::Mean }, last),
                8 => Node::Binary(Binary::Add, last, other),
                9 => Node::Binary(Binary::Sub, other, last),
                10 => Node::Binary(Binary::Mul, last, other),
                11 => Node::Binary(Binary::SafeDiv, last, other),
                12 if shapes[last] && shapes[other] => Node::Binary(Binary::Dot, last, other),
                _ if shapes[last] => {
                    let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Node::MatVec(Tensor::from_vec(n, n, data).expect("square"), last)
                }
                _ => Node::Binary(Binary::Mul, last, 0),
            };
            let column = match &node {
                Node::Unary(Unary::Sum | Unary::Mean, _) | Node::Binary(Binary::Dot, ..) => false,
                Node::Unary(_, a) | Node::MatVec(_, a) => shapes[*a],
                Node::Binary(_, a, b) => shapes[*a] || shapes[*b],
            };
            shapes.push(column);
            nodes.push(node);
        }
        let readout = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        RandomGraph {
            inputs: n,
            nodes,
            readout,
        }
    }

    /// Builds the graph on `tape` and returns a scalar readout.
    pub fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut vars = vec![x];
        for node in &self.nodes {
            let v = match node {
                Node::Unary(op, a) => {
                    let a = vars[*a];
                    match op {
                        Unary::Neg => tape.neg(a)?,
                        Unary::Tanh => tape.tanh(a)?,
                        Unary::Sigmoid => tape.sigmoid(a)?,
                        Unary::ExpTanh => {
                            let t = tape.tanh(a)?;
                            tape.exp(t)?
                        }
                        Unary::Scale(c) => tape.scale(a, *c)?,
                        Unary::AddConst(c) => tape.add_const(a, *c)?,
                        Unary::CumSum => tape.exclusive_cumsum(a, self.inputs)?,
                        Unary::Sum => tape.sum(a)?,
                        Unary::Mean => tape.mean(a)?,
                    }
                }
                Node::Binary(op, a, b) => {
                    let (a, b) = (vars[*a], vars[*b]);
                    match op {
                        Binary::Add => tape.add(a, b)?,
                        Binary::Sub => tape.sub(a, b)?,
                        Binary::Mul => tape.mul(a, b)?,
                        Binary::SafeDiv => {
                            let t = tape.tanh(b)?;
                            let d = tape.add_const(t, 1.5)?;
                            tape.div(a, d)?
                        }
                        Binary::Dot => tape.dot(a, b)?,
                    }
                }
                Node::MatVec(m, a) => {
                    let m = tape.constant(m.clone());
                    tape.matmul(m, vars[*a])?
                }
            };
            vars.push(v);
        }
        let out = *vars.last().expect("at least the input");
        let w = tape.constant(Tensor::column(&self.readout));
        if tape.value(out).is_scalar() {
            let wx = tape.dot(w, x)?;
            tape.add(out, wx)
        } else {
            tape.dot(w, out)
        }
    }
}

/// Aggregate of many random-graph gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphCheckSummary {
    pub graphs: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
    pub worst_abs_err: f64,
}

/// Checks `count` random graphs of `depth` ops each.
pub fn check_random_graphs(count: usize, depth: usize, seed: u64, opts: GradCheckOptions) -> Result<GraphCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GraphCheckSummary {
        graphs: count,
        failures: 0,
        worst_rel_err: 0.0,
        worst_abs_err: 0.0,
    };
    for _ in 0..count {
        let g = RandomGraph::generate(&mut rng, depth);
        let x: Vec<f64> = (0..g.inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = grad_check(|t, v| g.build(t, v), &x, opts, |_, _| false)?;
        if !r.passed {
            summary.failures += 1;
        }
        summary.worst_rel_err = summary.worst_rel_err.max(r.max_rel_err);
        summary.worst_abs_err = summary.worst_abs_err.max(r.max_abs_err);
    }
    Ok(summary)
}

/// Branch pattern of every ReLU and the spiking neuron for the given
/// positions and directions: one bool per unit per point.
pub fn branch_pattern(params: &FieldParams, positions: &Tensor, dirs: &Tensor) -> Vec<bool> {
    let cfg = &params.config;
    let pos = if cfg.pos_scale == 1.0 {
        positions.clone()
    } else {
        positions.scale(cfg.pos_scale)
    };
    let mut out = Vec::new();
    let relu = |z: Tensor, out: &mut Vec<bool>| {
        out.extend(z.data().iter().map(|v| *v > 0.0));
        z.map(|v| v.max(0.0))
    };
    let affine = |h: &Tensor, w: &Tensor, b: &Tensor| {
        let mut z = h.matmul(w);
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                z.set(r, c, z.get(r, c) + b.get(0, c));
            }
        }
        z
    };
    let mut h = encode_rows(&pos, cfg.pos_freqs, cfg.include_raw_input);
    for l in &params.trunk {
        h = relu(affine(&h, &l.weight, &l.bias), &mut out);
    }
    let drive = affine(&h, &params.density.weight, &params.density.bias);
    let n = &params.neuron;
    for &z in drive.data() {
        let u = match n.kind {
            NeuronKind::Bfif => neuron::bfif_potential(z, n.k, n.r),
            _ => z,
        };
        out.push(match n.kind {
            NeuronKind::Relu => u > 0.0,
            _ => u >= n.v_th,
        });
        if n.kind == NeuronKind::HardBoundFif {
            out.push(u < n.hard_bound_b);
        }
    }
    let d = encode_rows(dirs, cfg.dir_freqs, cfg.include_raw_input);
    let mut feat = Vec::with_capacity(h.rows() * (h.cols() + d.cols()));
    for r in 0..h.rows() {
        feat.extend_from_slice(h.row(r));
        feat.extend_from_slice(d.row(r));
    }
    let feat = Tensor::from_vec(h.rows(), h.cols() + d.cols(), feat).expect("shape");
    relu(affine(&feat, &params.color_hidden.weight, &params.color_hidden.bias), &mut out);
    out
}

/// All points at which a step evaluates the field: the samples, and for
/// the geometry rays their six axis-displaced copies.
fn evaluated_points(cfg: &TrainConfig, set: &RaySet, plan: &StepPlan) -> (Tensor, Tensor) {
    let s = cfg.samples_per_ray;
    let mut pos = Vec::new();
    let mut dirs = Vec::new();
    for (b, &i) in plan.indices.iter().enumerate() {
        let ray = &set.rays[i];
        for j in 0..s {
            let x = ray.at(plan.t[b * s + j]);
            pos.extend_from_slice(&x);
            dirs.extend_from_slice(&ray.dir);
            if b < plan.lg_rays {
                for axis in 0..3 {
                    for sign in [1.0, -1.0] {
                        let mut y = x;
                        y[axis] += sign * cfg.fd_eps;
                        pos.extend_from_slice(&y);
                        dirs.extend_from_slice(&ray.dir);
                    }
                }
            }
        }
    }
    let rows = pos.len() / 3;
    (
        Tensor::from_vec(rows, 3, pos).expect("shape"),
        Tensor::from_vec(rows, 3, dirs).expect("shape"),
    )
}

/// Gradient of the full training loss for a fixed batch against central
/// differences over every parameter.
///
/// Excluded coordinates: those whose `±h` perturbation flips any ReLU or
/// firing decision, and `v_th`, whose gradient is the surrogate by
/// construction rather than a derivative of the forward pass.
pub fn check_total_loss(
    params: &FieldParams,
    cfg: &TrainConfig,
    set: &RaySet,
    plan: &StepPlan,
    opts: GradCheckOptions,
) -> Result<GradReport> {
    let whole = 0..plan.batch_len();
    let analytic = partition_grad(params, cfg, set, plan, whole.clone())?.grads;
    let (pos, dirs) = evaluated_points(cfg, set, plan);
    let base_pattern = branch_pattern(params, &pos, &dirs);
    let flat = params.flatten();
    let vi = params.v_th_index();
    let mut probe_params = params.clone();
    let mut probe = flat.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_input_index: 0,
        passed: true,
        excluded: Vec::new(),
        checked: 0,
    };
    for i in 0..flat.len() {
        if i == vi {
            report.excluded.push(i);
            continue;
        }
        let mut eval_at = |v: f64| -> Result<(f64, bool)> {
            probe[i] = v;
            probe_params.load_flat(&probe);
            let same = branch_pattern(&probe_params, &pos, &dirs) == base_pattern;
            let total = partition_grad(&probe_params, cfg, set, plan, whole.clone())?.total;
            Ok((total, same))
        };
        let (fp, same_p) = eval_at(flat[i] + opts.h)?;
        let (fm, same_m) = eval_at(flat[i] - opts.h)?;
        probe[i] = flat[i];
        if !(same_p && same_m) {
            report.excluded.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.h);
        let a = analytic[i];
        let abs_err = (a - numeric).abs();
        let rel_err = abs_err / a.abs().max(numeric.abs()).max(opts.denom_floor);
        report.max_abs_err = report.max_abs_err.max(abs_err);
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_input_index = i;
        }
        report.checked += 1;
    }
    if report.checked == 0 {
        return Err(Error::Inconclusive(flat.len()));
    }
    report.passed = report.max_rel_err <= opts.tol || report.max_abs_err <= opts.abs_floor;
    Ok(report)
}
