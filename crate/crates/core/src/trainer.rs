//! One optimization step, split into a plan, per-partition gradient work and
//! a single reduction so callers may run partitions on separate threads.

use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::diff::Tape;
use crate::field::{density_gradient_fd, field_forward, FieldParams};
use crate::loss::{loss_g, loss_rgb, loss_v, schedule, total_loss, Schedule, TrainConfig};
use crate::neuron::NeuronKind;
use crate::render::{composite_on_tape, sample_ray, Ray};
use crate::tensor::Tensor;
use crate::{Error, Result, Vec3};

/// Training rays with their observed colors.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub colors: Vec<Vec3>,
    pub background: Vec3,
}

impl RaySet {
    pub fn new(rays: Vec<Ray>, colors: Vec<Vec3>, background: Vec3) -> Result<Self> {
        if rays.is_empty() || rays.len() != colors.len() {
            return Err(Error::contract("RaySet", "need one color per ray and at least one ray"));
        }
        Ok(RaySet {
            rays,
            colors,
            background,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Generator position, enough to resume the exact random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Everything one step needs that is drawn from the generator or the
/// schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub iter: u64,
    pub schedule: Schedule,
    /// Ray indices into the [`RaySet`].
    pub indices: Vec<usize>,
    /// Sample positions, `samples_per_ray` per batch ray.
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    /// Leading batch rays that also carry the geometry term.
    pub lg_rays: usize,
}

impl StepPlan {
    pub fn batch_len(&self) -> usize {
        self.indices.len()
    }

    /// Splits the batch into `parts` contiguous ray ranges.
    pub fn partitions(&self, parts: usize) -> Vec<Range<usize>> {
        let n = self.batch_len();
        let parts = parts.clamp(1, n.max(1));
        (0..parts)
            .map(|i| (i * n / parts)..((i + 1) * n / parts))
            .filter(|r| !r.is_empty())
            .collect()
    }
}

/// Loss values and flat gradient of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionGrad {
    pub grads: Vec<f64>,
    pub l_rgb: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Iteration the step was computed for.
    pub iter: u64,
    pub l_rgb: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Neuron parameters after the update.
    pub v_th: f64,
    pub k: f64,
    pub r: f64,
}

/// Loss and gradient for rays `range` of the plan's batch.
///
/// The photometric term is weighted by the partition's share of the batch
/// so that partitions sum to the batch mean. The threshold term is counted
/// by the partition that starts at ray 0. The geometry term covers the
/// first `plan.lg_rays` batch rays and is rescaled to estimate the sum over
/// the whole batch.
pub fn partition_grad(
    params: &FieldParams,
    cfg: &TrainConfig,
    set: &RaySet,
    plan: &StepPlan,
    range: Range<usize>,
) -> Result<PartitionGrad> {
    let s = cfg.samples_per_ray;
    let n_batch = plan.batch_len();
    if range.is_empty() || range.end > n_batch || plan.t.len() != n_batch * s {
        return Err(Error::contract("partition_grad", "partition outside the batch"));
    }
    let rays = range.len();
    let mut pos = Vec::with_capacity(rays * s * 3);
    let mut dirs = Vec::with_capacity(rays * s * 3);
    let mut target = Vec::with_capacity(rays * 3);
    for b in range.clone() {
        let ray = &set.rays[plan.indices[b]];
        for j in 0..s {
            pos.extend_from_slice(&ray.at(plan.t[b * s + j]));
            dirs.extend_from_slice(&ray.dir);
        }
        target.extend_from_slice(&set.colors[plan.indices[b]]);
    }
    let positions = Tensor::from_vec(rays * s, 3, pos)?;
    let directions = Tensor::from_vec(rays * s, 3, dirs)?;
    let target = Tensor::from_vec(rays, 3, target)?;
    let t = Tensor::column(&plan.t[range.start * s..range.end * s]);
    let dt = Tensor::column(&plan.dt[range.start * s..range.end * s]);

    let sched = plan.schedule;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, !sched.v_th_frozen)?;
    let out = field_forward(&mut tape, &vars, &positions, &directions)?;
    let comp = composite_on_tape(&mut tape, out.sigma, out.rgb, &t, &dt, s, set.background)?;
    let l_rgb_part = loss_rgb(&mut tape, comp.color, &target, cfg.rgb_norm)?;
    let l_rgb = tape.scale(l_rgb_part, rays as f64 / n_batch as f64)?;

    let use_lv = range.start == 0 && !sched.v_th_frozen && params.neuron.kind != NeuronKind::Relu;
    let l_v = if use_lv {
        Some(loss_v(&mut tape, vars.v_th, cfg.eps_v)?)
    } else {
        None
    };

    let lg_end = plan.lg_rays.min(range.end);
    let l_g = if lg_end > range.start && sched.lambda2 > 0.0 {
        let n = lg_end - range.start;
        let sub_pos = slice_rows(&positions, 0, n * s)?;
        let sub_dirs = slice_rows(&directions, 0, n * s)?;
        let grad = density_gradient_fd(&mut tape, &vars, &sub_pos, cfg.fd_eps)?;
        let w = tape.slice_rows(comp.weights, 0, n * s)?;
        let raw = loss_g(&mut tape, w, &sub_dirs, grad)?;
        Some(tape.scale(raw, n_batch as f64 / plan.lg_rays as f64)?)
    } else {
        None
    };

    let total = total_loss(&mut tape, l_rgb, l_v, l_g, sched.lambda1, sched.lambda2)?;
    let g = tape.backward(total)?;
    let mut grads = Vec::with_capacity(params.config.param_count());
    for var in FieldParams::vars_in_order(&vars) {
        match g.get(var) {
            Some(t) => grads.extend_from_slice(t.data()),
            None => grads.extend(core::iter::repeat(0.0).take(tape.value(var).len())),
        }
    }
    Ok(PartitionGrad {
        grads,
        l_rgb: tape.scalar(l_rgb),
        l_v: l_v.map_or(0.0, |v| tape.scalar(v)),
        l_g: l_g.map_or(0.0, |v| tape.scalar(v)),
        total: tape.scalar(total),
    })
}

fn slice_rows(t: &Tensor, start: usize, n: usize) -> Result<Tensor> {
    let c = t.cols();
    Tensor::from_vec(n, c, t.data()[start * c..(start + n) * c].to_vec())
}

/// Field parameters, optimizer state and the generator that drives ray and
/// sample selection.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: FieldParams,
    pub adam: Adam,
    pub cfg: TrainConfig,
    /// Completed steps.
    pub iter: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: FieldParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(params.config.param_count(), cfg.lr);
        Ok(Trainer {
            params,
            adam,
            cfg,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn restore(params: FieldParams, cfg: TrainConfig, adam: Adam, iter: u64, rng: RngState) -> Result<Self> {
        cfg.validate()?;
        if adam.m.len() != params.config.param_count() || adam.v.len() != adam.m.len() {
            return Err(Error::contract("Trainer::restore", "moment length does not match the field"));
        }
        let mut gen = ChaCha8Rng::from_seed(rng.seed);
        gen.set_word_pos(rng.word_pos);
        Ok(Trainer {
            params,
            adam,
            cfg,
            iter,
            rng: gen,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.iterations
    }

    /// Draws the batch for the next step. Rays are drawn with replacement
    /// unless the set is no larger than a batch, in which case every ray is
    /// used once in order.
    pub fn plan(&mut self, set: &RaySet) -> Result<StepPlan> {
        let n = self.cfg.rays_per_batch;
        let indices: Vec<usize> = if set.len() <= n {
            (0..set.len()).collect()
        } else {
            (0..n).map(|_| self.rng.gen_range(0..set.len())).collect()
        };
        let s = self.cfg.samples_per_ray;
        let mut t = Vec::with_capacity(indices.len() * s);
        let mut dt = Vec::with_capacity(indices.len() * s);
        for &i in &indices {
            let rng: Option<&mut dyn rand::RngCore> = if self.cfg.stratified {
                Some(&mut self.rng)
            } else {
                None
            };
            let (ti, dti) = sample_ray(&set.rays[i], s, rng)?;
            t.extend(ti);
            dt.extend(dti);
        }
        let lg_rays = self.cfg.lg_rays.unwrap_or(indices.len()).min(indices.len());
        Ok(StepPlan {
            iter: self.iter,
            schedule: schedule(self.iter, &self.cfg),
            indices,
            t,
            dt,
            lg_rays,
        })
    }

    /// Merges partition results in the given order and takes the optimizer
    /// step. On error the parameters are left untouched.
    pub fn apply(&mut self, plan: &StepPlan, parts: &[PartitionGrad]) -> Result<StepStats> {
        let len = self.params.config.param_count();
        let mut grads = alloc::vec![0.0; len];
        let (mut l_rgb, mut l_v, mut l_g, mut total) = (0.0, 0.0, 0.0, 0.0);
        for p in parts {
            if p.grads.len() != len {
                return Err(Error::contract("Trainer::apply", "gradient length does not match the field"));
            }
            for (acc, g) in grads.iter_mut().zip(&p.grads) {
                *acc += g;
            }
            l_rgb += p.l_rgb;
            l_v += p.l_v;
            l_g += p.l_g;
            total += p.total;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                op: alloc::format!("total loss at iteration {}", plan.iter),
            });
        }
        self.adam
            .step_field(&mut self.params, &grads, plan.schedule.v_th_frozen)?;
        self.iter += 1;
        Ok(StepStats {
            iter: plan.iter,
            l_rgb,
            l_v,
            l_g,
            total,
            lambda1: plan.schedule.lambda1,
            lambda2: plan.schedule.lambda2,
            v_th: self.params.neuron.v_th,
            k: self.params.neuron.k,
            r: self.params.neuron.r,
        })
    }

    /// Plan, single-partition gradient and update.
    pub fn step(&mut self, set: &RaySet) -> Result<StepStats> {
        let plan = self.plan(set)?;
        let part = partition_grad(&self.params, &self.cfg, set, &plan, 0..plan.batch_len())?;
        self.apply(&plan, &[part])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_params, FieldConfig};

    fn small_field() -> FieldParams {
        let cfg = FieldConfig {
            pos_freqs: 2,
            dir_freqs: 1,
            hidden_width: 8,
            depth_layers: 1,
            radiance_width: 4,
            ..FieldConfig::default()
        };
        init_params(&cfg).unwrap()
    }

    fn small_set() -> RaySet {
        let rays: Vec<Ray> = (0..6)
            .map(|i| Ray::new([0.1 * i as f64, 0.0, 0.0], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap())
            .collect();
        RaySet::new(rays, alloc::vec![[0.2, 0.4, 0.6]; 6], [1.0; 3]).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rays_per_batch: 4,
            samples_per_ray: 8,
            iterations: 10,
            warmup_iters: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn partitions_sum_to_whole_batch() {
        let set = small_set();
        let cfg = TrainConfig { lg_rays: Some(3), warmup_iters: 0, ..small_cfg() };
        let mut tr = Trainer::new(small_field(), cfg).unwrap();
        let plan = tr.plan(&set).unwrap();
        let whole = partition_grad(&tr.params, &cfg, &set, &plan, 0..4).unwrap();
        let parts: Vec<PartitionGrad> = plan
            .partitions(3)
            .into_iter()
            .map(|r| partition_grad(&tr.params, &cfg, &set, &plan, r).unwrap())
            .collect();
        let total: f64 = parts.iter().map(|p| p.total).sum();
        assert!((total - whole.total).abs() < 1e-12 * whole.total.abs().max(1.0));
        for i in 0..whole.grads.len() {
            let g: f64 = parts.iter().map(|p| p.grads[i]).sum();
            assert!((g - whole.grads[i]).abs() < 1e-10 * (1.0 + whole.grads[i].abs()), "{i}");
        }
    }

    #[test]
    fn seeded_runs_repeat_and_resume() {
        let set = small_set();
        let run = |steps: usize| {
            let mut tr = Trainer::new(small_field(), small_cfg()).unwrap();
            for _ in 0..steps {
                tr.step(&set).unwrap();
            }
            tr
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.params.flatten(), b.params.flatten());

        let mid = run(3);
        let mut resumed = Trainer::restore(
            mid.params.clone(),
            mid.cfg,
            mid.adam.clone(),
            mid.iter,
            mid.rng_state(),
        )
        .unwrap();
        for _ in 0..2 {
            resumed.step(&set).unwrap();
        }
        assert_eq!(resumed.params.flatten(), a.params.flatten());
    }

    #[test]
    fn threshold_frozen_during_warmup() {
        let set = small_set();
        let mut tr = Trainer::new(small_field(), small_cfg()).unwrap();
        for _ in 0..2 {
            let s = tr.step(&set).unwrap();
            assert_eq!(s.v_th, 0.0);
            assert_eq!(s.l_v, 0.0);
        }
        let s = tr.step(&set).unwrap();
        assert!(s.l_v > 0.0);
        assert!(s.v_th > 0.0);
    }
}
