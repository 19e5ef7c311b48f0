//! Positional-encoded MLP mapping `(x, d)` to density and radiance.
//!
//! Layout: a ReLU trunk over the encoded position, a linear density head
//! whose output drives the spiking neuron, and a small radiance head over
//! the trunk features concatenated with the encoded view direction. Density
//! never sees the direction.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{CustomOpId, Tape, Var};
use crate::encoding::{encode_rows, encoded_dim};
use crate::math::{norm, sqrt};
use crate::neuron::{self, NeuronKind, NeuronParams};
use crate::tensor::Tensor;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub hidden_width: usize,
    pub depth_layers: usize,
    pub include_raw_input: bool,
    /// Width of the radiance head's hidden layer.
    #[serde(default = "default_radiance_width")]
    pub radiance_width: usize,
    /// Positions are multiplied by this before encoding.
    #[serde(default = "default_pos_scale")]
    pub pos_scale: f64,
    pub density_activation: NeuronParams,
    pub seed: u64,
}

fn default_radiance_width() -> usize {
    32
}

fn default_pos_scale() -> f64 {
    1.0
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pos_freqs: 10,
            dir_freqs: 4,
            hidden_width: 64,
            depth_layers: 4,
            include_raw_input: true,
            radiance_width: default_radiance_width(),
            pos_scale: 1.0,
            density_activation: NeuronParams::default(),
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pos_freqs < 1 {
            return Err(Error::contract("FieldConfig", "pos_freqs must be at least 1"));
        }
        if self.hidden_width < 8 {
            return Err(Error::contract("FieldConfig", "hidden_width must be at least 8"));
        }
        if self.depth_layers < 1 || self.radiance_width < 1 {
            return Err(Error::contract("FieldConfig", "need at least one trunk and radiance layer"));
        }
        if !(self.pos_scale > 0.0) {
            return Err(Error::contract("FieldConfig", "pos_scale must be positive"));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_dim(3, self.pos_freqs, self.include_raw_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_dim(3, self.dir_freqs, self.include_raw_input)
    }

    /// Shapes of every weight and bias, in flattening order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width;
        let mut dims = Vec::new();
        let mut fan_in = self.pos_dim();
        for _ in 0..self.depth_layers {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((h, 1));
        dims.push((h + self.dir_dim(), self.radiance_width));
        dims.push((self.radiance_width, 3));
        dims
    }

    /// Number of learnable scalars, including `k`, `r` and `v_th`.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum::<usize>() + 3
    }
}

/// Dense layer `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub trunk: Vec<Linear>,
    pub density: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
    pub neuron: NeuronParams,
}

/// Initial parameters: fan-in uniform weights from a seeded generator and the
/// neuron at `k = 1`, `r = 100`, `v_th = 0` (kind and surrogate settings are
/// taken from the config).
pub fn init_params(config: &FieldConfig) -> Result<FieldParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers: Vec<Linear> = config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = 1.0 / sqrt(fan_in as f64);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            let weight = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
            let bias = Tensor::from_vec(1, fan_out, draw(fan_out)).expect("shape");
            Linear { weight, bias }
        })
        .collect();
    let color_out = layers.pop().expect("radiance output");
    let color_hidden = layers.pop().expect("radiance hidden");
    let density = layers.pop().expect("density head");
    let neuron = NeuronParams {
        v_th: 0.0,
        k: 1.0,
        r: 100.0,
        ..config.density_activation
    };
    Ok(FieldParams {
        config: *config,
        trunk: layers,
        density,
        color_hidden,
        color_out,
        neuron,
    })
}

impl FieldParams {
    fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.trunk
            .iter()
            .chain([&self.density, &self.color_hidden, &self.color_out])
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk.iter_mut().chain([
            &mut self.density,
            &mut self.color_hidden,
            &mut self.color_out,
        ])
    }

    /// All learnable scalars: each layer's weight then bias, then `k`, `r`,
    /// `v_th`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.param_count());
        for l in self.linears() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out.extend_from_slice(&[self.neuron.k, self.neuron.r, self.neuron.v_th]);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(config: &FieldConfig, values: &[f64]) -> Result<Self> {
        if values.len() != config.param_count() {
            return Err(Error::contract(
                "FieldParams::unflatten",
                format!("{} values, config needs {}", values.len(), config.param_count()),
            ));
        }
        let mut params = init_params(config)?;
        params.load_flat(values);
        Ok(params)
    }

    /// Overwrites every learnable scalar from a flat vector in
    /// [`flatten`](Self::flatten) order.
    pub fn load_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for l in self.linears_mut() {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        self.neuron.k = values[offset];
        self.neuron.r = values[offset + 1];
        self.neuron.v_th = values[offset + 2];
    }

    /// Index of `v_th` in the flat layout.
    pub fn v_th_index(&self) -> usize {
        self.config.param_count() - 1
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Places every parameter on `tape`. `v_th` becomes a constant unless
    /// `learn_v_th`.
    pub fn bind(&self, tape: &mut Tape, learn_v_th: bool) -> Result<FieldVars> {
        let mut bind_linear = |l: &Linear| (tape.param(l.weight.clone()), tape.param(l.bias.clone()));
        let trunk = self.trunk.iter().map(&mut bind_linear).collect();
        let density = bind_linear(&self.density);
        let color_hidden = bind_linear(&self.color_hidden);
        let color_out = bind_linear(&self.color_out);
        let k = tape.param_scalar(self.neuron.k);
        let r = tape.param_scalar(self.neuron.r);
        let v_th = if learn_v_th {
            tape.param_scalar(self.neuron.v_th)
        } else {
            tape.constant_scalar(self.neuron.v_th)
        };
        let activation = if self.neuron.kind == NeuronKind::Relu {
            None
        } else {
            Some(neuron::register_activation(tape, &self.neuron)?)
        };
        Ok(FieldVars {
            config: self.config,
            trunk,
            density,
            color_hidden,
            color_out,
            k,
            r,
            v_th,
            activation,
        })
    }

    /// Places every parameter on `tape` as a constant, for evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<FieldVars> {
        let mut bind_linear =
            |l: &Linear| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()));
        let trunk = self.trunk.iter().map(&mut bind_linear).collect();
        let density = bind_linear(&self.density);
        let color_hidden = bind_linear(&self.color_hidden);
        let color_out = bind_linear(&self.color_out);
        let k = tape.constant_scalar(self.neuron.k);
        let r = tape.constant_scalar(self.neuron.r);
        let v_th = tape.constant_scalar(self.neuron.v_th);
        let activation = if self.neuron.kind == NeuronKind::Relu {
            None
        } else {
            Some(neuron::register_activation(tape, &self.neuron)?)
        };
        Ok(FieldVars {
            config: self.config,
            trunk,
            density,
            color_hidden,
            color_out,
            k,
            r,
            v_th,
            activation,
        })
    }

    /// Tape variables of every learnable tensor in flattening order, matching
    /// [`flatten`](Self::flatten).
    pub fn vars_in_order(vars: &FieldVars) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in vars
            .trunk
            .iter()
            .chain([&vars.density, &vars.color_hidden, &vars.color_out])
        {
            out.push(*w);
            out.push(*b);
        }
        out.extend_from_slice(&[vars.k, vars.r, vars.v_th]);
        out
    }
}

/// Field parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct FieldVars {
    pub config: FieldConfig,
    pub trunk: Vec<(Var, Var)>,
    pub density: (Var, Var),
    pub color_hidden: (Var, Var),
    pub color_out: (Var, Var),
    pub k: Var,
    pub r: Var,
    pub v_th: Var,
    activation: Option<CustomOpId>,
}

/// Batched field outputs on a tape, one row per point.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutput {
    /// `P×1` densities.
    pub sigma: Var,
    /// `P×3` colors in `[0, 1]`.
    pub rgb: Var,
    /// `P×1` density-head outputs before the neuron.
    pub drive: Var,
}

fn layer_err(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("field {layer} ({op})"),
        },
        other => other,
    }
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let m = tape.matmul(x, w)?;
    tape.add_row(m, b)
}

fn scaled_positions(config: &FieldConfig, positions: &Tensor) -> Tensor {
    if config.pos_scale == 1.0 {
        positions.clone()
    } else {
        positions.scale(config.pos_scale)
    }
}

/// Trunk and density for a `P×3` batch of positions. Returns `(features,
/// drive, sigma)`.
fn trunk_density(tape: &mut Tape, vars: &FieldVars, positions: &Tensor) -> Result<(Var, Var, Var)> {
    let cfg = &vars.config;
    let enc = encode_rows(
        &scaled_positions(cfg, positions),
        cfg.pos_freqs,
        cfg.include_raw_input,
    );
    let mut h = tape.constant(enc);
    for (i, layer) in vars.trunk.iter().enumerate() {
        let name = format!("trunk layer {i}");
        let z = linear(tape, h, *layer).map_err(layer_err(&name))?;
        h = tape.relu(z).map_err(layer_err(&name))?;
    }
    let drive = linear(tape, h, vars.density).map_err(layer_err("density head"))?;
    let sigma = match vars.activation {
        Some(op) => tape.custom(op, &[drive, vars.k, vars.r, vars.v_th]),
        None => tape.relu(drive),
    }
    .map_err(layer_err("density activation"))?;
    Ok((h, drive, sigma))
}

/// Density only, for a `P×3` batch.
pub fn density_forward(tape: &mut Tape, vars: &FieldVars, positions: &Tensor) -> Result<Var> {
    Ok(trunk_density(tape, vars, positions)?.2)
}

/// Density and radiance for a batch of positions and unit directions (`P×3`
/// each).
pub fn field_forward(
    tape: &mut Tape,
    vars: &FieldVars,
    positions: &Tensor,
    dirs: &Tensor,
) -> Result<FieldOutput> {
    if positions.shape() != dirs.shape() || positions.cols() != 3 {
        return Err(Error::contract(
            "field_forward",
            format!("positions {:?}, directions {:?}", positions.shape(), dirs.shape()),
        ));
    }
    let cfg = vars.config;
    let (h, drive, sigma) = trunk_density(tape, vars, positions)?;
    let dir_enc = tape.constant(encode_rows(dirs, cfg.dir_freqs, cfg.include_raw_input));
    let feat = tape.concat_cols(h, dir_enc)?;
    let z = linear(tape, feat, vars.color_hidden).map_err(layer_err("radiance hidden"))?;
    let a = tape.relu(z).map_err(layer_err("radiance hidden"))?;
    let logits = linear(tape, a, vars.color_out).map_err(layer_err("radiance output"))?;
    let rgb = tape.sigmoid(logits).map_err(layer_err("radiance output"))?;
    Ok(FieldOutput { sigma, rgb, drive })
}

/// Central-difference density gradient per axis, each `P×1`, built from six
/// differentiable density passes (one stacked batch) so that losses on it
/// reach the weights without nested differentiation.
pub fn density_gradient_fd(
    tape: &mut Tape,
    vars: &FieldVars,
    positions: &Tensor,
    eps: f64,
) -> Result<[Var; 3]> {
    if !(eps > 0.0) {
        return Err(Error::contract("density_gradient_fd", "eps must be positive"));
    }
    let p = positions.rows();
    let mut stacked = Vec::with_capacity(6 * p * 3);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            for r in 0..p {
                let mut x = [positions.get(r, 0), positions.get(r, 1), positions.get(r, 2)];
                x[axis] += sign * eps;
                stacked.extend_from_slice(&x);
            }
        }
    }
    let stacked = Tensor::from_vec(6 * p, 3, stacked)?;
    let sigma = density_forward(tape, vars, &stacked)?;
    let mut out = [sigma; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let plus = tape.slice_rows(sigma, 2 * axis * p, p)?;
        let minus = tape.slice_rows(sigma, (2 * axis + 1) * p, p)?;
        let diff = tape.sub(plus, minus)?;
        *slot = tape.scale(diff, 1.0 / (2.0 * eps))?;
    }
    Ok(out)
}

/// Field evaluation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub sigma: f64,
    pub rgb: Vec3,
    /// Membrane potential before firing (the raw drive for non-bounded
    /// kinds).
    pub u_pre: f64,
}

/// Largest batch evaluated on one tape by [`eval_points`].
pub const EVAL_CHUNK: usize = 4096;

/// Evaluates the field at many points without recording gradients.
pub fn eval_points(params: &FieldParams, positions: &[Vec3], dirs: &[Vec3]) -> Result<Vec<PointSample>> {
    if positions.len() != dirs.len() {
        return Err(Error::contract("eval_points", "positions and directions differ in length"));
    }
    let mut out = Vec::with_capacity(positions.len());
    for (xs, ds) in positions.chunks(EVAL_CHUNK).zip(dirs.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape)?;
        let fo = field_forward(&mut tape, &vars, &Tensor::from_rows(xs), &Tensor::from_rows(ds))?;
        let (sigma, rgb, drive) = (tape.value(fo.sigma), tape.value(fo.rgb), tape.value(fo.drive));
        for i in 0..xs.len() {
            let z = drive.get(i, 0);
            let u_pre = match params.neuron.kind {
                NeuronKind::Bfif => neuron::bfif_potential(z, params.neuron.k, params.neuron.r),
                _ => z,
            };
            out.push(PointSample {
                sigma: sigma.get(i, 0),
                rgb: [rgb.get(i, 0), rgb.get(i, 1), rgb.get(i, 2)],
                u_pre,
            });
        }
    }
    Ok(out)
}

/// Evaluates densities only.
pub fn eval_density(params: &FieldParams, positions: &[Vec3]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(positions.len());
    for xs in positions.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape)?;
        let s = density_forward(&mut tape, &vars, &Tensor::from_rows(xs))?;
        out.extend_from_slice(tape.value(s).data());
    }
    Ok(out)
}

/// Density, radiance and membrane potential at one point; `d` must be a unit
/// vector.
pub fn density_radiance(x: Vec3, d: Vec3, params: &FieldParams) -> Result<PointSample> {
    if (norm(d) - 1.0).abs() > 1e-6 {
        return Err(Error::contract("density_radiance", "direction is not unit length"));
    }
    Ok(eval_points(params, &[x], &[d])?[0])
}
