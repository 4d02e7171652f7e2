//! Affine-coupling normalizing flow used as a joint prior over all parameters.

use elicit_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::optim::Variable;
use crate::rng::NoiseStream;

/// Bound of the soft clamp `c · tanh(s / c)` on log-scales.
pub const SCALE_CLAMP: f64 = 1.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Softplus,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Linear => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingDesign {
    #[default]
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    /// Standard multivariate normal.
    #[default]
    BaseNormal,
}

fn default_units() -> usize {
    128
}
fn default_num_dense() -> usize {
    2
}
fn default_blocks() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseArgs {
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for DenseArgs {
    fn default() -> Self {
        Self {
            units: default_units(),
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSettings {
    #[serde(default)]
    pub dense_args: DenseArgs,
    #[serde(default = "default_num_dense")]
    pub num_dense: usize,
}

impl Default for CouplingSettings {
    fn default() -> Self {
        Self {
            dense_args: DenseArgs::default(),
            num_dense: default_num_dense(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub num_params: usize,
    #[serde(default = "default_blocks")]
    pub num_coupling_layers: usize,
    #[serde(default)]
    pub coupling_design: CouplingDesign,
    #[serde(default)]
    pub coupling_settings: CouplingSettings,
    #[serde(default)]
    pub base_distribution: BaseDistribution,
}

impl FlowConfig {
    pub fn new(num_params: usize) -> Self {
        Self {
            num_params,
            num_coupling_layers: default_blocks(),
            coupling_design: CouplingDesign::Affine,
            coupling_settings: CouplingSettings::default(),
            base_distribution: BaseDistribution::BaseNormal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_params < 2 {
            return Err(Error::config("num_params", "a coupling flow needs at least 2 parameters"));
        }
        if self.num_coupling_layers < 1 {
            return Err(Error::config("num_coupling_layers", "must be at least 1"));
        }
        if self.coupling_settings.num_dense < 1 {
            return Err(Error::config("coupling_settings.num_dense", "must be at least 1"));
        }
        if self.coupling_settings.dense_args.units < 1 {
            return Err(Error::config("coupling_settings.dense_args.units", "must be at least 1"));
        }
        Ok(())
    }
}

/// A flow with a fixed architecture; weights are passed in separately.
///
/// Each block keeps the first `ceil(P/2)` coordinates and transforms the rest
/// as `x = z · exp(s) + t`, with `(s, t)` predicted from the kept half.
/// Coordinates are reversed between consecutive blocks.
#[derive(Debug, Clone)]
pub struct Flow {
    config: FlowConfig,
    n_pass: usize,
    n_trans: usize,
}

impl Flow {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let p = config.num_params;
        let n_pass = p.div_ceil(2);
        Ok(Self {
            config,
            n_pass,
            n_trans: p - n_pass,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    fn layers_per_block(&self) -> usize {
        2 * (self.config.coupling_settings.num_dense + 1)
    }

    /// Names and shapes of all trainable arrays, block by block.
    pub fn variable_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let units = self.config.coupling_settings.dense_args.units;
        let mut out = Vec::new();
        for b in 0..self.config.num_coupling_layers {
            let mut fan_in = self.n_pass;
            for l in 0..self.config.coupling_settings.num_dense {
                out.push((format!("coupling{b}.dense{l}.kernel"), vec![fan_in, units]));
                out.push((format!("coupling{b}.dense{l}.bias"), vec![units]));
                fan_in = units;
            }
            out.push((format!("coupling{b}.head.kernel"), vec![units, 2 * self.n_trans]));
            out.push((format!("coupling{b}.head.bias"), vec![2 * self.n_trans]));
        }
        out
    }

    /// Glorot-uniform hidden kernels, zero biases and zero output heads, so
    /// the initial flow is the identity.
    pub fn init_weights(&self, noise: &mut NoiseStream) -> Vec<Variable> {
        self.variable_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".kernel") && !name.contains(".head.") {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    noise.uniform(&[n]).data().iter().map(|u| a * (2.0 * u - 1.0)).collect()
                } else {
                    vec![0.0; n]
                };
                Variable { name, shape, values }
            })
            .collect()
    }

    fn check_weights(&self, count: usize) -> Result<()> {
        let expected = self.variable_shapes().len();
        if count != expected {
            return Err(Error::config("networks", format!("flow expects {expected} weight arrays, got {count}")));
        }
        Ok(())
    }

    fn reverse<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        let order: Vec<usize> = (0..self.config.num_params).rev().collect();
        Ok(x.gather(axis, &order)?)
    }

    /// Log-scale and shift predicted from the pass-through half.
    fn scale_shift<'t>(&self, block: &[Var<'t>], pass: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let act = self.config.coupling_settings.dense_args.activation;
        let mut h = pass;
        let hidden = self.config.coupling_settings.num_dense;
        for l in 0..hidden {
            h = act.apply(h.matmul(block[2 * l])?.add(block[2 * l + 1])?);
        }
        let head = h.matmul(block[2 * hidden])?.add(block[2 * hidden + 1])?;
        let axis = head.shape().len() - 1;
        let s = head.slice(axis, 0, self.n_trans)?;
        let t = head.slice(axis, self.n_trans, 2 * self.n_trans)?;
        let s = s.mul_scalar(1.0 / SCALE_CLAMP).tanh().mul_scalar(SCALE_CLAMP);
        Ok((s, t))
    }

    fn split<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, usize)> {
        let shape = x.shape();
        let axis = shape.len().checked_sub(1).unwrap_or(0);
        if shape.last() != Some(&self.config.num_params) {
            return Err(Error::config(
                "networks.num_params",
                format!("flow expects a trailing axis of {}, got shape {shape:?}", self.config.num_params),
            ));
        }
        Ok((x.slice(axis, 0, self.n_pass)?, x.slice(axis, self.n_pass, self.config.num_params)?, axis))
    }

    /// Pushes base draws `z[.., P]` through all blocks.
    pub fn forward<'t>(&self, weights: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        self.check_weights(weights.len())?;
        let blocks = self.config.num_coupling_layers;
        let mut x = z;
        for (b, block) in weights.chunks(self.layers_per_block()).enumerate() {
            let (pass, trans, axis) = self.split(x)?;
            let (s, t) = self.scale_shift(block, pass)?;
            let moved = trans.mul(s.exp())?.add(t)?;
            x = z.tape().concat(&[pass, moved], axis)?;
            if !x.value().all_finite() {
                return Err(Error::NonFinite {
                    epoch: 0,
                    key: format!("coupling block {b}"),
                    quantity: "activation",
                    last_finite: Vec::new(),
                });
            }
            if b + 1 < blocks {
                x = self.reverse(x)?;
            }
        }
        Ok(x)
    }

    /// Analytic inverse of [`forward`](Self::forward).
    pub fn inverse(&self, weights: &[Variable], x: &Tensor) -> Result<Tensor> {
        self.check_weights(weights.len())?;
        let tape = Tape::new();
        let w = weights
            .iter()
            .map(|v| Ok(tape.constant(Tensor::new(v.shape.clone(), v.values.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let blocks: Vec<&[Var]> = w.chunks(self.layers_per_block()).collect();
        let mut y = tape.constant(x.clone());
        for b in (0..blocks.len()).rev() {
            if b + 1 < blocks.len() {
                y = self.reverse(y)?;
            }
            let (pass, moved, axis) = self.split(y)?;
            let (s, t) = self.scale_shift(blocks[b], pass)?;
            let trans = moved.sub(t)?.mul(s.neg().exp())?;
            y = tape.concat(&[pass, trans], axis)?;
        }
        let out = y.value().clone();
        Ok(out)
    }

    /// Draws `[b, s, P]` prior samples: base noise through the flow, then
    /// each coordinate through its constraint.
    pub fn sample<'t>(
        &self,
        weights: &[Var<'t>],
        constraints: &[ConstraintSpec],
        b: usize,
        s: usize,
        noise: &mut NoiseStream,
    ) -> Result<Var<'t>> {
        let p = self.config.num_params;
        if constraints.len() != p {
            return Err(Error::config("parameters", format!("flow has {p} outputs but {} parameters", constraints.len())));
        }
        let tape = weights
            .first()
            .ok_or_else(|| Error::config("networks", "flow has no weights"))?
            .tape();
        let z = tape.constant(noise.standard_normal(&[b, s, p]));
        let x = self.forward(weights, z)?;
        if constraints.iter().all(ConstraintSpec::is_unconstrained) {
            return Ok(x);
        }
        let columns = constraints
            .iter()
            .enumerate()
            .map(|(j, c)| Ok(c.constrain(x.slice(2, j, j + 1)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&columns, 2)?)
    }
}
