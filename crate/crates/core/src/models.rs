//! Generative models: forward simulators from prior draws to named outputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use elicit_autodiff::{Tape, Tensor, Var};

use crate::distributions::{binomial_log_pmf_logit, gumbel_softmax_trick, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// Named outputs of one forward simulation, in declaration order.
///
/// Every tensor has leading axes `[B, S]`.
#[derive(Debug, Clone, Default)]
pub struct GenerativeOutput<'t> {
    entries: Vec<(String, Var<'t>)>,
}

impl<'t> GenerativeOutput<'t> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds an output; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Var<'t>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::config("model", format!("duplicate output `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// A forward simulator `θ[B, S, P] -> {name: tensor[B, S, ...]}`.
pub trait GenerativeModel: Send + Sync {
    /// Model parameters in the order of the last prior-sample axis.
    fn parameter_names(&self) -> Vec<String>;

    fn output_names(&self) -> Vec<String>;

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        prior_samples: Var<'t>,
        noise: &mut NoiseStream,
    ) -> Result<GenerativeOutput<'t>>;
}

/// Checks that `prior_samples` is `[B, S, P]` with the model's `P`.
pub fn check_parameter_axis(model: &dyn GenerativeModel, prior_samples: Var<'_>) -> Result<()> {
    let shape = prior_samples.shape();
    let names = model.parameter_names();
    if shape.len() != 3 || shape[2] != names.len() {
        return Err(Error::config(
            "parameters",
            format!(
                "model expects prior samples [B, S, {}] ordered ({}), got shape {shape:?}",
                names.len(),
                names.join(", ")
            ),
        ));
    }
    Ok(())
}

/// Dummy-coded design for a three-level factor with `n_gr` rows per level.
pub fn design_categorical(n_gr: usize) -> Result<Tensor> {
    if n_gr < 1 {
        return Err(Error::config("n_gr", "group size must be at least 1"));
    }
    let contrasts = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
    let mut data = Vec::with_capacity(9 * n_gr);
    for row in contrasts {
        for _ in 0..n_gr {
            data.extend_from_slice(&row);
        }
    }
    Ok(Tensor::new(vec![3 * n_gr, 3], data)?)
}

/// Linear predictor `θ[.., :K] · Xᵀ` for a design `X[N, K]`.
fn linear_predictor<'t>(tape: &'t Tape, coefficients: Var<'t>, design_t: &Tensor) -> Result<Var<'t>> {
    Ok(coefficients.matmul(tape.constant(design_t.clone()))?)
}

/// Normal linear regression on a three-level categorical predictor.
///
/// Parameters are the design coefficients followed by the residual scale.
/// Outputs: `y_gr0`, `y_gr1`, `y_gr2` (contiguous blocks of `n_gr`
/// observations), `mu` and `y`.
#[derive(Debug, Clone)]
pub struct NormalRegression {
    design_t: Tensor,
    n_gr: usize,
    parameters: Vec<String>,
}

impl NormalRegression {
    pub fn new(design: Tensor, n_gr: usize) -> Result<Self> {
        let &[rows, cols] = design.shape() else {
            return Err(Error::config("model.design_matrix", "design must be a matrix"));
        };
        if n_gr < 1 || rows != 3 * n_gr {
            return Err(Error::config(
                "model.n_gr",
                format!("design has {rows} rows, expected 3 × n_gr = {}", 3 * n_gr),
            ));
        }
        let mut parameters: Vec<String> = (0..cols).map(|j| format!("beta{j}")).collect();
        parameters.push("sigma".into());
        Ok(Self {
            design_t: design.transpose()?,
            n_gr,
            parameters,
        })
    }

    pub fn categorical(n_gr: usize) -> Result<Self> {
        Self::new(design_categorical(n_gr)?, n_gr)
    }

    pub fn n_gr(&self) -> usize {
        self.n_gr
    }

    /// Forward pass with externally supplied standard-normal noise `[B, S, N]`.
    pub fn simulate<'t>(
        &self,
        tape: &'t Tape,
        prior_samples: Var<'t>,
        eps: Tensor,
    ) -> Result<GenerativeOutput<'t>> {
        check_parameter_axis(self, prior_samples)?;
        let k = self.parameters.len() - 1;
        let betas = prior_samples.slice(2, 0, k)?;
        let sigma = prior_samples.slice(2, k, k + 1)?;
        let mu = linear_predictor(tape, betas, &self.design_t)?;
        let y = mu.add(sigma.mul(tape.constant(eps))?)?;
        let mut out = GenerativeOutput::new();
        for g in 0..3 {
            out.insert(format!("y_gr{g}"), y.slice(2, g * self.n_gr, (g + 1) * self.n_gr)?)?;
        }
        out.insert("mu", mu)?;
        out.insert("y", y)?;
        Ok(out)
    }
}

impl GenerativeModel for NormalRegression {
    fn parameter_names(&self) -> Vec<String> {
        self.parameters.clone()
    }

    fn output_names(&self) -> Vec<String> {
        vec!["y_gr0".into(), "y_gr1".into(), "y_gr2".into(), "mu".into(), "y".into()]
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        prior_samples: Var<'t>,
        noise: &mut NoiseStream,
    ) -> Result<GenerativeOutput<'t>> {
        let shape = prior_samples.shape();
        let n = self.design_t.shape()[1];
        let eps = noise.standard_normal(&[shape[0], shape.get(1).copied().unwrap_or(1), n]);
        self.simulate(tape, prior_samples, eps)
    }
}

/// Binomial regression with a logistic link and a Gumbel-softmax relaxed count.
///
/// Outputs: `y` (relaxed counts), `mu` (linear predictor) and `p` (success
/// probability).
#[derive(Debug, Clone)]
pub struct BinomialRegression {
    design_t: Tensor,
    total_count: u32,
    temp: f64,
    parameters: Vec<String>,
}

impl BinomialRegression {
    pub fn new(design: Tensor, total_count: u32, temp: Option<f64>) -> Result<Self> {
        let &[_, cols] = design.shape() else {
            return Err(Error::config("model.design_matrix", "design must be a matrix"));
        };
        if total_count < 1 {
            return Err(Error::config("model.total_count", "must be a positive integer"));
        }
        let temp = temp.unwrap_or(DEFAULT_TEMPERATURE);
        if !(temp > 0.0) {
            return Err(Error::config("model.temp", format!("must be positive, got {temp}")));
        }
        Ok(Self {
            design_t: design.transpose()?,
            total_count,
            temp,
            parameters: (0..cols).map(|j| format!("beta{j}")).collect(),
        })
    }
}

impl GenerativeModel for BinomialRegression {
    fn parameter_names(&self) -> Vec<String> {
        self.parameters.clone()
    }

    fn output_names(&self) -> Vec<String> {
        vec!["y".into(), "mu".into(), "p".into()]
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        prior_samples: Var<'t>,
        noise: &mut NoiseStream,
    ) -> Result<GenerativeOutput<'t>> {
        check_parameter_axis(self, prior_samples)?;
        let mu = linear_predictor(tape, prior_samples, &self.design_t)?;
        let log_pmf = binomial_log_pmf_logit(self.total_count, self.total_count, mu)?;
        let y = gumbel_softmax_trick(log_pmf, self.temp, noise)?;
        let mut out = GenerativeOutput::new();
        out.insert("y", y)?;
        out.insert("mu", mu)?;
        out.insert("p", mu.sigmoid())?;
        Ok(out)
    }
}

/// Builds a model from its configuration context.
pub type ModelFactory =
    Arc<dyn Fn(&serde_json::Value) -> Result<Arc<dyn GenerativeModel>> + Send + Sync>;

/// User-registered models, looked up by name.
#[derive(Clone, Default)]
pub struct ModelRegistry {
    factories: BTreeMap<String, ModelFactory>,
}

impl ModelRegistry {
    pub fn register(&mut self, name: impl Into<String>, factory: ModelFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn build(&self, name: &str, context: &serde_json::Value) -> Result<Arc<dyn GenerativeModel>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::config(
                "model.name",
                format!(
                    "unknown model `{name}`; registered: [{}]",
                    self.factories.keys().cloned().collect::<Vec<_>>().join(", ")
                ),
            )
        })?;
        factory(context)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}
