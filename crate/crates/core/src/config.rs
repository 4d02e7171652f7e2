//! Run configuration: parsing, defaults and cross-checks.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use elicit_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::initializer::{InitMethod, InitializerConfig};
use crate::losses::{ExpertData, LossSpec};
use crate::models::{design_categorical, BinomialRegression, GenerativeModel, NormalRegression};
use crate::optim::OptimizerConfig;
use crate::prior::{ParameterSpec, ParametricPrior};
use crate::registry::Registry;
use crate::sobol::MAX_DIM;
use crate::targets::{correlation_pairs, QuerySpec, TargetSpec};

/// The generative model of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "obj", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    NormalRegression {
        n_gr: usize,
        /// Defaults to the dummy-coded three-level design.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        design_matrix: Option<Vec<Vec<f64>>>,
    },
    BinomialRegression {
        design_matrix: Vec<Vec<f64>>,
        total_count: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temp: Option<f64>,
    },
    /// A model registered with [`Registry::register_model`].
    Custom {
        name: String,
        #[serde(default)]
        context: serde_json::Value,
    },
}

impl ModelSpec {
    pub fn build(&self, registry: &Registry) -> Result<Arc<dyn GenerativeModel>> {
        Ok(match self {
            ModelSpec::NormalRegression { n_gr, design_matrix } => {
                let design = match design_matrix {
                    Some(rows) => Tensor::matrix(rows).map_err(|e| Error::config("design_matrix", e.to_string()))?,
                    None => design_categorical(*n_gr)?,
                };
                Arc::new(NormalRegression::new(design, *n_gr)?)
            }
            ModelSpec::BinomialRegression {
                design_matrix,
                total_count,
                temp,
            } => {
                let design = Tensor::matrix(design_matrix).map_err(|e| Error::config("design_matrix", e.to_string()))?;
                Arc::new(BinomialRegression::new(design, *total_count, *temp)?)
            }
            ModelSpec::Custom { name, context } => registry.build_model(name, context)?,
        })
    }
}

/// Expert data given inline or as a path to a JSON object of key → values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<ExpertData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ExpertSource {
    pub fn inline(data: ExpertData) -> Self {
        Self { data: Some(data), path: None }
    }

    /// Loads a path-based source so that only inline data remains.
    pub fn resolve(&mut self, base_dir: &Path) -> Result<()> {
        match (&self.data, &self.path) {
            (Some(_), Some(_)) => Err(Error::config("expert", "give either `data` or `path`, not both")),
            (_, None) => Ok(()),
            (None, Some(p)) => {
                let full = base_dir.join(p);
                self.data = Some(read_expert_file(&full)?);
                self.path = None;
                Ok(())
            }
        }
    }

    pub fn data(&self) -> Result<&ExpertData> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::config("expert", "needs `data` or `path`"))
    }
}

pub fn read_expert_file(path: &Path) -> Result<ExpertData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let location = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            Error::config(location, inner.to_string())
        } else {
            Error::Json {
                origin: origin.to_string(),
                location,
                message: inner.to_string(),
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ParametricPrior,
    DeepPrior,
}

fn default_batch() -> usize {
    128
}
fn default_samples() -> usize {
    200
}
fn default_progress() -> u8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    /// Prior draws per batch, each giving one set of elicited statistics.
    #[serde(rename = "B", default = "default_batch")]
    pub batch_size: usize,
    /// Prior samples per batch element.
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    /// 0 silent, 1 per-epoch summary, 2 with loss components.
    #[serde(default = "default_progress")]
    pub progress: u8,
}

impl TrainerConfig {
    pub fn new(method: Method, seed: u64, epochs: usize) -> Self {
        Self {
            method,
            seed,
            epochs,
            batch_size: default_batch(),
            num_samples: default_samples(),
            progress: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("B", "batch size must be at least 1"));
        }
        if self.num_samples < 2 {
            return Err(Error::config("num_samples", "need at least 2 samples per batch"));
        }
        if self.progress > 2 {
            return Err(Error::config("progress", "must be 0, 1 or 2"));
        }
        Ok(())
    }
}

/// Everything needed to fit one prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub parameters: Vec<ParameterSpec>,
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub expert: ExpertSource,
    pub optimizer: OptimizerConfig,
    pub trainer: TrainerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initializer: Option<InitializerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub networks: Option<FlowConfig>,
}

/// Top-level sections that may be replaced by an update.
pub const SECTIONS: [&str; 8] = [
    "model",
    "parameters",
    "targets",
    "expert",
    "optimizer",
    "trainer",
    "initializer",
    "networks",
];

/// Expected length of each expert-data entry, keyed in target order.
/// `None` marks statistics whose length depends on the data.
pub type ExpertTemplate = Vec<(String, Option<usize>)>;

pub fn expert_template(targets: &[TargetSpec], num_params: usize, registry: &Registry) -> Result<ExpertTemplate> {
    targets
        .iter()
        .map(|t| {
            let len = match &t.query {
                QuerySpec::Quantiles { quantiles } => Some(quantiles.len()),
                QuerySpec::Identity => None,
                QuerySpec::Correlation => Some(correlation_pairs(num_params).len()),
                QuerySpec::Custom { name } => registry.query(name)?.output_len(),
            };
            Ok((t.key(), len))
        })
        .collect()
}

impl RunConfig {
    /// Parses and validates a configuration file; relative expert paths
    /// resolve against the file's directory.
    pub fn from_file(path: &Path, registry: &Registry) -> Result<Self> {
        let config = Self::read(path)?;
        config.validate(registry)?;
        Ok(config)
    }

    /// Parses a file and loads referenced expert data, without cross-checks.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_str(&text, base)
    }

    pub fn parse_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = parse_json(text, "configuration")?;
        config.expert.resolve(base_dir)?;
        Ok(config)
    }

    pub fn from_json_str(text: &str, base_dir: &Path, registry: &Registry) -> Result<Self> {
        let config = Self::parse_str(text, base_dir)?;
        config.validate(registry)?;
        Ok(config)
    }

    /// Builds a config from a JSON tree; relative expert paths resolve against
    /// the working directory.
    pub fn from_value(value: serde_json::Value, registry: &Registry) -> Result<Self> {
        Self::from_json_str(&value.to_string(), Path::new("."), registry)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn template(&self, registry: &Registry) -> Result<ExpertTemplate> {
        expert_template(&self.targets, self.parameters.len(), registry)
    }

    /// Cross-checks every section; errors carry the offending field path.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        self.validate_structure(registry)?;
        self.validate_expert(registry)
    }

    /// Every check except the expert data.
    pub fn validate_structure(&self, registry: &Registry) -> Result<()> {
        self.trainer.validate().map_err(|e| e.within("trainer"))?;
        self.optimizer.validate().map_err(|e| e.within("optimizer"))?;

        if self.parameters.is_empty() {
            return Err(Error::config("parameters", "at least one parameter is required"));
        }
        for (i, p) in self.parameters.iter().enumerate() {
            if self.parameters[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::config(format!("parameters[{i}].name"), format!("duplicate parameter `{}`", p.name)));
            }
        }

        let model = self.model.build(registry).map_err(|e| e.within("model"))?;
        let expected = model.parameter_names();
        let given = self.parameter_names();
        if expected != given {
            return Err(Error::config(
                "parameters",
                format!("model expects parameters ({}) in this order, got ({})", expected.join(", "), given.join(", ")),
            ));
        }

        match self.trainer.method {
            Method::ParametricPrior => self.validate_parametric()?,
            Method::DeepPrior => self.validate_deep()?,
        }

        self.validate_targets(&model.output_names(), registry)
    }

    fn validate_parametric(&self) -> Result<()> {
        if self.networks.is_some() {
            return Err(Error::config("networks", "parametric priors do not use networks; remove this section"));
        }
        let init = self
            .initializer
            .as_ref()
            .ok_or_else(|| Error::config("initializer", "parametric priors need an initializer"))?;
        init.validate().map_err(|e| e.within("initializer"))?;
        let prior = ParametricPrior::new(&self.parameters)?;
        let names = prior.hyper_names();
        match init.method {
            InitMethod::Sobol => {
                if names.len() > MAX_DIM {
                    return Err(Error::config(
                        "initializer",
                        format!("Sobol search supports at most {MAX_DIM} hyperparameters, got {}", names.len()),
                    ));
                }
                let b = init.distribution.as_ref().expect("validated");
                b.radius.expand(names.len(), "initializer.distribution.radius")?;
                b.mean.expand(names.len(), "initializer.distribution.mean")?;
            }
            InitMethod::Explicit => {
                let given = init.hyperparams.as_ref().expect("validated");
                if let Some(extra) = given.keys().find(|k| !names.contains(k)) {
                    return Err(Error::config(
                        "initializer.hyperparams",
                        format!("unknown hyperparameter `{extra}`; expected [{}]", names.join(", ")),
                    ));
                }
                for (name, c) in names.iter().zip(prior.hyper_constraints()) {
                    let at = format!("initializer.hyperparams.{name}");
                    let v = *given.get(name).ok_or_else(|| Error::config(&at, "missing starting value"))?;
                    c.unconstrain(v).map_err(|e| Error::config(&at, e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    fn validate_deep(&self) -> Result<()> {
        if self.initializer.is_some() {
            return Err(Error::config("initializer", "deep priors initialize network weights; remove this section"));
        }
        let net = self
            .networks
            .as_ref()
            .ok_or_else(|| Error::config("networks", "deep priors need a network configuration"))?;
        net.validate().map_err(|e| e.within("networks"))?;
        if net.num_params != self.parameters.len() {
            return Err(Error::config(
                "networks.num_params",
                format!("{} parameters are declared, got num_params = {}", self.parameters.len(), net.num_params),
            ));
        }
        for (i, p) in self.parameters.iter().enumerate() {
            if p.family.is_some() || p.hyperparams.is_some() {
                return Err(Error::config(
                    format!("parameters[{i}]"),
                    "deep priors take only a name and optional bounds",
                ));
            }
            p.constraint().validate().map_err(|e| e.within(&format!("parameters[{i}]")))?;
        }
        Ok(())
    }

    fn validate_targets(&self, outputs: &[String], registry: &Registry) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("targets", "at least one target is required"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            let at = format!("targets[{i}]");
            t.validate().map_err(|e| e.within(&at))?;
            if self.targets[..i].iter().any(|u| u.key() == t.key()) {
                return Err(Error::config(&at, format!("duplicate statistic `{}`", t.key())));
            }
            let available = || format!("available: {{{}}}", outputs.join(", "));
            if t.query == QuerySpec::Correlation {
                if t.target_method.is_some() {
                    return Err(Error::config(format!("{at}.target_method"), "correlation queries act on the prior samples"));
                }
                if self.parameters.len() < 2 {
                    return Err(Error::config(format!("{at}.query"), "correlation needs at least two parameters"));
                }
            } else if let Some(method) = &t.target_method {
                let transform = registry.transform(method).map_err(|e| e.within(&format!("{at}.target_method")))?;
                if let Some(missing) = transform.inputs().into_iter().find(|n| !outputs.contains(n)) {
                    return Err(Error::config(
                        format!("{at}.target_method"),
                        format!("`{method}` needs model output `{missing}`; {}", available()),
                    ));
                }
            } else if !outputs.contains(&t.name) {
                return Err(Error::config(
                    format!("{at}.name"),
                    format!("no model output `{}`; {}", t.name, available()),
                ));
            }
            if let QuerySpec::Custom { name } = &t.query {
                registry.query(name).map_err(|e| e.within(&format!("{at}.query")))?;
            }
            if let LossSpec::Custom { name } = &t.loss {
                registry.loss(name).map_err(|e| e.within(&format!("{at}.loss")))?;
            }
        }
        Ok(())
    }

    fn validate_expert(&self, registry: &Registry) -> Result<()> {
        let data = self.expert.data()?;
        let template = self.template(registry)?;
        let describe = || {
            template
                .iter()
                .map(|(k, n)| match n {
                    Some(n) => format!("{k}: {n} values"),
                    None => format!("{k}: any length"),
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        for (key, len) in &template {
            let values = data.get(key).ok_or_else(|| {
                Error::config("expert.data", format!("missing `{key}`; expected {{{}}}", describe()))
            })?;
            if let Some(n) = len {
                if values.len() != *n {
                    return Err(Error::config(
                        format!("expert.data.{key}"),
                        format!("expected {n} values, got {}", values.len()),
                    ));
                }
            }
            if values.is_empty() {
                return Err(Error::config(format!("expert.data.{key}"), "no values"));
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::config(format!("expert.data.{key}"), format!("non-finite value {v}")));
            }
        }
        let known: BTreeSet<&str> = template.iter().map(|(k, _)| k.as_str()).collect();
        if let Some(extra) = data.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::config(
                "expert.data",
                format!("unexpected key `{extra}`; expected {{{}}}", describe()),
            ));
        }
        Ok(())
    }
}
