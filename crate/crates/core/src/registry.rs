//! Library-level extension points: user models, transforms, queries and losses.

use std::collections::BTreeMap;
use std::sync::Arc;

use elicit_autodiff::Var;

use crate::error::{Error, Result};
use crate::models::{GenerativeModel, ModelFactory, ModelRegistry};
use crate::targets::r2;

/// Computes a target quantity from named model outputs.
pub trait TargetTransform: Send + Sync {
    /// Output names consumed, in the order passed to [`apply`](Self::apply).
    fn inputs(&self) -> Vec<String>;

    /// Returns a tensor with leading axes `[B, S]`.
    fn apply<'t>(&self, inputs: &[Var<'t>]) -> Result<Var<'t>>;
}

/// Turns a target quantity `[B, ...]` into elicited statistics `[B, m]`.
pub trait CustomQuery: Send + Sync {
    fn apply<'t>(&self, target: Var<'t>) -> Result<Var<'t>>;

    /// Statistic length when it does not depend on the sample size.
    fn output_len(&self) -> Option<usize> {
        None
    }
}

/// Discrepancy between model statistics `[B, m]` and an expert vector; returns a scalar.
pub trait Discrepancy: Send + Sync {
    fn evaluate<'t>(&self, model: Var<'t>, expert: &[f64]) -> Result<Var<'t>>;
}

struct R2Transform;

impl TargetTransform for R2Transform {
    fn inputs(&self) -> Vec<String> {
        vec!["mu".into(), "y".into()]
    }

    fn apply<'t>(&self, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        r2(inputs[0], inputs[1])
    }
}

/// All named plug-ins available to a run. [`Registry::default`] holds the
/// built-in `r2` transform.
#[derive(Clone)]
pub struct Registry {
    models: ModelRegistry,
    transforms: BTreeMap<String, Arc<dyn TargetTransform>>,
    queries: BTreeMap<String, Arc<dyn CustomQuery>>,
    losses: BTreeMap<String, Arc<dyn Discrepancy>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            models: ModelRegistry::default(),
            transforms: BTreeMap::new(),
            queries: BTreeMap::new(),
            losses: BTreeMap::new(),
        };
        r.register_transform("r2", Arc::new(R2Transform));
        r
    }
}

fn unknown(kind: &str, name: &str, available: Vec<String>, location: &str) -> Error {
    Error::config(
        location,
        format!("unknown {kind} `{name}`; available: [{}]", available.join(", ")),
    )
}

impl Registry {
    pub fn register_model(&mut self, name: impl Into<String>, factory: ModelFactory) {
        self.models.register(name, factory);
    }

    pub fn register_transform(&mut self, name: impl Into<String>, t: Arc<dyn TargetTransform>) {
        self.transforms.insert(name.into(), t);
    }

    pub fn register_query(&mut self, name: impl Into<String>, q: Arc<dyn CustomQuery>) {
        self.queries.insert(name.into(), q);
    }

    pub fn register_loss(&mut self, name: impl Into<String>, d: Arc<dyn Discrepancy>) {
        self.losses.insert(name.into(), d);
    }

    pub fn build_model(&self, name: &str, context: &serde_json::Value) -> Result<Arc<dyn GenerativeModel>> {
        self.models.build(name, context)
    }

    pub fn transform(&self, name: &str) -> Result<&Arc<dyn TargetTransform>> {
        self.transforms.get(name).ok_or_else(|| {
            unknown("transform", name, self.transforms.keys().cloned().collect(), "target_method")
        })
    }

    pub fn query(&self, name: &str) -> Result<&Arc<dyn CustomQuery>> {
        self.queries
            .get(name)
            .ok_or_else(|| unknown("query", name, self.queries.keys().cloned().collect(), "query.name"))
    }

    pub fn loss(&self, name: &str) -> Result<&Arc<dyn Discrepancy>> {
        self.losses
            .get(name)
            .ok_or_else(|| unknown("loss", name, self.losses.keys().cloned().collect(), "loss.name"))
    }
}
