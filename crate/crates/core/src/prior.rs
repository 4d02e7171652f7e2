//! Independent parametric priors with trainable, constrained hyperparameters.

use std::collections::BTreeMap;

use elicit_autodiff::Var;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::distributions::Family;
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// A named scalar hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    /// Allows several prior slots to reference this hyperparameter.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shared: bool,
}

impl HyperSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            lower: None,
            upper: None,
            shared: false,
        }
    }

    pub fn positive(name: impl Into<String>) -> Self {
        Self {
            lower: Some(0.0),
            ..Self::new(name)
        }
    }

    pub fn constraint(&self) -> ConstraintSpec {
        ConstraintSpec {
            lower: self.lower,
            upper: self.upper,
        }
    }
}

/// One model parameter: a family with hyperparameters (parametric mode) or
/// just a name and domain (deep mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<BTreeMap<String, HyperSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl ParameterSpec {
    pub fn parametric(name: impl Into<String>, family: Family, hyperparams: &[(&str, HyperSpec)]) -> Self {
        Self {
            name: name.into(),
            family: Some(family),
            hyperparams: Some(hyperparams.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()),
            lower: None,
            upper: None,
        }
    }

    pub fn free(name: impl Into<String>, lower: Option<f64>) -> Self {
        Self {
            name: name.into(),
            family: None,
            hyperparams: None,
            lower,
            upper: None,
        }
    }

    pub fn constraint(&self) -> ConstraintSpec {
        ConstraintSpec {
            lower: self.lower,
            upper: self.upper,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    family: Family,
    hypers: Vec<usize>,
}

/// Resolved parametric prior: a table of unique hyperparameters and, per
/// parameter, a family bound to entries of that table.
#[derive(Debug, Clone)]
pub struct ParametricPrior {
    hypers: Vec<HyperSpec>,
    slots: Vec<Slot>,
}

impl ParametricPrior {
    pub fn new(parameters: &[ParameterSpec]) -> Result<Self> {
        let mut hypers: Vec<HyperSpec> = Vec::new();
        let mut slots = Vec::with_capacity(parameters.len());
        for (i, p) in parameters.iter().enumerate() {
            let at = |field: &str| format!("parameters[{i}].{field}");
            let family = p
                .family
                .ok_or_else(|| Error::config(at("family"), "parametric priors need a family"))?;
            let given = p
                .hyperparams
                .as_ref()
                .ok_or_else(|| Error::config(at("hyperparams"), "parametric priors need hyperparameters"))?;
            if p.lower.is_some() || p.upper.is_some() {
                return Err(Error::config(
                    at("lower"),
                    "parameter bounds apply to deep priors; constrain the hyperparameters instead",
                ));
            }
            let roles = family.parameter_names();
            if let Some(extra) = given.keys().find(|k| !roles.contains(&k.as_str())) {
                return Err(Error::config(
                    at("hyperparams"),
                    format!("{family:?} has no parameter `{extra}`; expected {roles:?}"),
                ));
            }
            let mut indices = Vec::with_capacity(roles.len());
            for role in roles {
                let h = given.get(*role).ok_or_else(|| {
                    Error::config(at("hyperparams"), format!("missing `{role}`; {family:?} needs {roles:?}"))
                })?;
                h.constraint().validate().map_err(|e| e.within(&at(&format!("hyperparams.{role}"))))?;
                let index = match hypers.iter().position(|e| e.name == h.name) {
                    Some(j) => {
                        let existing = &hypers[j];
                        if !(existing.shared && h.shared) {
                            return Err(Error::config(
                                at(&format!("hyperparams.{role}")),
                                format!("hyperparameter `{}` is used twice; mark every use as shared", h.name),
                            ));
                        }
                        if existing.constraint() != h.constraint() {
                            return Err(Error::config(
                                at(&format!("hyperparams.{role}")),
                                format!("shared hyperparameter `{}` has conflicting bounds", h.name),
                            ));
                        }
                        j
                    }
                    None => {
                        hypers.push(h.clone());
                        hypers.len() - 1
                    }
                };
                indices.push(index);
            }
            slots.push(Slot {
                name: p.name.clone(),
                family,
                hypers: indices,
            });
        }
        Ok(Self { hypers, slots })
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.hypers.iter().map(|h| h.name.clone()).collect()
    }

    pub fn hyper_constraints(&self) -> Vec<ConstraintSpec> {
        self.hypers.iter().map(HyperSpec::constraint).collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    /// Constrained hyperparameter nodes from unconstrained scalar leaves.
    pub fn constrained<'t>(&self, leaves: &[Var<'t>]) -> Vec<Var<'t>> {
        self.hypers.iter().zip(leaves).map(|(h, u)| h.constraint().constrain(*u)).collect()
    }

    /// Draws `[b, s, P]` prior samples, one noise block per parameter in order.
    pub fn sample<'t>(&self, leaves: &[Var<'t>], b: usize, s: usize, noise: &mut NoiseStream) -> Result<Var<'t>> {
        if leaves.len() != self.hypers.len() {
            return Err(Error::config(
                "initializer",
                format!("expected {} hyperparameters, got {}", self.hypers.len(), leaves.len()),
            ));
        }
        let tape = leaves
            .first()
            .ok_or_else(|| Error::config("parameters", "no hyperparameters"))?
            .tape();
        let values = self.constrained(leaves);
        let mut columns = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let bound: Vec<Var<'t>> = slot.hypers.iter().map(|&j| values[j]).collect();
            let draw = slot
                .family
                .bind(&bound)?
                .sample(&[b, s], noise)
                .map_err(|e| match e {
                    Error::Domain { what, detail } => Error::domain(format!("{what} of `{}`", slot.name), detail),
                    other => other,
                })?;
            columns.push(draw.reshape(&[b, s, 1])?);
        }
        Ok(tape.concat(&columns, 2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use elicit_autodiff::{Tape, Tensor};

    pub(crate) fn regression_parameters() -> Vec<ParameterSpec> {
        let mut ps: Vec<ParameterSpec> = (0..3)
            .map(|i| {
                ParameterSpec::parametric(
                    format!("beta{i}"),
                    Family::Normal,
                    &[("loc", HyperSpec::new(format!("mu{i}"))), ("scale", HyperSpec::positive(format!("sigma{i}")))],
                )
            })
            .collect();
        ps.push(ParameterSpec::parametric("sigma", Family::HalfNormal, &[("scale", HyperSpec::positive("sigma3"))]));
        ps
    }

    #[test]
    fn hyperparameter_order_follows_parameters() {
        let prior = ParametricPrior::new(&regression_parameters()).unwrap();
        assert_eq!(prior.hyper_names(), ["mu0", "sigma0", "mu1", "sigma1", "mu2", "sigma2", "sigma3"]);
    }

    #[test]
    fn shared_hyperparameters_appear_once() {
        let mut shared = HyperSpec::positive("tau");
        shared.shared = true;
        let ps = vec![
            ParameterSpec::parametric("a", Family::HalfNormal, &[("scale", shared.clone())]),
            ParameterSpec::parametric("b", Family::HalfNormal, &[("scale", shared)]),
        ];
        let prior = ParametricPrior::new(&ps).unwrap();
        assert_eq!(prior.hyper_names(), ["tau"]);

        let ps = vec![
            ParameterSpec::parametric("a", Family::HalfNormal, &[("scale", HyperSpec::positive("tau"))]),
            ParameterSpec::parametric("b", Family::HalfNormal, &[("scale", HyperSpec::positive("tau"))]),
        ];
        assert!(ParametricPrior::new(&ps).is_err());
    }

    #[test]
    fn missing_role_is_reported() {
        let ps = vec![ParameterSpec::parametric("a", Family::Normal, &[("loc", HyperSpec::new("m"))])];
        let err = ParametricPrior::new(&ps).unwrap_err();
        assert!(err.to_string().contains("missing `scale`"), "{err}");
    }

    #[test]
    fn samples_have_expected_shape_and_support() {
        let prior = ParametricPrior::new(&regression_parameters()).unwrap();
        let tape = Tape::new();
        let leaves: Vec<Var> = (0..7).map(|i| tape.leaf(Tensor::scalar(0.1 * i as f64))).collect();
        let theta = prior.sample(&leaves, 4, 50, &mut SeededRng::new(1).stream(0, "p")).unwrap();
        assert_eq!(theta.shape(), vec![4, 50, 4]);
        let v = theta.value();
        assert!(v.data().chunks(4).all(|row| row[3] >= 0.0));
        drop(v);
        let g = tape.backward(theta.sum_all()).unwrap();
        for leaf in &leaves {
            assert!(g.wrt(*leaf).l2_norm() > 0.0);
        }
    }
}
