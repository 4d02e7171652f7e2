//! Starting values for parametric-prior hyperparameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorKind, Result};
use crate::sobol::sobol_points;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Sobol,
    Explicit,
}

/// A value shared by all dimensions or given per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDimension {
    Shared(f64),
    Each(Vec<f64>),
}

impl PerDimension {
    pub fn expand(&self, dim: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            PerDimension::Shared(v) => Ok(vec![*v; dim]),
            PerDimension::Each(v) if v.len() == dim => Ok(v.clone()),
            PerDimension::Each(v) => Err(Error::config(
                field,
                format!("expected {dim} values (one per hyperparameter), got {}", v.len()),
            )),
        }
    }
}

/// Search box `mean ± radius` per dimension, in unconstrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBox {
    pub radius: PerDimension,
    pub mean: PerDimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitializerConfig {
    pub method: InitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<SearchBox>,
    /// Explicit starting values on the constrained scale, by hyperparameter name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<BTreeMap<String, f64>>,
}

impl InitializerConfig {
    pub fn sobol(iterations: usize, radius: f64, mean: f64) -> Self {
        Self {
            method: InitMethod::Sobol,
            iterations: Some(iterations),
            distribution: Some(SearchBox {
                radius: PerDimension::Shared(radius),
                mean: PerDimension::Shared(mean),
            }),
            hyperparams: None,
        }
    }

    pub fn explicit(values: BTreeMap<String, f64>) -> Self {
        Self {
            method: InitMethod::Explicit,
            iterations: None,
            distribution: None,
            hyperparams: Some(values),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            InitMethod::Sobol => {
                match self.iterations {
                    Some(n) if n >= 1 => {}
                    _ => return Err(Error::config("iterations", "Sobol search needs iterations ≥ 1")),
                }
                let Some(b) = &self.distribution else {
                    return Err(Error::config("distribution", "Sobol search needs a radius and mean"));
                };
                let radii = match &b.radius {
                    PerDimension::Shared(r) => vec![*r],
                    PerDimension::Each(r) => r.clone(),
                };
                if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
                    return Err(Error::config("distribution.radius", format!("must be positive, got {r}")));
                }
                if self.hyperparams.is_some() {
                    return Err(Error::config("hyperparams", "explicit values are only used with method `explicit`"));
                }
            }
            InitMethod::Explicit => {
                if self.hyperparams.is_none() {
                    return Err(Error::config("hyperparams", "method `explicit` needs hyperparameter values"));
                }
            }
        }
        Ok(())
    }
}

/// Candidate starting points of a Sobol search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDiagnostics {
    /// `[iterations × dim]`, unconstrained.
    pub init_matrix: Vec<Vec<f64>>,
    /// Screening loss per candidate; `None` when non-finite.
    pub init_loss_list: Vec<Option<f64>>,
    pub selected_index: usize,
}

/// The first `iterations` Sobol points mapped to `mean ± radius`.
pub fn sobol_candidates(dim: usize, iterations: usize, search: &SearchBox) -> Result<Vec<Vec<f64>>> {
    let radius = search.radius.expand(dim, "distribution.radius")?;
    let mean = search.mean.expand(dim, "distribution.mean")?;
    Ok(sobol_points(dim, iterations)?
        .into_iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(d, u)| mean[d] - radius[d] + 2.0 * radius[d] * u)
                .collect()
        })
        .collect())
}

/// Index of the smallest finite loss; ties go to the lowest index.
pub fn argmin_finite(losses: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, l) in losses.iter().enumerate() {
        if let Some(l) = l.filter(|l| l.is_finite()) {
            if best.is_none_or(|(_, b)| l < b) {
                best = Some((i, l));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Evaluates every candidate and returns the best one with diagnostics.
///
/// Numerical failures of a single candidate count as non-finite losses;
/// configuration errors abort the search.
pub fn screen_and_select(
    candidates: Vec<Vec<f64>>,
    mut evaluate: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, InitDiagnostics)> {
    let mut losses = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let loss = match evaluate(c) {
            Ok(l) if l.is_finite() => Some(l),
            Ok(_) => None,
            Err(e) if e.kind() == ErrorKind::Numerical => None,
            Err(e) => return Err(e),
        };
        losses.push(loss);
    }
    match argmin_finite(&losses) {
        Some(i) => Ok((
            candidates[i].clone(),
            InitDiagnostics {
                init_matrix: candidates,
                init_loss_list: losses,
                selected_index: i,
            },
        )),
        None => Err(Error::Initialization {
            diagnostics: Box::new(InitDiagnostics {
                init_matrix: candidates,
                init_loss_list: losses,
                selected_index: 0,
            }),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(radius: f64, mean: f64) -> SearchBox {
        SearchBox {
            radius: PerDimension::Shared(radius),
            mean: PerDimension::Shared(mean),
        }
    }

    #[test]
    fn single_candidate_is_box_center() {
        let c = sobol_candidates(1, 1, &unit_box(2.0, 0.0)).unwrap();
        assert_eq!(c, vec![vec![0.0]]);
    }

    #[test]
    fn candidates_stay_in_box_and_repeat() {
        let b = SearchBox {
            radius: PerDimension::Each(vec![2.0, 0.5, 1.0]),
            mean: PerDimension::Each(vec![0.0, 3.0, -1.0]),
        };
        let c = sobol_candidates(3, 64, &b).unwrap();
        for p in &c {
            assert!((-2.0..=2.0).contains(&p[0]));
            assert!((2.5..=3.5).contains(&p[1]));
            assert!((-2.0..=0.0).contains(&p[2]));
        }
        assert_eq!(c, sobol_candidates(3, 64, &b).unwrap());
        assert!(sobol_candidates(2, 4, &b).is_err());
    }

    #[test]
    fn selection_rules() {
        let pick = |losses: Vec<f64>| {
            let cands: Vec<Vec<f64>> = (0..losses.len()).map(|i| vec![i as f64]).collect();
            let mut it = losses.into_iter();
            screen_and_select(cands, |_| Ok(it.next().unwrap())).map(|(_, d)| d.selected_index)
        };
        assert_eq!(pick(vec![5.0, 2.0]).unwrap(), 1);
        assert_eq!(pick(vec![f64::NAN, 3.0, 1.0, f64::INFINITY]).unwrap(), 2);
        assert_eq!(pick(vec![1.0, 0.5, 0.5]).unwrap(), 1);
        let err = pick(vec![f64::NAN, f64::NAN]).unwrap_err();
        match err {
            Error::Initialization { diagnostics } => assert_eq!(diagnostics.init_loss_list, vec![None, None]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn configuration_errors_propagate() {
        let r = screen_and_select(vec![vec![0.0]], |_| Err(Error::config("x", "bad")));
        assert!(matches!(r, Err(Error::Config { .. })));
        let r = screen_and_select(vec![vec![0.0], vec![1.0]], |c| {
            if c[0] == 0.0 {
                Err(Error::domain("scale", "negative"))
            } else {
                Ok(4.0)
            }
        });
        assert_eq!(r.unwrap().1.selected_index, 1);
    }

    #[test]
    fn validation() {
        assert!(InitializerConfig::sobol(32, 2.0, 0.0).validate().is_ok());
        assert!(InitializerConfig::sobol(0, 2.0, 0.0).validate().is_err());
        assert!(InitializerConfig::sobol(4, 0.0, 0.0).validate().is_err());
        let mut c = InitializerConfig::sobol(4, 1.0, 0.0);
        c.distribution = None;
        assert!(c.validate().is_err());
    }
}
