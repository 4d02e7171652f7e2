//! Discrepancy measures and weighted total-loss assembly.

use std::collections::BTreeMap;

use elicit_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::targets::TargetSpec;

/// Expert-elicited statistics keyed like the model's elicited statistics.
pub type ExpertData = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Energy,
    Gaussian,
}

/// Discrepancy selection as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    L2,
    Mmd2 {
        kernel: KernelKind,
        /// Bandwidth, required for the gaussian kernel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    Custom {
        name: String,
    },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Mmd2 { kernel, sigma } = self {
            self.kernel()?;
            if *kernel == KernelKind::Energy && sigma.is_some() {
                return Err(Error::config("sigma", "the energy kernel takes no bandwidth"));
            }
        }
        Ok(())
    }

    fn kernel(&self) -> Result<Kernel> {
        match self {
            LossSpec::Mmd2 { kernel: KernelKind::Energy, .. } => Ok(Kernel::Energy),
            LossSpec::Mmd2 { kernel: KernelKind::Gaussian, sigma } => match sigma {
                Some(s) if *s > 0.0 && s.is_finite() => Ok(Kernel::Gaussian { sigma: *s }),
                Some(s) => Err(Error::config("sigma", format!("bandwidth must be positive, got {s}"))),
                None => Err(Error::config("sigma", "the gaussian kernel requires an explicit bandwidth")),
            },
            _ => Err(Error::config("kind", "not a kernel loss")),
        }
    }

    /// Evaluates the unweighted discrepancy of `model` `[B, m]` against `expert`.
    pub fn evaluate<'t>(&self, model: Var<'t>, expert: &[f64], registry: &Registry) -> Result<Var<'t>> {
        match self {
            LossSpec::L2 => l2(model, expert),
            LossSpec::Mmd2 { .. } => mmd2_biased(model, expert, self.kernel()?),
            LossSpec::Custom { name } => registry.loss(name)?.evaluate(model, expert),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `k(a, b) = -|a - b|`
    Energy,
    /// `k(a, b) = exp(-(a - b)² / (2σ²))`
    Gaussian { sigma: f64 },
}

fn check_matrix(model: Var<'_>) -> Result<(usize, usize)> {
    match model.shape().as_slice() {
        &[b, m] => Ok((b, m)),
        other => Err(Error::config("", format!("statistics must be [B, m], got {other:?}"))),
    }
}

/// Mean over batch and statistic axes of squared differences to `expert`.
pub fn l2<'t>(model: Var<'t>, expert: &[f64]) -> Result<Var<'t>> {
    let (_, m) = check_matrix(model)?;
    if m != expert.len() {
        return Err(Error::config(
            "",
            format!("model statistic has length {m}, expert vector has {}", expert.len()),
        ));
    }
    let target = model.tape().constant(Tensor::vector(expert.to_vec()));
    Ok(model.sub(target)?.square().mean_all())
}

/// Mean kernel value over all pairs of `[B, n]` and `[B or 1, n']` samples, per batch element.
fn mean_kernel<'t>(a: Var<'t>, b: Var<'t>, kernel: Kernel) -> Result<Var<'t>> {
    let (ab, n) = (a.shape()[0], a.shape()[1]);
    let (bb, m) = (b.shape()[0], b.shape()[1]);
    let diff = a.reshape(&[ab, n, 1])?.sub(b.reshape(&[bb, 1, m])?)?;
    let k = match kernel {
        Kernel::Energy => diff.abs().neg(),
        Kernel::Gaussian { sigma } => diff.square().mul_scalar(-0.5 / (sigma * sigma)).exp(),
    };
    Ok(k.mean(&[1, 2], false)?)
}

/// Biased squared MMD between each row of `x` `[B, n]` and the sample `y`,
/// averaged over the batch.
pub fn mmd2_biased<'t>(x: Var<'t>, y: &[f64], kernel: Kernel) -> Result<Var<'t>> {
    check_matrix(x)?;
    if y.is_empty() || x.shape()[1] == 0 {
        return Err(Error::config("", "MMD needs non-empty sample sets"));
    }
    if let Kernel::Gaussian { sigma } = kernel {
        if !(sigma > 0.0) {
            return Err(Error::config("sigma", format!("bandwidth must be positive, got {sigma}")));
        }
    }
    let yv = x.tape().constant(Tensor::new(vec![1, y.len()], y.to_vec())?);
    let kxx = mean_kernel(x, x, kernel)?;
    let kyy = mean_kernel(yv, yv, kernel)?;
    let kxy = mean_kernel(x, yv, kernel)?;
    Ok(kxx.add(kyy)?.sub(kxy.mul_scalar(2.0))?.mean_all())
}

/// Total loss with its weighted components `L_m = w_m · D_m`.
#[derive(Debug, Clone)]
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub components: Vec<(String, Var<'t>)>,
}

impl LossBreakdown<'_> {
    pub fn component_values(&self) -> Vec<f64> {
        self.components.iter().map(|(_, v)| v.item()).collect()
    }
}

/// Weighted sum of per-statistic discrepancies.
pub fn total_loss<'t>(
    stats: &[(String, Var<'t>)],
    expert: &ExpertData,
    specs: &[TargetSpec],
    registry: &Registry,
) -> Result<LossBreakdown<'t>> {
    let mut components = Vec::with_capacity(specs.len());
    for spec in specs {
        let key = spec.key();
        let model = stats
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config(format!("statistics.{key}"), "statistic was not computed"))?;
        let target = expert.get(&key).ok_or_else(|| {
            let template: Vec<String> = specs.iter().map(TargetSpec::key).collect();
            Error::config(
                format!("expert.{key}"),
                format!("missing expert statistic; expected keys [{}]", template.join(", ")),
            )
        })?;
        let d = spec
            .loss
            .evaluate(model, target, registry)
            .map_err(|e| e.within(&format!("expert.{key}")))?;
        components.push((key, d.mul_scalar(spec.weight)));
    }
    let total = match components.split_first() {
        None => stats
            .first()
            .map(|(_, v)| v.tape().scalar(0.0))
            .ok_or_else(|| Error::config("targets", "at least one target is required"))?,
        Some(((_, first), rest)) => {
            let mut acc = *first;
            for (_, c) in rest {
                acc = acc.add(*c)?;
            }
            acc
        }
    };
    Ok(LossBreakdown { total, components })
}
