//! Target quantities and the queries that turn them into elicited statistics.

use std::collections::BTreeMap;

use elicit_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::models::GenerativeOutput;
use crate::registry::Registry;

/// How a target quantity is interrogated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuerySpec {
    Quantiles { quantiles: Vec<f64> },
    Identity,
    /// Pairwise Pearson correlation between model parameters.
    Correlation,
    Custom { name: String },
}

impl QuerySpec {
    /// Prefix of the elicited-statistic key.
    pub fn key_prefix(&self) -> &'static str {
        match self {
            QuerySpec::Quantiles { .. } => "quantiles",
            QuerySpec::Identity => "identity",
            QuerySpec::Correlation => "cor",
            QuerySpec::Custom { .. } => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let QuerySpec::Quantiles { quantiles } = self {
            check_probabilities(quantiles)?;
        }
        Ok(())
    }
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::config("quantiles", "at least one probability is required"));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::config("quantiles", format!("probability {p} is outside (0, 1)")));
    }
    if probs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("quantiles", "probabilities must be strictly increasing"));
    }
    Ok(())
}

fn default_weight() -> f64 {
    1.0
}

/// One elicited statistic: which quantity, how it is queried, how it is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    pub query: QuerySpec,
    pub loss: LossSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_method: Option<String>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl TargetSpec {
    /// Key shared by elicited statistics and expert data: `<kind>_<name>`.
    pub fn key(&self) -> String {
        format!("{}_{}", self.query.key_prefix(), self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "target name must not be empty"));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::config("weight", format!("weight must be finite and ≥ 0, got {}", self.weight)));
        }
        self.query.validate().map_err(|e| e.within("query"))?;
        self.loss.validate().map_err(|e| e.within("loss"))?;
        Ok(())
    }
}

/// Resolves each spec's target quantity, keyed by target name.
///
/// Correlation queries act on the prior samples `[B, S, P]` directly.
pub fn compute_targets<'t>(
    output: &GenerativeOutput<'t>,
    prior_samples: Var<'t>,
    specs: &[TargetSpec],
    registry: &Registry,
) -> Result<BTreeMap<String, Var<'t>>> {
    let mut targets = BTreeMap::new();
    for (i, spec) in specs.iter().enumerate() {
        let value = if spec.query == QuerySpec::Correlation {
            prior_samples
        } else if let Some(method) = &spec.target_method {
            let transform = registry.transform(method).map_err(|e| e.within(&format!("targets[{i}]")))?;
            let inputs = transform
                .inputs()
                .iter()
                .map(|name| lookup(output, name, &format!("targets[{i}].target_method")))
                .collect::<Result<Vec<_>>>()?;
            transform.apply(&inputs)?
        } else {
            lookup(output, &spec.name, &format!("targets[{i}].name"))?
        };
        targets.insert(spec.name.clone(), value);
    }
    Ok(targets)
}

fn lookup<'t>(output: &GenerativeOutput<'t>, name: &str, location: &str) -> Result<Var<'t>> {
    output.get(name).ok_or_else(|| {
        Error::config(
            location,
            format!("no model output `{name}`; available: {{{}}}", output.names().join(", ")),
        )
    })
}

/// Applies each spec's query to its target, returning `(key, [B, m])` in spec order.
pub fn compute_elicited_statistics<'t>(
    targets: &BTreeMap<String, Var<'t>>,
    specs: &[TargetSpec],
    registry: &Registry,
) -> Result<Vec<(String, Var<'t>)>> {
    let mut out: Vec<(String, Var<'t>)> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let key = spec.key();
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(format!("targets[{i}]"), format!("duplicate statistic key `{key}`")));
        }
        let target = targets.get(&spec.name).copied().ok_or_else(|| {
            Error::config(format!("targets[{i}].name"), format!("target `{}` was not computed", spec.name))
        })?;
        let stat = match &spec.query {
            QuerySpec::Quantiles { quantiles: q } => quantiles(target, q)?,
            QuerySpec::Identity => identity(target)?,
            QuerySpec::Correlation => pairwise_correlation(target)?,
            QuerySpec::Custom { name } => {
                let query = registry.query(name).map_err(|e| e.within(&format!("targets[{i}]")))?;
                flatten_batch(query.apply(target)?)?
            }
        };
        out.push((key, stat));
    }
    Ok(out)
}

fn flatten_batch(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let b = shape.first().copied().unwrap_or(1);
    let rest: usize = shape.iter().skip(1).product();
    Ok(x.reshape(&[b, rest])?)
}

/// Coefficient of determination `Var(mu) / Var(y)` over the last axis
/// (population variance).
pub fn r2<'t>(mu: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != y.shape() {
        return Err(Error::config(
            "r2",
            format!("mu {:?} and y {:?} must have the same shape", mu.shape(), y.shape()),
        ));
    }
    let axis = mu.shape().len().checked_sub(1).ok_or_else(|| Error::config("r2", "inputs must have an observation axis"))?;
    Ok(mu.variance(&[axis], false)?.div(y.variance(&[axis], false)?)?)
}

/// Empirical quantiles of all non-batch values per batch element, by linear
/// interpolation between order statistics at position `q (n - 1)`.
pub fn quantiles<'t>(target: Var<'t>, probs: &[f64]) -> Result<Var<'t>> {
    check_probabilities(probs)?;
    let flat = flatten_batch(target)?;
    let n = flat.shape()[1];
    if n < 2 {
        return Err(Error::config("quantiles", format!("need at least 2 values per batch element, got {n}")));
    }
    let mut lower = Vec::with_capacity(probs.len());
    let mut upper = Vec::with_capacity(probs.len());
    let mut frac = Vec::with_capacity(probs.len());
    for &q in probs {
        let pos = q * (n - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        lower.push(lo);
        upper.push((lo + 1).min(n - 1));
        frac.push(pos - lo as f64);
    }
    let tape = target.tape();
    let w_hi = tape.constant(Tensor::vector(frac.clone()));
    let w_lo = tape.constant(Tensor::vector(frac.iter().map(|f| 1.0 - f).collect()));
    let k = probs.len();
    let ranks: Vec<usize> = lower.iter().chain(&upper).copied().collect();
    let picked = flat.order_statistics(1, &ranks)?;
    let lo = picked.slice(1, 0, k)?.mul(w_lo)?;
    let hi = picked.slice(1, k, 2 * k)?.mul(w_hi)?;
    Ok(lo.add(hi)?)
}

/// All values per batch element, flattened to `[B, n]`.
pub fn identity(target: Var<'_>) -> Result<Var<'_>> {
    flatten_batch(target)
}

/// Row-major upper-triangle pairs `(0,1), (0,2), ..., (P-2, P-1)`.
pub fn correlation_pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect()
}

/// Pearson correlations over the sample axis of `[B, S, P]`, giving `[B, P(P-1)/2]`.
pub fn pairwise_correlation(samples: Var<'_>) -> Result<Var<'_>> {
    let shape = samples.shape();
    let &[_, s, p] = shape.as_slice() else {
        return Err(Error::config("correlation", format!("expected samples [B, S, P], got {shape:?}")));
    };
    if s < 2 || p < 2 {
        return Err(Error::config("correlation", format!("need S ≥ 2 and P ≥ 2, got S={s}, P={p}")));
    }
    let pairs = correlation_pairs(p);
    let (first, second): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let centered = samples.sub(samples.mean(&[1], true)?)?;
    let cov = centered
        .gather(2, &first)?
        .mul(centered.gather(2, &second)?)?
        .mean(&[1], false)?;
    let sd = centered.square().mean(&[1], false)?.sqrt()?;
    let denom = sd.gather(1, &first)?.mul(sd.gather(1, &second)?)?;
    Ok(cov.div(denom)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NormalRegression;
    use crate::rng::SeededRng;
    use elicit_autodiff::Tape;

    fn values(v: Var<'_>) -> Vec<f64> {
        v.value().data().to_vec()
    }

    #[test]
    fn quantile_examples() {
        let tape = Tape::new();
        let probs = [0.25, 0.5, 0.75];
        let a = tape.constant(Tensor::new(vec![1, 5], vec![4.0, 0.0, 3.0, 1.0, 2.0]).unwrap());
        assert_eq!(values(quantiles(a, &probs).unwrap()), vec![1.0, 2.0, 3.0]);
        let b = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(values(quantiles(b, &probs).unwrap()), vec![1.75, 2.5, 3.25]);
    }

    #[test]
    fn quantiles_flatten_non_batch_axes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let q = quantiles(x, &[0.5]).unwrap();
        assert_eq!(q.shape(), vec![2, 1]);
        assert_eq!(values(q), vec![2.5, 8.5]);
    }

    #[test]
    fn quantile_gradient_splits_between_neighbours() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![4.0, 1.0, 3.0, 2.0]).unwrap());
        let q = quantiles(x, &[0.75]).unwrap().sum_all();
        let g = tape.backward(q).unwrap();
        // position 2.25 interpolates sorted[2] = 3 (weight 0.75) and sorted[3] = 4 (0.25)
        assert_eq!(g.wrt(x).data(), &[0.25, 0.0, 0.75, 0.0]);
    }

    #[test]
    fn quantile_contract_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(quantiles(x, &[0.0, 0.5]).is_err());
        assert!(quantiles(x, &[0.5, 0.5]).is_err());
        assert!(quantiles(x, &[1.2]).is_err());
        let one = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(quantiles(one, &[0.5]).is_err());
    }

    #[test]
    fn r2_examples() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap());
        assert_eq!(values(r2(mu, y).unwrap()), vec![0.25]);
        assert_eq!(values(r2(y, y).unwrap()), vec![1.0]);
        let flat = tape.constant(Tensor::full(&[1, 1, 2], 3.0));
        assert_eq!(values(r2(flat, y).unwrap()), vec![0.0]);
    }

    #[test]
    fn correlation_examples() {
        let tape = Tape::new();
        let up = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap());
        assert!((values(pairwise_correlation(up).unwrap())[0] - 1.0).abs() < 1e-15);
        let down = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 3.0, 2.0, 2.0, 3.0, 1.0]).unwrap());
        assert!((values(pairwise_correlation(down).unwrap())[0] + 1.0).abs() < 1e-15);
        let four = tape.constant(SeededRng::new(1).stream(0, "c").standard_normal(&[2, 50, 4]));
        assert_eq!(pairwise_correlation(four).unwrap().shape(), vec![2, 6]);
        assert_eq!(correlation_pairs(4), vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn correlation_pair_order_is_row_major() {
        let tape = Tape::new();
        // column 2 equals column 0, column 1 is its negation
        let mut data = Vec::new();
        for v in [1.0, 4.0, 2.0, 7.0] {
            data.extend_from_slice(&[v, -v, v]);
        }
        let x = tape.constant(Tensor::new(vec![1, 4, 3], data).unwrap());
        let c = values(pairwise_correlation(x).unwrap());
        let expected = [-1.0, 1.0, -1.0];
        for (got, want) in c.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{c:?}");
        }
    }

    fn spec(name: &str, query: QuerySpec) -> TargetSpec {
        TargetSpec {
            name: name.into(),
            query,
            loss: LossSpec::L2,
            target_method: None,
            weight: 1.0,
        }
    }

    #[test]
    fn targets_resolve_and_report_unknown_names() {
        let model = NormalRegression::categorical(2).unwrap();
        let tape = Tape::new();
        let theta = tape.leaf(SeededRng::new(1).stream(0, "t").standard_normal(&[2, 5, 4]).map(f64::abs));
        let out = crate::models::GenerativeModel::forward(&model, &tape, theta, &mut SeededRng::new(1).stream(0, "l")).unwrap();
        let registry = Registry::default();
        let mut r2_spec = spec("r2", QuerySpec::Quantiles { quantiles: vec![0.5] });
        r2_spec.target_method = Some("r2".into());
        let specs = vec![
            spec("y_gr0", QuerySpec::Identity),
            r2_spec,
            spec("cor", QuerySpec::Correlation),
        ];
        let targets = compute_targets(&out, theta, &specs, &registry).unwrap();
        assert_eq!(values(targets["y_gr0"]), values(out.get("y_gr0").unwrap()));
        assert_eq!(targets["r2"].shape(), vec![2, 5]);
        let stats = compute_elicited_statistics(&targets, &specs, &registry).unwrap();
        let keys: Vec<&str> = stats.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["identity_y_gr0", "quantiles_r2", "cor_cor"]);
        assert_eq!(stats[0].1.shape(), vec![2, 10]);

        let err = compute_targets(&out, theta, &[spec("zz", QuerySpec::Identity)], &registry).unwrap_err();
        assert!(err.to_string().contains("{y_gr0, y_gr1, y_gr2, mu, y}"), "{err}");
    }
}
