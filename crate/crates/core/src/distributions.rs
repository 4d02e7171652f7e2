//! Reparameterized sampling and the relaxed Binomial likelihood.

use elicit_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// Default softmax temperature of the relaxed Binomial.
pub const DEFAULT_TEMPERATURE: f64 = 1.6;

/// Prior families with a location-scale style reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Normal,
    HalfNormal,
    Uniform,
}

impl Family {
    /// Names of the family's parameters, in the order `DistributionSpec` expects them.
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Family::Normal => &["loc", "scale"],
            Family::HalfNormal => &["scale"],
            Family::Uniform => &["low", "high"],
        }
    }

    /// Binds parameter nodes given in [`parameter_names`](Self::parameter_names) order.
    pub fn bind<'t>(self, params: &[Var<'t>]) -> Result<DistributionSpec<'t>> {
        let expected = self.parameter_names().len();
        if params.len() != expected {
            return Err(Error::config(
                "",
                format!("{self:?} takes {expected} parameters, got {}", params.len()),
            ));
        }
        Ok(match self {
            Family::Normal => DistributionSpec::Normal {
                loc: params[0],
                scale: params[1],
            },
            Family::HalfNormal => DistributionSpec::HalfNormal { scale: params[0] },
            Family::Uniform => DistributionSpec::Uniform {
                low: params[0],
                high: params[1],
            },
        })
    }
}

/// A distribution whose parameters are live graph nodes.
#[derive(Debug, Clone, Copy)]
pub enum DistributionSpec<'t> {
    Normal { loc: Var<'t>, scale: Var<'t> },
    HalfNormal { scale: Var<'t> },
    Uniform { low: Var<'t>, high: Var<'t> },
}

impl<'t> DistributionSpec<'t> {
    /// Draws parameter-free noise of `shape` from `noise` and transforms it.
    pub fn sample(&self, shape: &[usize], noise: &mut NoiseStream) -> Result<Var<'t>> {
        let eps = match self {
            DistributionSpec::Uniform { .. } => noise.uniform(shape),
            _ => noise.standard_normal(shape),
        };
        self.sample_with_noise(eps)
    }

    /// Applies the reparameterization to fixed noise: standard normal for
    /// Normal and HalfNormal, uniform on `[0, 1)` for Uniform.
    pub fn sample_with_noise(&self, eps: Tensor) -> Result<Var<'t>> {
        match *self {
            DistributionSpec::Normal { loc, scale } => {
                check_positive("Normal scale", scale)?;
                let eps = scale.tape().constant(eps);
                Ok(loc.add(scale.mul(eps)?)?)
            }
            DistributionSpec::HalfNormal { scale } => {
                check_positive("HalfNormal scale", scale)?;
                let eps = scale.tape().constant(eps.map(f64::abs));
                Ok(scale.mul(eps)?)
            }
            DistributionSpec::Uniform { low, high } => {
                let ordered = low
                    .value()
                    .data()
                    .iter()
                    .zip(high.value().data())
                    .all(|(l, h)| l < h);
                if low.value().numel() == high.value().numel() && !ordered {
                    return Err(Error::domain("Uniform bounds", "low must be below high"));
                }
                let u = low.tape().constant(eps);
                Ok(low.add(high.sub(low)?.mul(u)?)?)
            }
        }
    }
}

fn check_positive(what: &str, v: Var<'_>) -> Result<()> {
    if let Some(bad) = v.value().data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::domain(what, format!("must be positive, got {bad}")));
    }
    Ok(())
}

/// Log-pmf of Binomial(`count`, p) on the support `0..=support`, appended as a
/// new trailing axis of length `support + 1`.
pub fn binomial_log_pmf<'t>(count: u32, support: u32, probability: Var<'t>) -> Result<Var<'t>> {
    if let Some(bad) = probability
        .value()
        .data()
        .iter()
        .find(|&&p| !(p > 0.0 && p < 1.0))
    {
        return Err(Error::domain(
            "Binomial probability",
            format!("must lie in (0, 1), got {bad}"),
        ));
    }
    let log_p = probability.ln()?;
    let log_q = probability.neg().add_scalar(1.0).ln()?;
    binomial_terms(count, support, log_p, log_q)
}

/// Same as [`binomial_log_pmf`] but parameterized by the logit of p, which
/// stays finite for arbitrarily large linear predictors.
pub fn binomial_log_pmf_logit<'t>(count: u32, support: u32, logit: Var<'t>) -> Result<Var<'t>> {
    let log_p = logit.neg().softplus().neg();
    let log_q = logit.softplus().neg();
    binomial_terms(count, support, log_p, log_q)
}

fn binomial_terms<'t>(count: u32, support: u32, log_p: Var<'t>, log_q: Var<'t>) -> Result<Var<'t>> {
    if count == 0 {
        return Err(Error::config("total_count", "Binomial count must be positive"));
    }
    if support > count {
        return Err(Error::config(
            "total_count",
            format!("support bound {support} exceeds count {count}"),
        ));
    }
    let tape = log_p.tape();
    let n = f64::from(count);
    let k: Vec<f64> = (0..=support).map(f64::from).collect();
    let log_choose: Vec<f64> = k
        .iter()
        .map(|&k| ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0))
        .collect();
    let mut shape = log_p.shape();
    shape.push(1);
    let log_p = log_p.reshape(&shape)?;
    let log_q = log_q.reshape(&shape)?;
    let k_node = tape.constant(Tensor::vector(k.clone()));
    let rest = tape.constant(Tensor::vector(k.iter().map(|k| n - k).collect()));
    let choose = tape.constant(Tensor::vector(log_choose));
    Ok(choose.add(log_p.mul(k_node)?)?.add(log_q.mul(rest)?)?)
}

/// Softmax weights `softmax((log_pmf + g) / temp)` over the trailing axis.
pub fn gumbel_softmax_weights<'t>(log_pmf: Var<'t>, temp: f64, gumbel: Tensor) -> Result<Var<'t>> {
    if !(temp > 0.0) {
        return Err(Error::config("temp", format!("temperature must be positive, got {temp}")));
    }
    let shape = log_pmf.shape();
    if shape.last().is_none_or(|&k| k < 2) {
        return Err(Error::config("", "relaxed draw needs a support of at least two values"));
    }
    let g = log_pmf.tape().constant(gumbel);
    let axis = shape.len() - 1;
    Ok(log_pmf.add(g)?.mul_scalar(1.0 / temp).softmax(axis)?)
}

/// Continuous relaxation of a draw from the categorical `log_pmf` over
/// `0..=K`: the expectation of the support under the Gumbel-softmax weights.
pub fn gumbel_softmax_trick<'t>(
    log_pmf: Var<'t>,
    temp: f64,
    noise: &mut NoiseStream,
) -> Result<Var<'t>> {
    let gumbel = noise.gumbel(&log_pmf.shape());
    relaxed_value(gumbel_softmax_weights(log_pmf, temp, gumbel)?)
}

/// `Σ_k w_k · k` over the trailing axis.
pub fn relaxed_value(weights: Var<'_>) -> Result<Var<'_>> {
    let shape = weights.shape();
    let axis = shape.len() - 1;
    let k = weights
        .tape()
        .constant(Tensor::vector((0..shape[axis]).map(|k| k as f64).collect()));
    Ok(weights.mul(k)?.sum(&[axis], false)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use elicit_autodiff::Tape;

    #[test]
    fn normal_reparameterization_identity() {
        let tape = Tape::new();
        let mu = tape.leaf(Tensor::scalar(0.0));
        let sigma = tape.leaf(Tensor::scalar(1.0));
        let x = Family::Normal
            .bind(&[mu, sigma])
            .unwrap()
            .sample_with_noise(Tensor::vector(vec![0.5]))
            .unwrap();
        assert_eq!(x.value().data(), &[0.5]);
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.wrt(mu).item(), Some(1.0));
        assert_eq!(g.wrt(sigma).item(), Some(0.5));
    }

    #[test]
    fn half_normal_uses_absolute_noise() {
        let tape = Tape::new();
        let sigma = tape.leaf(Tensor::scalar(2.0));
        let x = DistributionSpec::HalfNormal { scale: sigma }
            .sample_with_noise(Tensor::vector(vec![-1.5]))
            .unwrap();
        assert_eq!(x.value().data(), &[3.0]);
    }

    #[test]
    fn uniform_maps_unit_noise() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(-1.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let x = DistributionSpec::Uniform { low: a, high: b }
            .sample_with_noise(Tensor::vector(vec![0.25]))
            .unwrap();
        assert_eq!(x.value().data(), &[0.0]);
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.wrt(a).item(), Some(0.75));
        assert_eq!(g.wrt(b).item(), Some(0.25));
    }

    #[test]
    fn non_positive_scale_is_a_domain_error() {
        let tape = Tape::new();
        let mu = tape.scalar(0.0);
        let sigma = tape.scalar(-0.1);
        let err = Family::Normal
            .bind(&[mu, sigma])
            .unwrap()
            .sample_with_noise(Tensor::vector(vec![0.0]))
            .unwrap_err();
        assert!(err.to_string().contains("Normal scale"), "{err}");
    }

    #[test]
    fn normal_monte_carlo_mean() {
        let n = 1_000_000;
        let tape = Tape::new();
        let x = Family::Normal
            .bind(&[tape.scalar(2.0), tape.scalar(0.5)])
            .unwrap()
            .sample(&[n], &mut SeededRng::new(11).stream(0, "mc"))
            .unwrap();
        let mean = x.value().sum() / n as f64;
        assert!((mean - 2.0).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn binomial_pmf_small_case() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.5));
        let lp = binomial_log_pmf(2, 2, p).unwrap();
        let probs: Vec<f64> = lp.value().data().iter().map(|v| v.exp()).collect();
        for (got, want) in probs.iter().zip([0.25, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn binomial_pmf_normalizes() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.3));
        let lp = binomial_log_pmf(10, 10, p).unwrap();
        let total: f64 = lp.value().data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_logit_form_matches_probability_form() {
        let tape = Tape::new();
        let eta = 0.4f64;
        let p = 1.0 / (1.0 + (-eta).exp());
        let a = binomial_log_pmf(7, 7, tape.constant(Tensor::scalar(p))).unwrap();
        let b = binomial_log_pmf_logit(7, 7, tape.constant(Tensor::scalar(eta))).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_probability_domain() {
        let tape = Tape::new();
        for p in [0.0, 1.0, -0.2] {
            let err = binomial_log_pmf(3, 3, tape.constant(Tensor::scalar(p))).unwrap_err();
            assert!(matches!(err, Error::Domain { .. }));
        }
        assert!(binomial_log_pmf(3, 4, tape.constant(Tensor::scalar(0.5))).is_err());
    }

    #[test]
    fn binomial_gradient_matches_finite_differences() {
        let p0 = 0.37;
        let eval = |p: f64| -> Vec<f64> {
            let tape = Tape::new();
            let out = binomial_log_pmf(6, 6, tape.constant(Tensor::scalar(p))).unwrap();
            let values = out.value().data().to_vec();
            values
        };
        for k in 0..=6usize {
            let tape = Tape::new();
            let p = tape.leaf(Tensor::scalar(p0));
            let lp = binomial_log_pmf(6, 6, p).unwrap().gather(0, &[k]).unwrap().sum_all();
            let ad = tape.backward(lp).unwrap().wrt(p).item().unwrap();
            let h = 1e-6;
            let fd = (eval(p0 + h)[k] - eval(p0 - h)[k]) / (2.0 * h);
            assert!((ad - fd).abs() / ad.abs().max(1e-12) < 1e-4, "k={k}: {ad} vs {fd}");
        }
    }

    #[test]
    fn gumbel_weights_sum_to_one() {
        let tape = Tape::new();
        let lp = binomial_log_pmf(5, 5, tape.constant(Tensor::full(&[50], 0.5))).unwrap();
        let mut noise = SeededRng::new(3).stream(0, "g");
        let w = gumbel_softmax_weights(lp, 1.6, noise.gumbel(&[50, 6])).unwrap();
        for row in w.value().data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let tape = Tape::new();
        let lp = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let mut noise = SeededRng::new(3).stream(0, "g");
        assert!(gumbel_softmax_trick(lp, 0.0, &mut noise).is_err());
        assert!(gumbel_softmax_trick(lp, -1.0, &mut noise).is_err());
    }
}
