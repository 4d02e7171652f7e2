//! Bijections between the real line and constrained intervals.

use elicit_autodiff::Var;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interval `(lower, upper)`; a missing bound means unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl ConstraintSpec {
    pub const UNCONSTRAINED: Self = Self {
        lower: None,
        upper: None,
    };

    /// Builds a constraint from extended reals; infinite bounds become `None`.
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let spec = Self {
            lower: lower.is_finite().then_some(lower),
            upper: upper.is_finite().then_some(upper),
        };
        if lower.is_nan() || upper.is_nan() || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(Error::config("", format!("invalid bounds ({lower}, {upper})")));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn lower_bound(lower: f64) -> Self {
        Self {
            lower: Some(lower),
            upper: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(l), Some(u)) = (self.lower, self.upper) {
            if !(l < u) {
                return Err(Error::config("", format!("lower bound {l} must be below upper bound {u}")));
            }
        }
        Ok(())
    }

    pub fn is_unconstrained(&self) -> bool {
        self.lower.is_none() && self.upper.is_none()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower.is_none_or(|l| x > l) && self.upper.is_none_or(|u| x < u)
    }

    /// Maps an unconstrained node into the interval.
    pub fn constrain<'t>(&self, u: Var<'t>) -> Var<'t> {
        match (self.lower, self.upper) {
            (None, None) => u,
            (Some(l), None) => u.softplus().add_scalar(l),
            (None, Some(h)) => u.softplus().affine(-1.0, h),
            (Some(l), Some(h)) => u.sigmoid().affine(h - l, l),
        }
    }

    /// Scalar version of [`constrain`](Self::constrain).
    pub fn constrain_value(&self, u: f64) -> f64 {
        match (self.lower, self.upper) {
            (None, None) => u,
            (Some(l), None) => l + softplus(u),
            (None, Some(h)) => h - softplus(u),
            (Some(l), Some(h)) => l + (h - l) * sigmoid(u),
        }
    }

    /// Exact inverse of [`constrain`](Self::constrain).
    pub fn unconstrain(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || !self.contains(x) {
            return Err(Error::domain(
                "unconstrain",
                format!("{x} is not strictly inside {}", self.describe()),
            ));
        }
        Ok(match (self.lower, self.upper) {
            (None, None) => x,
            (Some(l), None) => softplus_inverse(x - l),
            (None, Some(h)) => softplus_inverse(h - x),
            (Some(l), Some(h)) => {
                let p = (x - l) / (h - l);
                p.ln() - (-p).ln_1p()
            }
        })
    }

    pub fn describe(&self) -> String {
        let l = self.lower.map_or("-inf".to_string(), |v| v.to_string());
        let h = self.upper.map_or("inf".to_string(), |v| v.to_string());
        format!("({l}, {h})")
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for `y > 0`: `y + ln(1 - e^{-y})`.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}
