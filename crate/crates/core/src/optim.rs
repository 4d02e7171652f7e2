//! Gradient-based updates: Adam and SGD with optional schedules and clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named trainable array, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Variable {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            values: vec![value],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `lr0 · 0.5 · (1 + cos(π · min(t, T) / T))`
    CosineDecay {
        initial_learning_rate: f64,
        decay_steps: u64,
    },
}

/// A fixed learning rate or a schedule over gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Constant(f64),
    Schedule(Schedule),
}

impl LearningRate {
    /// Learning rate for gradient step `t` (counted from 0).
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LearningRate::Constant(lr) => lr,
            LearningRate::Schedule(Schedule::CosineDecay {
                initial_learning_rate,
                decay_steps,
            }) => {
                let progress = t.min(decay_steps) as f64 / decay_steps as f64;
                initial_learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LearningRate::Constant(lr) if !(lr > 0.0 && lr.is_finite()) => {
                Err(Error::config("learning_rate", format!("must be positive, got {lr}")))
            }
            LearningRate::Schedule(Schedule::CosineDecay {
                initial_learning_rate,
                decay_steps,
            }) => {
                if !(initial_learning_rate > 0.0 && initial_learning_rate.is_finite()) {
                    return Err(Error::config(
                        "learning_rate.initial_learning_rate",
                        format!("must be positive, got {initial_learning_rate}"),
                    ));
                }
                if decay_steps == 0 {
                    return Err(Error::config("learning_rate.decay_steps", "must be at least 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn default_beta_1() -> f64 {
    0.9
}
fn default_beta_2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub optimizer: Algorithm,
    pub learning_rate: LearningRate,
    /// Per-variable gradient-norm bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipnorm: Option<f64>,
    #[serde(default = "default_beta_1")]
    pub beta_1: f64,
    #[serde(default = "default_beta_2")]
    pub beta_2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            optimizer: Algorithm::Adam,
            learning_rate: LearningRate::Constant(learning_rate),
            clipnorm: None,
            beta_1: default_beta_1(),
            beta_2: default_beta_2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            optimizer: Algorithm::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.learning_rate.validate()?;
        if let Some(c) = self.clipnorm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clipnorm", format!("must be positive, got {c}")));
            }
        }
        for (name, b) in [("beta_1", self.beta_1), ("beta_2", self.beta_2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Scales `g` in place to norm at most `clipnorm`.
pub fn clip_by_norm(g: &mut [f64], clipnorm: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clipnorm {
        let scale = clipnorm / norm;
        g.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Optimizer with per-variable moment accumulators.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, variables: &[Variable]) -> Self {
        let zeros = || variables.iter().map(|v| vec![0.0; v.values.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update; `grads[i]` matches `variables[i]`.
    pub fn step(&mut self, variables: &mut [Variable], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != variables.len() || grads.iter().zip(&*variables).any(|(g, v)| g.len() != v.values.len()) {
            return Err(Error::config("optimizer", "gradients do not match the variables"));
        }
        if let Some((var, _)) = variables.iter().zip(grads).find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                epoch: self.step as usize,
                key: var.name.clone(),
                quantity: "gradient",
                last_finite: Vec::new(),
            });
        }
        let lr = self.config.learning_rate.at(self.step);
        let cfg = &self.config;
        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta_1.powi(t), 1.0 - cfg.beta_2.powi(t));
        for (i, var) in variables.iter_mut().enumerate() {
            let mut g = grads[i].clone();
            if let Some(c) = cfg.clipnorm {
                clip_by_norm(&mut g, c);
            }
            match cfg.optimizer {
                Algorithm::Sgd => {
                    for (x, gi) in var.values.iter_mut().zip(&g) {
                        *x -= lr * gi;
                    }
                }
                Algorithm::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = cfg.beta_1 * m[j] + (1.0 - cfg.beta_1) * g[j];
                        v[j] = cfg.beta_2 * v[j] + (1.0 - cfg.beta_2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        var.values[j] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
