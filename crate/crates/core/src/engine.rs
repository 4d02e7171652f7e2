//! The training loop: sample priors, simulate, query, score, backpropagate,
//! update. Also replications, updates and oracle expert data.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use elicit_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::config::{Method, RunConfig, SECTIONS};
use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::initializer::{screen_and_select, sobol_candidates, InitDiagnostics, InitMethod};
use crate::losses::{total_loss, ExpertData, LossBreakdown};
use crate::models::{GenerativeModel, GenerativeOutput};
use crate::optim::{Optimizer, Variable};
use crate::prior::ParametricPrior;
use crate::registry::Registry;
use crate::rng::{NoiseStream, SeededRng};
use crate::targets::{compute_elicited_statistics, compute_targets};

/// Environment variable capping the number of concurrent replications.
pub const THREADS_ENV: &str = "ELICIT_THREADS";

/// Noise consumed by one forward evaluation.
pub struct EvalNoise {
    pub prior: NoiseStream,
    pub likelihood: NoiseStream,
}

impl EvalNoise {
    pub fn new(rng: &SeededRng, epoch: u64, tag: &str) -> Self {
        Self {
            prior: rng.stream(epoch, &format!("{tag}/prior")),
            likelihood: rng.stream(epoch, &format!("{tag}/likelihood")),
        }
    }
}

/// Everything computed in one pass through the pipeline.
pub struct Evaluation<'t> {
    /// `[B, S, P]`
    pub prior_samples: Var<'t>,
    pub outputs: GenerativeOutput<'t>,
    pub targets: BTreeMap<String, Var<'t>>,
    /// `(key, [B, m])` in target order.
    pub statistics: Vec<(String, Var<'t>)>,
}

pub enum PriorModel {
    Parametric(ParametricPrior),
    Deep { flow: Flow, constraints: Vec<ConstraintSpec> },
}

/// A validated configuration with its model and prior built once.
pub struct Pipeline {
    config: RunConfig,
    registry: Registry,
    model: Arc<dyn GenerativeModel>,
    prior: PriorModel,
    expert: ExpertData,
}

impl Pipeline {
    pub fn new(config: &RunConfig, registry: &Registry) -> Result<Self> {
        config.validate(registry)?;
        Self::build(config, registry)
    }

    fn build(config: &RunConfig, registry: &Registry) -> Result<Self> {
        let model = config.model.build(registry)?;
        let prior = match config.trainer.method {
            Method::ParametricPrior => PriorModel::Parametric(ParametricPrior::new(&config.parameters)?),
            Method::DeepPrior => PriorModel::Deep {
                flow: Flow::new(config.networks.clone().expect("validated"))?,
                constraints: config.parameters.iter().map(|p| p.constraint()).collect(),
            },
        };
        Ok(Self {
            config: config.clone(),
            registry: registry.clone(),
            model,
            prior,
            expert: config.expert.data.clone().unwrap_or_default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prior(&self) -> &PriorModel {
        &self.prior
    }

    /// Prior draws, model outputs, targets and elicited statistics.
    pub fn statistics<'t>(
        &self,
        tape: &'t Tape,
        variables: &[Var<'t>],
        b: usize,
        s: usize,
        noise: &mut EvalNoise,
    ) -> Result<Evaluation<'t>> {
        let prior_samples = match &self.prior {
            PriorModel::Parametric(p) => p.sample(variables, b, s, &mut noise.prior)?,
            PriorModel::Deep { flow, constraints } => flow.sample(variables, constraints, b, s, &mut noise.prior)?,
        };
        let outputs = self.model.forward(tape, prior_samples, &mut noise.likelihood)?;
        let targets = compute_targets(&outputs, prior_samples, &self.config.targets, &self.registry)?;
        let statistics = compute_elicited_statistics(&targets, &self.config.targets, &self.registry)?;
        Ok(Evaluation {
            prior_samples,
            outputs,
            targets,
            statistics,
        })
    }

    /// One full forward pass including the weighted loss.
    pub fn evaluate<'t>(
        &self,
        tape: &'t Tape,
        variables: &[Var<'t>],
        b: usize,
        s: usize,
        noise: &mut EvalNoise,
    ) -> Result<(Evaluation<'t>, LossBreakdown<'t>)> {
        let ev = self.statistics(tape, variables, b, s, noise)?;
        let loss = total_loss(&ev.statistics, &self.expert, &self.config.targets, &self.registry)?;
        Ok((ev, loss))
    }

    /// Names of the recorded hyperparameter series.
    pub fn snapshot_names(&self) -> Vec<String> {
        match &self.prior {
            PriorModel::Parametric(p) => p.hyper_names(),
            PriorModel::Deep { .. } => self
                .config
                .parameters
                .iter()
                .flat_map(|p| [format!("{}_mean", p.name), format!("{}_sd", p.name)])
                .collect(),
        }
    }

    /// Constrained hyperparameters, or per-parameter mean and sd of the draws.
    fn snapshot(&self, variables: &[Variable], prior_samples: &Tensor) -> Vec<f64> {
        match &self.prior {
            PriorModel::Parametric(p) => p
                .hyper_constraints()
                .iter()
                .zip(variables)
                .map(|(c, v)| c.constrain_value(v.values[0]))
                .collect(),
            PriorModel::Deep { .. } => marginal_moments(prior_samples)
                .into_iter()
                .flat_map(|(m, sd)| [m, sd])
                .collect(),
        }
    }

    /// Starting variables, after the Sobol screening when configured.
    pub fn initial_variables(&self, rng: &SeededRng) -> Result<(Vec<Variable>, Option<InitDiagnostics>)> {
        match &self.prior {
            PriorModel::Deep { flow, .. } => Ok((flow.init_weights(&mut rng.stream(0, "init-weights")), None)),
            PriorModel::Parametric(prior) => {
                let init = self.config.initializer.as_ref().expect("validated");
                let names = prior.hyper_names();
                let wrap = |values: &[f64]| -> Vec<Variable> {
                    names.iter().zip(values).map(|(n, &v)| Variable::scalar(n.clone(), v)).collect()
                };
                match init.method {
                    InitMethod::Explicit => {
                        let given = init.hyperparams.as_ref().expect("validated");
                        let values = names
                            .iter()
                            .zip(prior.hyper_constraints())
                            .map(|(n, c)| c.unconstrain(given[n]))
                            .collect::<Result<Vec<_>>>()?;
                        Ok((wrap(&values), None))
                    }
                    InitMethod::Sobol => {
                        let search = init.distribution.as_ref().expect("validated");
                        let candidates = sobol_candidates(names.len(), init.iterations.expect("validated"), search)?;
                        let (b, s) = (self.config.trainer.batch_size, self.config.trainer.num_samples);
                        let (best, diagnostics) = screen_and_select(candidates, |c| {
                            let tape = Tape::new();
                            let leaves: Vec<Var> = c.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect();
                            let mut noise = EvalNoise::new(rng, 0, "screen");
                            let (_, loss) = self.evaluate(&tape, &leaves, b, s, &mut noise)?;
                            Ok(loss.total.item())
                        })?;
                        Ok((wrap(&best), Some(diagnostics)))
                    }
                }
            }
        }
    }

    /// Trains one replication with the given seed.
    pub fn fit_run(&self, run: usize, seed: u64) -> Result<FitRecord> {
        let trainer = &self.config.trainer;
        let (b, s) = (trainer.batch_size, trainer.num_samples);
        let rng = SeededRng::new(seed);
        let (mut variables, init) = self.initial_variables(&rng)?;
        let mut optimizer = Optimizer::new(self.config.optimizer.clone(), &variables);
        let mut history = History {
            component_names: self.config.targets.iter().map(|t| t.key()).collect(),
            hyperparameter_names: self.snapshot_names(),
            gradient_names: variables.iter().map(|v| v.name.clone()).collect(),
            epochs: Vec::with_capacity(trainer.epochs),
        };
        let mut last_finite: Vec<(String, f64)> = Vec::new();
        let started = Instant::now();

        for epoch in 0..trainer.epochs {
            let clock = Instant::now();
            let fail = |key: String, quantity: &'static str, last: &Vec<(String, f64)>| Error::NonFinite {
                epoch,
                key,
                quantity,
                last_finite: last.clone(),
            };
            let tape = Tape::new();
            let leaves = leaves_for(&tape, &variables)?;
            let mut noise = EvalNoise::new(&rng, epoch as u64, "train");
            let (ev, loss) = self
                .evaluate(&tape, &leaves, b, s, &mut noise)
                .map_err(|e| at_epoch(e, epoch, &last_finite))?;

            let components = loss.component_values();
            if let Some(i) = components.iter().position(|v| !v.is_finite()) {
                return Err(fail(loss.components[i].0.clone(), "loss", &last_finite));
            }
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(fail("total".into(), "loss", &last_finite));
            }
            let grads = tape.backward(loss.total)?;
            let gradients: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt(*l).data().to_vec()).collect();
            if let Some(i) = gradients.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(fail(variables[i].name.clone(), "gradient", &last_finite));
            }
            let snapshot = self.snapshot(&variables, &ev.prior_samples.value());
            if let Some(i) = snapshot.iter().position(|v| !v.is_finite()) {
                return Err(fail(history.hyperparameter_names[i].clone(), "hyperparameter", &last_finite));
            }
            let gradient_norms = gradients
                .iter()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            drop(ev);
            drop(tape);

            optimizer
                .step(&mut variables, &gradients)
                .map_err(|e| at_epoch(e, epoch, &last_finite))?;
            last_finite = history.hyperparameter_names.iter().cloned().zip(snapshot.iter().copied()).collect();
            let time = (clock.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;
            history.epochs.push(EpochRecord {
                loss: total,
                loss_component: components,
                time,
                hyperparameter: snapshot,
                hyperparameter_gradient: gradient_norms,
            });
            self.report_progress(run, epoch, &history, started);
        }

        let results = self
            .final_results(&variables, &rng, init, seed)
            .map_err(|e| at_epoch(e, trainer.epochs, &last_finite))?;
        Ok(FitRecord {
            run,
            seed,
            history,
            results,
        })
    }

    fn report_progress(&self, run: usize, epoch: usize, history: &History, started: Instant) {
        let trainer = &self.config.trainer;
        if trainer.progress == 0 {
            return;
        }
        let every = (trainer.epochs / 10).max(1);
        let last = epoch + 1 == trainer.epochs;
        if trainer.progress == 1 && epoch % every != 0 && !last {
            return;
        }
        let row = history.epochs.last().expect("just pushed");
        let rate = (epoch + 1) as f64 / started.elapsed().as_secs_f64().max(1e-9);
        let mut line = format!(
            "run {run} epoch {}/{} loss {:.6} ({rate:.2} epochs/s)",
            epoch + 1,
            trainer.epochs,
            row.loss
        );
        if trainer.progress >= 2 {
            for (name, v) in history.component_names.iter().zip(&row.loss_component) {
                line.push_str(&format!(" {name}={v:.6}"));
            }
        }
        eprintln!("{line}");
    }

    fn final_results(
        &self,
        variables: &[Variable],
        rng: &SeededRng,
        init: Option<InitDiagnostics>,
        seed: u64,
    ) -> Result<Results> {
        let trainer = &self.config.trainer;
        let tape = Tape::new();
        let leaves = leaves_for(&tape, variables)?;
        let mut noise = EvalNoise::new(rng, trainer.epochs as u64, "train");
        let (ev, loss) = self.evaluate(&tape, &leaves, trainer.batch_size, trainer.num_samples, &mut noise)?;
        let final_loss = loss.total.item();
        if !final_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch: trainer.epochs,
                key: "total".into(),
                quantity: "loss",
                last_finite: Vec::new(),
            });
        }
        let hyperparameters = match &self.prior {
            PriorModel::Parametric(p) => p
                .hyper_names()
                .into_iter()
                .zip(p.hyper_constraints())
                .zip(variables)
                .map(|((n, c), v)| (n, c.constrain_value(v.values[0])))
                .collect(),
            PriorModel::Deep { .. } => BTreeMap::new(),
        };
        let prior_samples = Array::from(&*ev.prior_samples.value());
        Ok(Results {
            parameter_names: self.config.parameter_names(),
            prior_samples,
            model_samples: ev.outputs.iter().map(|(k, v)| (k.to_string(), first_batch(v))).collect(),
            target_quantities: ev.targets.iter().map(|(k, v)| (k.clone(), first_batch(*v))).collect(),
            elicited_statistics: ev
                .statistics
                .iter()
                .map(|(k, v)| (k.clone(), Array::from(&*v.value())))
                .collect(),
            expert_elicited_statistics: self.expert.clone(),
            final_loss,
            final_loss_component: loss
                .components
                .iter()
                .map(|(k, v)| (k.clone(), v.item()))
                .collect(),
            hyperparameters,
            variables: variables.to_vec(),
            init,
            seed,
        })
    }
}

fn leaves_for<'t>(tape: &'t Tape, variables: &[Variable]) -> Result<Vec<Var<'t>>> {
    variables
        .iter()
        .map(|v| Ok(tape.leaf(Tensor::new(v.shape.clone(), v.values.clone())?)))
        .collect()
}

/// Batch element 0 of a `[B, ...]` tensor.
fn first_batch(v: Var<'_>) -> Array {
    let t = v.value();
    let shape = t.shape();
    let rows = shape.first().copied().unwrap_or(1).max(1);
    let width = t.numel() / rows;
    Array {
        shape: shape.iter().skip(1).copied().collect(),
        data: t.data()[..width].to_vec(),
    }
}

/// Mean and population sd of each trailing-axis coordinate.
pub fn marginal_moments(samples: &Tensor) -> Vec<(f64, f64)> {
    let p = samples.shape().last().copied().unwrap_or(1);
    let n = samples.numel() / p.max(1);
    let mut mean = vec![0.0; p];
    for row in samples.data().chunks(p) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for row in samples.data().chunks(p) {
        for j in 0..p {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    mean.into_iter()
        .zip(var)
        .map(|(m, v)| (m, (v / n as f64).sqrt()))
        .collect()
}

/// Stamps the epoch (and last finite snapshot) onto numerical errors raised
/// below the training loop.
fn at_epoch(e: Error, epoch: usize, last: &[(String, f64)]) -> Error {
    match e {
        Error::NonFinite { key, quantity, .. } => Error::NonFinite {
            epoch,
            key,
            quantity,
            last_finite: last.to_vec(),
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub loss: f64,
    /// Weighted components, in target order.
    pub loss_component: Vec<f64>,
    /// Wall-clock seconds, 1 ms resolution.
    pub time: f64,
    /// Constrained hyperparameters before the update (parametric), or
    /// marginal mean and sd per parameter (deep).
    pub hyperparameter: Vec<f64>,
    /// Gradient L2 norm per trainable variable.
    pub hyperparameter_gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub component_names: Vec<String>,
    pub hyperparameter_names: Vec<String>,
    pub gradient_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Global gradient norm of one epoch.
    pub fn gradient_norm(&self, epoch: usize) -> f64 {
        self.epochs[epoch]
            .hyperparameter_gradient
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub parameter_names: Vec<String>,
    /// `[B, S, P]` draws from the final prior.
    pub prior_samples: Array,
    /// Model outputs of batch element 0.
    pub model_samples: BTreeMap<String, Array>,
    /// Target quantities of batch element 0.
    pub target_quantities: BTreeMap<String, Array>,
    /// `[B, m]` per statistic key.
    pub elicited_statistics: BTreeMap<String, Array>,
    pub expert_elicited_statistics: ExpertData,
    pub final_loss: f64,
    pub final_loss_component: BTreeMap<String, f64>,
    /// Final constrained hyperparameters; empty for deep priors.
    pub hyperparameters: BTreeMap<String, f64>,
    /// Final trainable variables (unconstrained).
    pub variables: Vec<Variable>,
    pub init: Option<InitDiagnostics>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub run: usize,
    pub seed: u64,
    pub history: History,
    pub results: Results,
}

/// A replication that aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub tag: String,
    pub numerical: bool,
    pub message: String,
}

/// Trains a single prior with the configured seed.
pub fn fit(config: &RunConfig, registry: &Registry) -> Result<FitRecord> {
    Pipeline::new(config, registry)?.fit_run(0, config.trainer.seed)
}

/// Outcome of `runs` replications with seeds `seed + r`, ordered by run.
pub fn fit_parallel(config: &RunConfig, runs: usize, registry: &Registry) -> Result<Vec<Result<FitRecord>>> {
    if runs < 1 {
        return Err(Error::config("runs", "need at least one run"));
    }
    let pipeline = Pipeline::new(config, registry)?;
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(runs)
        .clamp(1, runs);
    let next = AtomicUsize::new(0);
    let base = config.trainer.seed;
    let mut outcomes: Vec<(usize, Result<FitRecord>)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let r = next.fetch_add(1, Ordering::Relaxed);
                        if r >= runs {
                            break done;
                        }
                        done.push((r, pipeline.fit_run(r, base.wrapping_add(r as u64))));
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("replication thread panicked"))
            .collect()
    });
    outcomes.sort_by_key(|(r, _)| *r);
    Ok(outcomes.into_iter().map(|(_, o)| o).collect())
}

/// A configuration together with its fitted replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elicit {
    pub config: RunConfig,
    pub records: Vec<FitRecord>,
    pub failures: Vec<RunFailure>,
}

impl Elicit {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            records: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// Runs `runs` replications, replacing earlier outputs. Per-run failures
    /// are kept in `failures`; pre-flight errors are returned.
    pub fn fit(&mut self, runs: usize, registry: &Registry) -> Result<()> {
        let outcomes = fit_parallel(&self.config, runs, registry)?;
        self.records.clear();
        self.failures.clear();
        let base = self.config.trainer.seed;
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(rec) => self.records.push(rec),
                Err(e) => self.failures.push(RunFailure {
                    run: r,
                    seed: base.wrapping_add(r as u64),
                    tag: e.tag().to_string(),
                    numerical: e.kind() == crate::error::ErrorKind::Numerical,
                    message: e.to_string(),
                }),
            }
        }
        Ok(())
    }

    /// Replaces whole configuration sections and clears all outputs.
    /// A `null` value removes an optional section.
    pub fn update(&self, overrides: &serde_json::Value, registry: &Registry) -> Result<Elicit> {
        let serde_json::Value::Object(changes) = overrides else {
            return Err(Error::config("overrides", "expected an object of section → value"));
        };
        let mut tree = serde_json::to_value(&self.config).map_err(|e| Error::config("config", e.to_string()))?;
        let root = tree.as_object_mut().expect("config serializes to an object");
        for (section, value) in changes {
            if !SECTIONS.contains(&section.as_str()) {
                return Err(Error::config(
                    section.clone(),
                    format!("unknown section; expected one of [{}]", SECTIONS.join(", ")),
                ));
            }
            if value.is_null() {
                root.remove(section);
            } else {
                root.insert(section.clone(), value.clone());
            }
        }
        Ok(Elicit::new(RunConfig::from_value(tree, registry)?))
    }
}

/// Elicited statistics implied by known hyperparameters (constrained scale),
/// from one batch of `samples` prior draws. Parametric configurations only.
pub fn simulate_expert(
    config: &RunConfig,
    truth: &BTreeMap<String, f64>,
    samples: usize,
    seed: u64,
    registry: &Registry,
) -> Result<ExpertData> {
    config.validate_structure(registry)?;
    if config.trainer.method != Method::ParametricPrior {
        return Err(Error::config("trainer.method", "oracle simulation needs a parametric prior"));
    }
    if samples < 2 {
        return Err(Error::config("samples", "need at least 2 samples"));
    }
    let pipeline = Pipeline::build(config, registry)?;
    let PriorModel::Parametric(prior) = &pipeline.prior else {
        unreachable!("method checked above")
    };
    let names = prior.hyper_names();
    if let Some(extra) = truth.keys().find(|k| !names.contains(k)) {
        return Err(Error::config(
            "truth",
            format!("unknown hyperparameter `{extra}`; expected [{}]", names.join(", ")),
        ));
    }
    let values = names
        .iter()
        .zip(prior.hyper_constraints())
        .map(|(n, c)| {
            let v = truth
                .get(n)
                .ok_or_else(|| Error::config("truth", format!("missing value for `{n}`")))?;
            c.unconstrain(*v).map_err(|e| Error::config(format!("truth.{n}"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let leaves: Vec<Var> = values.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect();
    let mut noise = EvalNoise::new(&SeededRng::new(seed), 0, "oracle");
    let ev = pipeline.statistics(&tape, &leaves, 1, samples, &mut noise)?;
    ev.statistics
        .iter()
        .map(|(k, v)| {
            let t = v.value();
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    epoch: 0,
                    key: k.clone(),
                    quantity: "statistic",
                    last_finite: Vec::new(),
                });
            }
            Ok((k.clone(), t.data().to_vec()))
        })
        .collect()
}
