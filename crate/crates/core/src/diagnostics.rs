//! Post-fit tables: loss and hyperparameter trajectories, expert-versus-model
//! comparisons, prior summaries and multi-run prior averaging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::FitRecord;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Label of the total-loss series in long-format loss exports.
pub const TOTAL: &str = "total";

/// Marginal quantile levels reported by [`summarize_joint_prior`].
pub const SUMMARY_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub run: usize,
    pub epoch: usize,
    pub series: String,
    pub value: f64,
}

/// Long-format loss rows: per run and epoch the total followed by each
/// weighted component.
pub fn export_loss_trajectories(records: &[FitRecord]) -> Vec<SeriesRow> {
    let mut rows = Vec::new();
    for rec in records {
        let h = &rec.history;
        for (e, ep) in h.epochs.iter().enumerate() {
            rows.push(SeriesRow { run: rec.run, epoch: e, series: TOTAL.into(), value: ep.loss });
            for (name, v) in h.component_names.iter().zip(&ep.loss_component) {
                rows.push(SeriesRow { run: rec.run, epoch: e, series: name.clone(), value: *v });
            }
        }
    }
    rows
}

/// Long-format hyperparameter rows (marginal mean/sd series in deep mode).
pub fn export_hyperparameter_trajectories(records: &[FitRecord]) -> Vec<SeriesRow> {
    let mut rows = Vec::new();
    for rec in records {
        let h = &rec.history;
        for (e, ep) in h.epochs.iter().enumerate() {
            for (name, v) in h.hyperparameter_names.iter().zip(&ep.hyperparameter) {
                rows.push(SeriesRow { run: rec.run, epoch: e, series: name.clone(), value: *v });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub key: String,
    /// Position inside the statistic vector.
    pub index: usize,
    pub run: usize,
    pub expert: f64,
    /// Final model statistic averaged over the batch.
    pub model: f64,
    pub abs_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub max_deviation: f64,
}

impl ComparisonTable {
    /// Largest deviation among rows accepted by `keep`.
    pub fn max_where(&self, keep: impl Fn(&ComparisonRow) -> bool) -> f64 {
        self.rows.iter().filter(|r| keep(r)).map(|r| r.abs_deviation).fold(0.0, f64::max)
    }

    /// Largest deviation of one run over the keys accepted by `key`.
    pub fn run_max(&self, run: usize, key: impl Fn(&str) -> bool) -> f64 {
        self.max_where(|r| r.run == run && key(&r.key))
    }
}

/// Expert statistics next to the batch-averaged final model statistics.
pub fn compare_elicits(records: &[FitRecord]) -> ComparisonTable {
    let mut rows = Vec::new();
    for rec in records {
        let res = &rec.results;
        for (key, expert) in &res.expert_elicited_statistics {
            let model = res.elicited_statistics.get(key).map(|a| a.mean_rows()).unwrap_or_default();
            for (i, e) in expert.iter().enumerate() {
                let m = model.get(i).copied().unwrap_or(f64::NAN);
                rows.push(ComparisonRow {
                    key: key.clone(),
                    index: i,
                    run: rec.run,
                    expert: *e,
                    model: m,
                    abs_deviation: (m - e).abs(),
                });
            }
        }
    }
    let max_deviation = rows.iter().map(|r| r.abs_deviation).fold(0.0, f64::max);
    ComparisonTable { rows, max_deviation }
}

/// Replication weights `w_r ∝ exp(-L_r)` from final total losses.
///
/// Computed as a max-shifted softmax so that large losses do not underflow;
/// non-finite losses get weight zero.
pub fn averaging_weights(final_losses: &[f64]) -> Result<Vec<f64>> {
    let best = final_losses
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::domain("prior averaging", "no run has a finite final loss"));
    }
    let raw: Vec<f64> = final_losses
        .iter()
        .map(|l| if l.is_finite() { (best - l).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPrior {
    pub runs: Vec<usize>,
    pub final_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub parameter_names: Vec<String>,
    /// `pool_size` rows of `P` values.
    pub samples: Vec<Vec<f64>>,
    /// Run each pooled row was taken from.
    pub source_run: Vec<usize>,
}

/// Mixture of the per-run priors: pick run `r` with probability `w_r`, then a
/// stored draw of that run uniformly.
pub fn prior_average(records: &[FitRecord], pool_size: usize, seed: u64) -> Result<AveragedPrior> {
    if records.is_empty() {
        return Err(Error::config("records", "prior averaging needs at least one fitted run"));
    }
    if pool_size < 1 {
        return Err(Error::config("pool_size", "must be at least 1"));
    }
    let final_losses: Vec<f64> = records.iter().map(|r| r.results.final_loss).collect();
    let weights = averaging_weights(&final_losses)?;
    let names = records[0].results.parameter_names.clone();
    let p = names.len();
    for rec in records {
        if rec.results.parameter_names != names || rec.results.prior_samples.data.len() < p {
            return Err(Error::config("records", format!("run {} has incompatible prior samples", rec.run)));
        }
    }
    let mut stream = SeededRng::new(seed).stream(0, "prior-average");
    let rng = stream.rng();
    let mut samples = Vec::with_capacity(pool_size);
    let mut source_run = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        // fall back to the last positive weight when rounding leaves u above the sum
        let mut pick = weights.iter().rposition(|w| *w > 0.0).expect("weights sum to 1");
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                pick = i;
                break;
            }
        }
        let data = &records[pick].results.prior_samples.data;
        let n = data.len() / p;
        let j = rng.random_range(0..n);
        samples.push(data[j * p..(j + 1) * p].to_vec());
        source_run.push(records[pick].run);
    }
    Ok(AveragedPrior {
        runs: records.iter().map(|r| r.run).collect(),
        final_losses,
        weights,
        parameter_names: names,
        samples,
        source_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `(level, value)` at [`SUMMARY_LEVELS`].
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub draws: usize,
    pub marginals: Vec<Marginal>,
    /// `P × P` Pearson correlations.
    pub correlation: Vec<Vec<f64>>,
}

/// Marginal summaries and pairwise correlations of a run's stored prior
/// draws, using at most `draw_count` of them.
pub fn summarize_joint_prior(record: &FitRecord, draw_count: Option<usize>) -> Result<JointSummary> {
    let res = &record.results;
    let p = res.parameter_names.len();
    let data = &res.prior_samples.data;
    if p == 0 || data.len() < 2 * p {
        return Err(Error::config("prior_samples", "need at least two stored draws"));
    }
    let n = draw_count.unwrap_or(usize::MAX).min(data.len() / p).max(2);
    let column = |j: usize| -> Vec<f64> { (0..n).map(|i| data[i * p + j]).collect() };
    let columns: Vec<Vec<f64>> = (0..p).map(column).collect();
    Ok(JointSummary {
        draws: n,
        marginals: res
            .parameter_names
            .iter()
            .zip(&columns)
            .map(|(name, c)| {
                let (mean, sd) = mean_sd(c);
                Marginal {
                    name: name.clone(),
                    mean,
                    sd,
                    quantiles: SUMMARY_LEVELS.iter().map(|&q| (q, quantile(c, q))).collect(),
                }
            })
            .collect(),
        correlation: correlation_matrix(&columns),
    })
}

/// Mean and sample standard deviation.
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn correlation_matrix(columns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let p = columns.len();
    let mut out = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            out[i][j] = if i == j {
                1.0
            } else {
                dot(&centered[i], &centered[j])
                    / (dot(&centered[i], &centered[i]) * dot(&centered[j], &centered[j])).sqrt()
            };
        }
    }
    out
}

/// `<dir>/<stem>_<export>.<ext>`
pub fn export_path(dir: &Path, stem: &str, export: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{export}.{ext}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Wide history table: one row per run and epoch.
pub fn write_history_csv(records: &[FitRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let Some(first) = records.first() else {
        return finish(w, path);
    };
    let h = &first.history;
    let mut header = vec!["run".to_string(), "epoch".into(), "total_loss".into()];
    header.extend(h.component_names.iter().cloned());
    header.extend(h.hyperparameter_names.iter().cloned());
    header.extend(["grad_norm".to_string(), "time_s".into()]);
    w.write_record(&header)?;
    for rec in records {
        for (e, ep) in rec.history.epochs.iter().enumerate() {
            let mut row = vec![rec.run.to_string(), e.to_string(), ep.loss.to_string()];
            row.extend(ep.loss_component.iter().map(f64::to_string));
            row.extend(ep.hyperparameter.iter().map(f64::to_string));
            row.push(rec.history.gradient_norm(e).to_string());
            row.push(ep.time.to_string());
            w.write_record(&row)?;
        }
    }
    finish(w, path)
}

pub fn write_series_csv(rows: &[SeriesRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run", "epoch", "series", "value"])?;
    for r in rows {
        w.write_record([r.run.to_string(), r.epoch.to_string(), r.series.clone(), r.value.to_string()])?;
    }
    finish(w, path)
}

pub fn write_comparison_csv(table: &ComparisonTable, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["key", "index", "run", "expert", "model", "abs_deviation"])?;
    for r in &table.rows {
        w.write_record([
            r.key.clone(),
            r.index.to_string(),
            r.run.to_string(),
            r.expert.to_string(),
            r.model.to_string(),
            r.abs_deviation.to_string(),
        ])?;
    }
    w.write_record(["max", "", "", "", "", &table.max_deviation.to_string()])?;
    finish(w, path)
}

/// Stored prior draws, one row per draw.
pub fn write_samples_csv(names: &[String], rows: impl Iterator<Item = (usize, Vec<f64>)>, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (run, values) in rows {
        let mut row = vec![run.to_string()];
        row.extend(values.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// Every stored draw of a run as `(run, row)` pairs.
pub fn record_draws(record: &FitRecord) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
    let p = record.results.parameter_names.len().max(1);
    record.results.prior_samples.data.chunks(p).map(move |c| (record.run, c.to_vec()))
}

/// Marginal summaries per run, long format.
pub fn write_summary_csv(summaries: &[(usize, JointSummary)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["run".to_string(), "parameter".into(), "mean".into(), "sd".into()];
    header.extend(SUMMARY_LEVELS.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    for (run, s) in summaries {
        for m in &s.marginals {
            let mut row = vec![run.to_string(), m.name.clone(), m.mean.to_string(), m.sd.to_string()];
            row.extend(m.quantiles.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
    }
    finish(w, path)
}

pub fn write_correlation_csv(summaries: &[(usize, JointSummary)], names: &[String], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run", "row", "column", "correlation"])?;
    for (run, s) in summaries {
        for (i, a) in names.iter().enumerate() {
            for (j, b) in names.iter().enumerate() {
                w.write_record([run.to_string(), a.clone(), b.clone(), s.correlation[i][j].to_string()])?;
            }
        }
    }
    finish(w, path)
}

pub fn write_weights_csv(avg: &AveragedPrior, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run", "final_loss", "weight"])?;
    for ((run, l), wt) in avg.runs.iter().zip(&avg.final_losses).zip(&avg.weights) {
        w.write_record([run.to_string(), l.to_string(), wt.to_string()])?;
    }
    finish(w, path)
}

/// Writes `text` to `path`.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
