use std::collections::BTreeMap;
use std::path::Path;

use elicit_core::config::{read_expert_file, ExpertSource, RunConfig};
use elicit_core::diagnostics::*;
use elicit_core::engine::{simulate_expert as oracle, Elicit, FitRecord};
use elicit_core::{persist, svg, Error, Registry, Result};

use crate::Failure;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem(bundle: &Path) -> String {
    bundle.file_stem().and_then(|s| s.to_str()).unwrap_or("bundle").to_string()
}

/// history, comparison and prior-draw tables for a set of runs.
fn write_run_tables(records: &[FitRecord], dir: &Path, names: &[String], with_svg: bool) -> Result<()> {
    write_history_csv(records, &dir.join("history.csv"))?;
    let table = compare_elicits(records);
    write_comparison_csv(&table, &dir.join("elicits.csv"))?;
    write_samples_csv(names, records.iter().flat_map(record_draws), &dir.join("priors.csv"))?;
    if with_svg {
        write_text(&dir.join("history.svg"), &svg::trajectories("total loss", &total_only(records)))?;
        write_text(&dir.join("elicits.svg"), &svg::comparison("expert vs model", &table))?;
    }
    Ok(())
}

fn total_only(records: &[FitRecord]) -> Vec<SeriesRow> {
    export_loss_trajectories(records).into_iter().filter(|r| r.series == TOTAL).collect()
}

pub fn fit(
    config: &Path,
    runs: usize,
    out: &Path,
    expert: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    with_svg: bool,
) -> std::result::Result<(), Failure> {
    let registry = Registry::default();
    let mut config = RunConfig::read(config)?;
    if let Some(path) = expert {
        config.expert = ExpertSource::inline(read_expert_file(path)?);
    }
    if let Some(s) = seed {
        config.trainer.seed = s;
    }
    if let Some(e) = epochs {
        config.trainer.epochs = e;
    }
    config.validate(&registry)?;
    let names = config.parameter_names();
    let mut elicit = Elicit::new(config);
    elicit.fit(runs, &registry)?;

    create_dir(out)?;
    persist::save(&elicit, &out.join("bundle.json"))?;
    write_run_tables(&elicit.records, out, &names, with_svg)?;
    for rec in &elicit.records {
        let dir = out.join(format!("run_{}", rec.run));
        create_dir(&dir)?;
        write_run_tables(std::slice::from_ref(rec), &dir, &names, with_svg)?;
    }
    for f in &elicit.failures {
        eprintln!("run-failed[{}] run={} seed={}: {}", f.tag, f.run, f.seed, f.message);
    }
    if elicit.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runs(elicit.failures.len()))
    }
}

fn fitted(bundle: &Path) -> Result<Elicit> {
    let e = persist::load(bundle)?;
    if e.records.is_empty() {
        return Err(Error::config("records", format!("{} holds no fitted runs", bundle.display())));
    }
    Ok(e)
}

pub fn diagnose(bundle: &Path, out: &Path, with_svg: bool) -> std::result::Result<(), Failure> {
    let e = fitted(bundle)?;
    let stem = stem(bundle);
    create_dir(out)?;
    let path = |export: &str, ext: &str| export_path(out, &stem, export, ext);

    let loss = export_loss_trajectories(&e.records);
    write_series_csv(&loss, &path("loss", "csv"))?;
    let hyper = export_hyperparameter_trajectories(&e.records);
    write_series_csv(&hyper, &path("hyperparameters", "csv"))?;
    let table = compare_elicits(&e.records);
    write_comparison_csv(&table, &path("elicits", "csv"))?;
    let summaries = e
        .records
        .iter()
        .map(|r| Ok((r.run, summarize_joint_prior(r, None)?)))
        .collect::<Result<Vec<_>>>()?;
    write_summary_csv(&summaries, &path("priors", "csv"))?;
    write_correlation_csv(&summaries, &e.config.parameter_names(), &path("correlation", "csv"))?;
    if with_svg {
        write_text(&path("loss", "svg"), &svg::trajectories("loss", &loss))?;
        write_text(&path("hyperparameters", "svg"), &svg::trajectories("hyperparameters", &hyper))?;
        write_text(&path("elicits", "svg"), &svg::comparison("expert vs model", &table))?;
    }
    println!("max |model - expert| = {}", table.max_deviation);
    Ok(())
}

pub fn average(bundle: &Path, out: &Path, pool: usize, seed: u64) -> std::result::Result<(), Failure> {
    let e = fitted(bundle)?;
    let stem = stem(bundle);
    create_dir(out)?;
    let avg = prior_average(&e.records, pool, seed)?;
    write_weights_csv(&avg, &export_path(out, &stem, "weights", "csv"))?;
    let rows = avg.source_run.iter().copied().zip(avg.samples.iter().cloned());
    write_samples_csv(&avg.parameter_names, rows, &export_path(out, &stem, "pooled", "csv"))?;
    for (run, w) in avg.runs.iter().zip(&avg.weights) {
        println!("run {run}: weight {w}");
    }
    Ok(())
}

pub fn template(config: &Path) -> std::result::Result<(), Failure> {
    let registry = Registry::default();
    let config = RunConfig::read(config)?;
    config.validate_structure(&registry)?;
    let entries: Vec<String> = config
        .template(&registry)?
        .into_iter()
        .map(|(key, len)| {
            let slots = match len {
                Some(n) => vec!["null"; n].join(", "),
                None => String::new(),
            };
            format!("  {}: [{slots}]", serde_json::Value::String(key))
        })
        .collect();
    println!("{{\n{}\n}}", entries.join(",\n"));
    Ok(())
}

fn parse_truth(text: &str) -> Result<BTreeMap<String, f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config("truth", format!("expected name=value, got `{pair}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("truth.{}", k.trim()), format!("not a number: `{v}`")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn simulate_expert(
    config: &Path,
    truth: &str,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let registry = Registry::default();
    let truth = parse_truth(truth)?;
    let config = RunConfig::read(config)?;
    let data = oracle(&config, &truth, samples, seed, &registry)?;
    let text = serde_json::to_string_pretty(&data).map_err(|e| Error::config("expert", e.to_string()))?;
    match out {
        Some(p) => write_text(p, &(text + "\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}
