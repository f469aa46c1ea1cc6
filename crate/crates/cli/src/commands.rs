//! Subcommand bodies. Each returns the process exit code on success.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ltn_core::selftest;
use ltn_core::trainer_eval::ablation::{self, RowSummary, RunOutcome, AXES};
use ltn_core::trainer_eval::alignment::write_alignment_csv;
use ltn_core::trainer_eval::probe::restore_model;
use ltn_core::trainer_eval::train::write_metrics;
use ltn_core::trainer_eval::{
    linear_probe, time_alignment, train, Alignment, Checkpoint, ProbeFeatures, ProbeReport, RunConfig,
};
use ltn_core::{LtnError, Result};
use serde_json::{json, Value};

use crate::pool::run_ordered;
use crate::FeatureChoice;

/// Defaults, overlaid by the config file and then by `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| LtnError::config("--config", format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn config_json(cfg: &RunConfig) -> Value {
    let map: serde_json::Map<String, Value> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    Value::Object(map)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LtnError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn checkpoint_or_train(config: Option<&Path>, checkpoint: Option<&Path>, seed: Option<u64>) -> Result<Checkpoint> {
    match checkpoint {
        Some(p) => Checkpoint::load(p),
        None => Ok(train(load_config(config, seed)?)?.0),
    }
}

pub fn pretrain(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<u8> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    let (ck, metrics) = train(cfg.clone())?;
    ck.save(&out.join("checkpoint.ltn"))?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    write_metrics(&mut log, &cfg, &metrics)?;
    log.flush()?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    if let Some(last) = metrics.last() {
        println!("trained {} steps, final loss {:.4}", metrics.len(), last.loss);
    }
    Ok(0)
}

fn probe_json(r: &ProbeReport) -> Value {
    json!({
        "num_classes": r.num_classes,
        "train_examples": r.train_examples,
        "test_examples": r.test_examples,
        "train_accuracy": r.train_accuracy,
        "test_accuracy": r.test_accuracy,
    })
}

pub fn probe(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    features: FeatureChoice,
) -> Result<u8> {
    let ck = checkpoint_or_train(config, checkpoint, seed)?;
    fs::create_dir_all(out)?;
    let mut report = json!({ "config": config_json(&ck.config), "seed": ck.config.seed });
    if matches!(features, FeatureChoice::F | FeatureChoice::Both) {
        let r = linear_probe(&ck, ProbeFeatures::Representation)?;
        println!("probe f: test accuracy {:.4}", r.test_accuracy);
        report["representation"] = probe_json(&r);
    }
    if matches!(features, FeatureChoice::Blended | FeatureChoice::Both) {
        let r = linear_probe(&ck, ProbeFeatures::Blended)?;
        println!("probe f': test accuracy {:.4}", r.test_accuracy);
        report["blended"] = probe_json(&r);
    }
    write_json(&out.join("probe.json"), &report)?;
    Ok(0)
}

fn write_alignment(path: &Path, cfg: &RunConfig, alignment: &Alignment) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in cfg.to_text().lines() {
        writeln!(w, "# {line}")?;
    }
    write_alignment_csv(&mut w, alignment)?;
    w.flush()?;
    Ok(())
}

pub fn align(config: Option<&Path>, checkpoint: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<u8> {
    let ck = checkpoint_or_train(config, checkpoint, seed)?;
    let cfg = &ck.config;
    let (model, store, dataset) = restore_model(&ck)?;
    let stream = ablation::alignment_stream(cfg, &dataset)?;
    let report = time_alignment(&model, &store, &stream, cfg.align_segments)?;
    fs::create_dir_all(out)?;
    write_alignment(&out.join("alignment.csv"), cfg, &report.blended)?;
    write_alignment(&out.join("alignment_original.csv"), cfg, &report.original)?;
    let summary = json!({
        "config": config_json(cfg),
        "seed": cfg.seed,
        "segments": cfg.align_segments,
        "blended": { "rho": report.blended.rho, "degenerate": report.blended.degenerate },
        "original": { "rho": report.original.rho, "degenerate": report.original.degenerate },
    });
    write_json(&out.join("align.json"), &summary)?;
    println!(
        "alignment |rho|: f' {:.4}, f {:.4}",
        report.blended.rho, report.original.rho
    );
    Ok(0)
}

pub fn ablate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    workers: usize,
    seeds: usize,
    axes: Option<Vec<String>>,
) -> Result<u8> {
    let base = load_config(config, seed)?;
    if seeds == 0 {
        return Err(LtnError::config("--seeds", "must be positive"));
    }
    let axes: Vec<String> = axes.unwrap_or_else(|| AXES.iter().map(|a| a.to_string()).collect());
    let axis_refs: Vec<&str> = axes.iter().map(String::as_str).collect();
    let rows = ablation::grid(&axis_refs).map_err(|e| LtnError::config("--axes", e))?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.seed + i).collect();

    let mut jobs = Vec::with_capacity(rows.len() * seeds);
    for (r, row) in rows.iter().enumerate() {
        for &s in &seed_list {
            jobs.push((r, row.config(&base, s)?));
        }
    }
    let results = run_ordered(&jobs, workers, |_, (r, cfg)| {
        let outcome = ablation::evaluate(cfg);
        if let Ok(o) = &outcome {
            eprintln!("{} seed {}: acc {:.4}", rows[*r].label, o.seed, o.probe_accuracy);
        }
        outcome
    });
    let mut per_row: Vec<Vec<RunOutcome>> = vec![Vec::new(); rows.len()];
    for ((r, _), outcome) in jobs.iter().zip(results) {
        per_row[*r].push(outcome?);
    }
    let summaries: Vec<RowSummary> = rows
        .into_iter()
        .zip(per_row)
        .map(|(row, outcomes)| RowSummary::new(row, outcomes))
        .collect();

    fs::create_dir_all(out)?;
    let table = ablation::summary_table(&base, &seed_list, &summaries);
    fs::write(out.join("summary.tsv"), &table)?;
    let rows_json = serde_json::to_value(&summaries).map_err(|e| LtnError::Format(e.to_string()))?;
    write_json(
        &out.join("summary.json"),
        &json!({ "config": config_json(&base), "seeds": seed_list, "rows": rows_json }),
    )?;
    print!(
        "{}",
        table
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n")
    );
    println!();
    Ok(0)
}

pub fn selftest() -> Result<u8> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
