//! Ablation grid: one-axis sweeps around a base config, each row run over
//! paired seeds and summarized by probe accuracy.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::synthetic_data::{Dataset, Stream};

use super::alignment::time_alignment;
use super::config::RunConfig;
use super::probe::{linear_probe, restore_model, ProbeFeatures};
use super::train::Trainer;

/// Id of the stream used for alignment; outside the range of training ids.
pub const ALIGN_STREAM_ID: u64 = 1 << 40;

/// A row of the grid: a label and the config overrides that define it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationRow {
    fn new(axis: &str, label: &str, overrides: &[(&str, &str)]) -> Self {
        AblationRow {
            axis: axis.to_string(),
            label: label.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// `base` with this row's overrides and the given seed.
    pub fn config(&self, base: &RunConfig, seed: u64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Axes of the default grid.
pub const AXES: [&str; 5] = ["variant", "basis_size", "time_encoder", "positives", "framework"];

/// The rows of one axis. Rows other than the variant axis sweep around the
/// linear-transform variant with a Gram-Schmidt basis.
pub fn axis_rows(axis: &str) -> Option<Vec<AblationRow>> {
    let v3 = [("variant", "v3"), ("basis_mode", "gram_schmidt")];
    let with = |extra: &[(&'static str, &'static str)]| -> Vec<(&'static str, &'static str)> {
        v3.iter().chain(extra).copied().collect()
    };
    let rows = match axis {
        "variant" => vec![
            AblationRow::new(axis, "none", &[("variant", "none")]),
            AblationRow::new(axis, "v1", &[("variant", "v1")]),
            AblationRow::new(axis, "v2", &[("variant", "v2"), ("basis_mode", "gram_schmidt")]),
            AblationRow::new(axis, "v3 raw", &[("variant", "v3"), ("basis_mode", "raw")]),
            AblationRow::new(axis, "v3", &v3),
        ],
        "basis_size" => ["2", "4", "8", "16"]
            .iter()
            .map(|m| AblationRow::new(axis, &format!("M={m}"), &with(&[("basis_size", m)])))
            .collect(),
        "time_encoder" => [("0", "64"), ("1", "64"), ("2", "32"), ("2", "64"), ("3", "64")]
            .iter()
            .map(|(layers, width)| {
                AblationRow::new(
                    axis,
                    &format!("{layers}x{width}"),
                    &with(&[("time_hidden_layers", layers), ("time_hidden_width", width)]),
                )
            })
            .collect(),
        "positives" => ["1", "2", "4"]
            .iter()
            .map(|p| AblationRow::new(axis, &format!("P={p}"), &with(&[("num_positives", p)])))
            .collect(),
        "framework" => vec![
            AblationRow::new(axis, "moco none", &[("variant", "none"), ("framework", "moco")]),
            AblationRow::new(axis, "moco v3", &with(&[("framework", "moco")])),
            AblationRow::new(axis, "byol none", &[("variant", "none"), ("framework", "byol")]),
            AblationRow::new(axis, "byol v3", &with(&[("framework", "byol")])),
        ],
        _ => return None,
    };
    Some(rows)
}

/// Rows for the requested axes, in order.
pub fn grid(axes: &[&str]) -> std::result::Result<Vec<AblationRow>, String> {
    let mut rows = Vec::new();
    for axis in axes {
        rows.extend(axis_rows(axis).ok_or_else(|| format!("unknown ablation axis `{axis}`"))?);
    }
    Ok(rows)
}

/// Evaluation of one pre-training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub final_loss: f64,
    pub probe_accuracy: f64,
    pub probe_accuracy_blended: f64,
    pub alignment_rho: f64,
    pub untrained_alignment_rho: f64,
}

/// Mean loss over the last `min(20, steps)` steps.
fn tail_loss(losses: &[f64]) -> f64 {
    let n = losses.len().clamp(1, 20);
    losses[losses.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
}

/// The noise-free stream alignment is measured on, fixed by the run seed.
pub fn alignment_stream(cfg: &RunConfig, dataset: &Dataset) -> Result<Stream> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ALIGN_STREAM_ID);
    dataset.noise_free(&dataset.draw_stream(ALIGN_STREAM_ID, &mut rng)?)
}

/// Trains `cfg` from scratch, then probes and measures alignment on a
/// noise-free stream for both the trained and the untrained model.
pub fn evaluate(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let untrained = trainer.checkpoint();
    let metrics = trainer.run_to_end(|_| {})?;
    let trained = trainer.checkpoint();
    let losses: Vec<f64> = metrics.iter().map(|m| m.loss).collect();

    let probe = linear_probe(&trained, ProbeFeatures::Representation)?;
    let probe_blended = linear_probe(&trained, ProbeFeatures::Blended)?;

    let (model, store, dataset) = restore_model(&trained)?;
    let (model0, store0, _) = restore_model(&untrained)?;
    let stream = alignment_stream(cfg, &dataset)?;
    let rho = time_alignment(&model, &store, &stream, cfg.align_segments)?.blended.rho;
    let rho0 = time_alignment(&model0, &store0, &stream, cfg.align_segments)?
        .blended
        .rho;

    Ok(RunOutcome {
        seed: cfg.seed,
        final_loss: if losses.is_empty() {
            f64::NAN
        } else {
            tail_loss(&losses)
        },
        probe_accuracy: probe.test_accuracy,
        probe_accuracy_blended: probe_blended.test_accuracy,
        alignment_rho: rho,
        untrained_alignment_rho: rho0,
    })
}

/// Per-row aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowSummary {
    pub row: AblationRow,
    pub outcomes: Vec<RunOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_accuracy_blended: f64,
    pub mean_rho: f64,
}

impl RowSummary {
    pub fn new(row: AblationRow, outcomes: Vec<RunOutcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        let mean = |f: fn(&RunOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
        let mean_accuracy = mean(|o| o.probe_accuracy);
        let var = outcomes
            .iter()
            .map(|o| (o.probe_accuracy - mean_accuracy).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        RowSummary {
            mean_accuracy,
            std_accuracy: var.sqrt(),
            mean_accuracy_blended: mean(|o| o.probe_accuracy_blended),
            mean_rho: mean(|o| o.alignment_rho),
            row,
            outcomes,
        }
    }
}

/// Tab-separated summary with the base config as `#` comment lines.
pub fn summary_table(base: &RunConfig, seeds: &[u64], rows: &[RowSummary]) -> String {
    let mut out = String::new();
    for line in base.to_text().lines() {
        let _ = writeln!(out, "# {line}");
    }
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "# seeds = {}", seeds.join(","));
    let _ = writeln!(
        out,
        "axis\trow\tmean_acc\tstd_acc\tmean_acc_blended\tmean_rho\tper_seed_acc"
    );
    for r in rows {
        let per_seed: Vec<String> = r.outcomes.iter().map(|o| format!("{:.4}", o.probe_accuracy)).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{}",
            r.row.axis,
            r.row.label,
            r.mean_accuracy,
            r.std_accuracy,
            r.mean_accuracy_blended,
            r.mean_rho,
            per_seed.join(",")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_axis_has_rows_with_valid_configs() {
        let rows = grid(&AXES).unwrap();
        assert!(rows.len() >= 15);
        for r in &rows {
            r.config(&RunConfig::default(), 3).unwrap();
        }
        assert!(grid(&["nope"]).is_err());
    }

    #[test]
    fn row_summary_statistics() {
        let outcome = |acc: f64| RunOutcome {
            seed: 0,
            final_loss: 1.0,
            probe_accuracy: acc,
            probe_accuracy_blended: acc,
            alignment_rho: 0.5,
            untrained_alignment_rho: 0.5,
        };
        let s = RowSummary::new(AblationRow::new("variant", "v3", &[]), vec![outcome(0.6), outcome(0.8)]);
        assert!((s.mean_accuracy - 0.7).abs() < 1e-15);
        assert!((s.std_accuracy - 0.02f64.sqrt()).abs() < 1e-15);
        let table = summary_table(&RunConfig::default(), &[0, 1], &[s]);
        assert!(table.contains("# variant = v3\n"));
        assert!(table.lines().last().unwrap().starts_with("variant\tv3\t0.7000\t"));
    }

    #[test]
    fn tail_loss_uses_last_twenty() {
        let losses: Vec<f64> = (0..30).map(f64::from).collect();
        assert_eq!(tail_loss(&losses), (10..30).sum::<i32>() as f64 / 20.0);
        assert_eq!(tail_loss(&[2.0]), 2.0);
    }
}
