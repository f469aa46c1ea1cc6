//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::time::{Duration, Instant};

use ltn_core::contrastive::{info_nce_batch, normalize_keys, Denominator};
use ltn_core::selftest::{check_full_loss_gradients, momentum_error, queue_replay_mismatches, subspace_locality_error};
use ltn_core::trainer_eval::ablation::{evaluate, RunOutcome};
use ltn_core::trainer_eval::train::write_metrics;
use ltn_core::trainer_eval::{Checkpoint, RunConfig, Trainer};
use ltn_core::{Matrix, Result, Tape};
use rayon::prelude::*;
use serde::Deserialize;

const ORTHOGONALITY_TOL: f64 = 1e-8;
const ORTHOGONALITY_BUDGET: Duration = Duration::from_secs(120);
const LOCALITY_TOL: f64 = 1e-9;
const LOCALITY_PAIRS: usize = 1000;
const GRAD_TOL: f64 = 1e-4;
const GRAD_CONFIGS: usize = 24;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const INFO_NCE_TOL: f64 = 1e-10;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ORDERING_MARGIN: f64 = 0.03;
const ORDERING_BUDGET: Duration = Duration::from_secs(30 * 60);
const ALIGNMENT_GAP: f64 = 0.3;
const INVARIANCE_SLACK: f64 = 0.02;
const REPLAY_ENQUEUES: usize = 1000;
const MOMENTUM_TOL: f64 = 1e-15;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn orthogonality() -> Result<Outcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(RunConfig::default())?;
    let metrics = trainer.run_to_end(|_| {})?;
    let elapsed = start.elapsed();
    let worst = metrics
        .iter()
        .map(|m| m.basis_orthogonality_error.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    Ok(Outcome::new(
        metrics.len() == 500 && worst < ORTHOGONALITY_TOL && elapsed < ORTHOGONALITY_BUDGET,
        format!(
            "max |QtQ - I| {worst:.2e} over {} steps (tol {ORTHOGONALITY_TOL:.0e}), {:.1}s",
            metrics.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn locality() -> Result<Outcome> {
    let worst = subspace_locality_error(LOCALITY_PAIRS, 2024)?;
    Ok(Outcome::new(
        worst < LOCALITY_TOL,
        format!("worst violation {worst:.2e} over {LOCALITY_PAIRS} pairs (tol {LOCALITY_TOL:.0e})"),
    ))
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let checks = check_full_loss_gradients(GRAD_CONFIGS, 77);
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    let passed = checks.iter().filter(|c| c.passed).count();
    Ok(Outcome::new(
        passed == checks.len() && passed >= 20 && elapsed < GRAD_BUDGET,
        format!(
            "{passed}/{} configs, worst relative error {worst:.2e} (tol {GRAD_TOL:.0e}), {:.1}s",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

#[derive(Deserialize)]
struct InfoNceCase {
    temperature: f64,
    query: Vec<f64>,
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<f64>>,
    pos_neg: f64,
    neg_only: f64,
}

fn rows(v: &[Vec<f64>]) -> Matrix {
    let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
    Matrix::from_rows(&refs)
}

fn info_nce_oracle() -> Result<Outcome> {
    let cases: Vec<InfoNceCase> =
        serde_json::from_str(include_str!("fixtures/info_nce_cases.json")).expect("fixture parses");
    let mut worst: f64 = 0.0;
    for case in &cases {
        let q = normalize_keys(&Matrix::row_vector(&case.query))?;
        let keys = case
            .positives
            .iter()
            .map(|k| normalize_keys(&Matrix::row_vector(k)))
            .collect::<Result<Vec<_>>>()?;
        let negs = normalize_keys(&rows(&case.negatives))?;
        for (mode, want) in [
            (Denominator::PosNeg, case.pos_neg),
            (Denominator::NegOnly, case.neg_only),
        ] {
            let mut tape = Tape::new();
            let qv = tape.leaf(q.clone())?;
            let loss = info_nce_batch(&mut tape, qv, &keys, &negs, case.temperature, mode)?;
            worst = worst.max((tape.scalar(loss) - want).abs());
        }
    }
    Ok(Outcome::new(
        !cases.is_empty() && worst < INFO_NCE_TOL,
        format!(
            "{} cases x 2 modes, worst |diff| {worst:.2e} (tol {INFO_NCE_TOL:.0e})",
            cases.len()
        ),
    ))
}

fn run_rows(rows: &[(&str, Vec<(&str, &str)>)], base: &RunConfig) -> Result<Vec<Vec<RunOutcome>>> {
    let jobs: Vec<(usize, RunConfig)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, (_, overrides))| {
            SEEDS.iter().map(move |&seed| {
                let mut cfg = base.clone();
                for (k, v) in overrides {
                    cfg.set(k, v)?;
                }
                cfg.seed = seed;
                Ok((i, cfg))
            })
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<RunOutcome>> = jobs.par_iter().map(|(_, cfg)| evaluate(cfg)).collect();
    let mut out = vec![Vec::new(); rows.len()];
    for ((i, _), r) in jobs.iter().zip(results) {
        out[*i].push(r?);
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracies(outcomes: &[RunOutcome]) -> String {
    let v: Vec<String> = outcomes.iter().map(|o| format!("{:.3}", o.probe_accuracy)).collect();
    v.join(",")
}

/// Runs the variant comparison once; ordering and alignment both read it.
fn variant_runs() -> Result<(Vec<Vec<RunOutcome>>, Duration)> {
    let rows = variant_rows();
    let start = Instant::now();
    let out = run_rows(&rows, &RunConfig::default())?;
    Ok((out, start.elapsed()))
}

fn variant_rows() -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
    vec![
        ("none", vec![("variant", "none")]),
        ("v2", vec![("variant", "v2"), ("basis_mode", "gram_schmidt")]),
        ("v3 raw", vec![("variant", "v3"), ("basis_mode", "raw")]),
        ("v3", vec![("variant", "v3"), ("basis_mode", "gram_schmidt")]),
    ]
}

fn ordering(runs: &[Vec<RunOutcome>], elapsed: Duration) -> Outcome {
    let means: Vec<f64> = runs.iter().map(|r| mean(r.iter().map(|o| o.probe_accuracy))).collect();
    let (none, v2, v3_raw, v3) = (means[0], means[1], means[2], means[3]);
    let passed =
        v3 >= v3_raw && v3_raw >= v2 && v2 >= none && v3 - none >= ORDERING_MARGIN && elapsed < ORDERING_BUDGET;
    let names: Vec<&str> = variant_rows().iter().map(|r| r.0).collect();
    let per: Vec<String> = names
        .iter()
        .zip(runs)
        .zip(&means)
        .map(|((n, r), m)| format!("{n} {m:.4} [{}]", accuracies(r)))
        .collect();
    Outcome::new(
        passed,
        format!(
            "{}; v3 - none {:+.4} (need v3 >= v3 raw >= v2 >= none and >= {ORDERING_MARGIN}), {:.0}s",
            per.join("; "),
            v3 - none,
            elapsed.as_secs_f64()
        ),
    )
}

fn alignment(runs: &[Vec<RunOutcome>]) -> Outcome {
    let v3 = &runs[3];
    let trained = mean(v3.iter().map(|o| o.alignment_rho));
    let untrained = mean(v3.iter().map(|o| o.untrained_alignment_rho));
    Outcome::new(
        trained - untrained >= ALIGNMENT_GAP,
        format!(
            "v3 rho trained {trained:.4}, untrained {untrained:.4}, gap {:+.4} (need >= {ALIGNMENT_GAP})",
            trained - untrained
        ),
    )
}

fn invariance() -> Result<Outcome> {
    let mut base = RunConfig::default();
    base.set("regime", "static-texture")?;
    let rows = vec![
        ("none", vec![("variant", "none")]),
        ("v3", vec![("variant", "v3"), ("basis_mode", "gram_schmidt")]),
    ];
    let runs = run_rows(&rows, &base)?;
    let none = mean(runs[0].iter().map(|o| o.probe_accuracy));
    let v3 = mean(runs[1].iter().map(|o| o.probe_accuracy));
    Ok(Outcome::new(
        v3 >= none - INVARIANCE_SLACK,
        format!(
            "none {none:.4} [{}], v3 {v3:.4} [{}] (need v3 >= none - {INVARIANCE_SLACK})",
            accuracies(&runs[0]),
            accuracies(&runs[1])
        ),
    ))
}

fn metrics_bytes(cfg: &RunConfig, metrics: &[ltn_core::trainer_eval::StepMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, cfg, metrics)?;
    Ok(buf)
}

fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ck.write(&mut buf)?;
    Ok(buf)
}

fn determinism() -> Result<Outcome> {
    let mut cfg = RunConfig::default();
    cfg.seed = 9;
    let run = || -> Result<(Vec<u8>, Vec<u8>)> {
        let mut t = Trainer::new(cfg.clone())?;
        let m = t.run_to_end(|_| {})?;
        Ok((metrics_bytes(&cfg, &m)?, checkpoint_bytes(&t.checkpoint())?))
    };
    let (metrics_a, ck_a) = run()?;
    let (metrics_b, ck_b) = run()?;
    let repeat = metrics_a == metrics_b && ck_a == ck_b;

    let half = cfg.steps / 2;
    let mut first = Trainer::new(cfg.clone())?;
    let mut metrics = first.run(half, |_| {})?;
    let saved = checkpoint_bytes(&first.checkpoint())?;
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::read(saved.as_slice())?)?;
    metrics.extend(resumed.run_to_end(|_| {})?);
    let resume = metrics_bytes(&cfg, &metrics)? == metrics_a && checkpoint_bytes(&resumed.checkpoint())? == ck_a;

    Ok(Outcome::new(
        repeat && resume,
        format!(
            "repeat byte-identical {repeat}, resume at step {half} bit-exact {resume} ({} metric bytes)",
            metrics_a.len()
        ),
    ))
}

fn queue_and_momentum() -> Result<Outcome> {
    let mismatches = queue_replay_mismatches(REPLAY_ENQUEUES, 64, 31)?;
    let momentum = momentum_error(32)?;
    Ok(Outcome::new(
        mismatches == 0 && momentum <= MOMENTUM_TOL,
        format!(
            "replay over {REPLAY_ENQUEUES} enqueues: {mismatches} mismatches; momentum at m in {{0, 0.5, 0.99, 1}}: worst {momentum:.1e} (tol {MOMENTUM_TOL:.0e})"
        ),
    ))
}

fn report(index: usize, name: &str, outcome: Result<Outcome>) -> bool {
    let outcome = outcome.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let verdict = if outcome.passed { "PASS" } else { "FAIL" };
    println!("{verdict} {index} {name}: {}", outcome.detail);
    outcome.passed
}

fn main() {
    let mut all = true;
    all &= report(1, "orthogonality", orthogonality());
    all &= report(2, "subspace locality", locality());
    all &= report(3, "gradients", gradients());
    all &= report(4, "info_nce oracle", info_nce_oracle());
    match variant_runs() {
        Ok((runs, elapsed)) => {
            all &= report(5, "variant ordering", Ok(ordering(&runs, elapsed)));
            all &= report(6, "time alignment", Ok(alignment(&runs)));
        }
        Err(e) => {
            all &= report(5, "variant ordering", Err(e));
            all &= report(6, "time alignment", Ok(Outcome::new(false, "no runs")));
        }
    }
    all &= report(7, "invariance preservation", invariance());
    all &= report(8, "determinism and resume", determinism());
    all &= report(9, "queue and momentum", queue_and_momentum());
    if !all {
        std::process::exit(1);
    }
}
