//! Gradient checks and invariant suites runnable on any build.
//!
//! Each check returns a [`Check`] with the measured worst case, so callers can
//! print a report or fail on the first violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{info_nce_batch, momentum_update, normalize_keys, Denominator, Framework, NegativeQueue};
use crate::error::Result;
use crate::latent_basis::{complement_residual, orthogonality_error, orthogonalize, span_project, BasisMode};
use crate::navigation::{AttentionReading, Variant};
use crate::numerics::{grad_check_many, Matrix, Tape};
use crate::params::ParamStore;
use crate::synthetic_data::{sample_views, Augmentation, ClipEncoder, ClipView, Dataset, ViewSampling};
use crate::time_encoder::TimeShift;
use crate::trainer_eval::model::{LtnModel, StepBatch};
use crate::trainer_eval::train::dataset_spec;
use crate::trainer_eval::RunConfig;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LOCALITY_TOLERANCE: f64 = 1e-9;
pub const INFO_NCE_TOLERANCE: f64 = 1e-10;
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst measured deviation.
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            passed: worst.is_finite() && worst < tolerance,
            worst,
            tolerance,
        }
    }

    fn failed(name: impl Into<String>, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            passed: false,
            worst: f64::INFINITY,
            tolerance,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {}: worst {:.3e} (tol {:.0e})",
            self.name, self.worst, self.tolerance
        )
    }
}

/// A tiny model configuration for finite-difference checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub config: RunConfig,
    pub negatives: usize,
}

/// `count` configurations cycling through every variant and both
/// denominators, with randomized widths, depths, and basis settings.
pub fn grad_cases(count: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = [
        Variant::None,
        Variant::LinearAdd,
        Variant::Attention,
        Variant::LinearTransform,
    ];
    let denominators = [Denominator::PosNeg, Denominator::NegOnly];
    (0..count)
        .map(|i| {
            let mut cfg = RunConfig::with_dim(rng.gen_range(6..=10));
            cfg.variant = variants[i % variants.len()];
            cfg.denominator = denominators[(i / variants.len()) % denominators.len()];
            cfg.basis_size = rng.gen_range(1..=3);
            cfg.basis_mode = if rng.gen_bool(0.5) {
                BasisMode::Orthogonalized
            } else {
                BasisMode::Raw
            };
            cfg.attention = if rng.gen_bool(0.5) {
                AttentionReading::Hadamard
            } else {
                AttentionReading::ScalarProjection
            };
            cfg.proj_dim = rng.gen_range(2..=4);
            cfg.encoder_hidden = rng.gen_range(6..=10);
            cfg.time_inner_width = rng.gen_range(1..=3);
            cfg.time_hidden_width = rng.gen_range(3..=6);
            cfg.time_hidden_layers = rng.gen_range(0..=3);
            cfg.features = 4;
            cfg.clip_length = 2;
            cfg.frames = 12;
            cfg.duration = 3.0;
            cfg.batch_size = rng.gen_range(2..=3);
            cfg.num_positives = rng.gen_range(1..=3);
            cfg.temperature = rng.gen_range(0.2..1.0);
            cfg.seed = rng.gen();
            GradCase {
                config: cfg,
                negatives: rng.gen_range(1..=5),
            }
        })
        .collect()
}

/// Builds the model and a batch with real views; keys come from the model
/// itself, negatives are random unit rows.
pub fn grad_case_inputs(case: &GradCase) -> Result<(LtnModel, ParamStore, StepBatch)> {
    let cfg = &case.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = LtnModel::new(cfg, &mut store, &mut rng)?;
    // Zero-initialized biases put ReLU inputs exactly on the kink (for example
    // at t_start = 0); a small offset moves the check to a generic point.
    for v in store.values_mut() {
        let noise = Matrix::randn(v.rows(), v.cols(), 0.1, &mut rng);
        *v = v.add(&noise)?;
    }
    let dataset = Dataset::new(dataset_spec(cfg), cfg.seed)?;
    let sampling = ViewSampling {
        clip_length: cfg.clip_length,
        min_gap: None,
        augmentation: Augmentation::default(),
    };
    let mut queries = Vec::new();
    let mut keys: Vec<Vec<ClipView>> = vec![Vec::new(); cfg.num_positives];
    for i in 0..cfg.batch_size {
        let stream = dataset.draw_stream(i as u64, &mut rng)?;
        let (q, ks) = sample_views(&stream, cfg.num_positives, &sampling, &mut rng)?;
        queries.push(q);
        for (j, k) in ks.into_iter().enumerate() {
            keys[j].push(k);
        }
    }
    let key_mats = keys
        .iter()
        .map(|ks| model.key_projections(&store, &ks.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ClipView> = queries.iter().collect();
    let negatives = normalize_keys(&Matrix::randn(case.negatives, cfg.proj_dim, 1.0, &mut rng))?;
    let batch = StepBatch {
        query_clips: ClipEncoder::stack(&refs)?,
        query_times: model.time_column(&refs),
        keys: key_mats,
        negatives,
    };
    Ok((model, store, batch))
}

/// Finite-difference check of the whole objective against every parameter.
pub fn full_loss_grad_error(case: &GradCase) -> Result<f64> {
    let (model, store, batch) = grad_case_inputs(case)?;
    let cfg = &case.config;
    grad_check_many(
        |tape, vars| {
            Ok(model
                .loss(tape, vars, &batch, cfg.framework, cfg.temperature, cfg.denominator)?
                .loss)
        },
        store.values(),
        1e-6,
    )
}

pub fn check_full_loss_gradients(count: usize, seed: u64) -> Vec<Check> {
    grad_cases(count, seed)
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let cfg = &case.config;
            let name = format!(
                "grad {i:02} {} {} {} dim={} M={} layers={} P={} N={}",
                cfg.variant,
                cfg.denominator,
                match cfg.basis_mode {
                    BasisMode::Raw => "raw",
                    _ => "gs",
                },
                cfg.dim,
                cfg.basis_size,
                cfg.time_hidden_layers,
                cfg.num_positives,
                case.negatives
            );
            match full_loss_grad_error(case) {
                Ok(e) => Check::new(name, e, GRAD_TOLERANCE),
                Err(_) => Check::failed(name, GRAD_TOLERANCE),
            }
        })
        .collect()
}

/// Gradient of the negative-free objective, which has its own predictor.
pub fn check_byol_gradients(seed: u64) -> Check {
    let mut case = grad_cases(4, seed).pop().expect("four cases");
    case.config.framework = Framework::Byol;
    match full_loss_grad_error(&case) {
        Ok(e) => Check::new("grad byol v3", e, GRAD_TOLERANCE),
        Err(_) => Check::failed("grad byol v3", GRAD_TOLERANCE),
    }
}

/// Worst locality violation of the linear transform over random `(f, dt)`.
///
/// Returns `max(off_span / (1 + |f' - f|), |complement(f') - complement(f)|)`.
pub fn subspace_locality_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < pairs {
        let mut cfg = RunConfig::with_dim(rng.gen_range(8..=32));
        cfg.variant = Variant::LinearTransform;
        cfg.basis_size = rng.gen_range(1..cfg.dim.min(9));
        let mut store = ParamStore::new();
        let model = LtnModel::new(&cfg, &mut store, &mut rng)?;
        // Move the raw basis off its orthonormal start.
        let raw = model.basis().expect("v3 has a basis").raw;
        let jitter = Matrix::randn(cfg.dim, cfg.basis_size, 0.3, &mut rng);
        *store.get_mut(raw) = store.get(raw).add(&jitter)?;
        let q = model.frame_values(&store)?.expect("v3 has a frame");
        let n = (pairs - done).min(50);
        let reps = Matrix::randn(n, cfg.dim, 3.0, &mut rng);
        let shifts = (0..n)
            .map(|_| TimeShift::new(rng.gen_range(0.0..cfg.duration)))
            .collect::<Result<Vec<_>>>()?;
        let nav = model.navigator.navigate(&store, &reps, &shifts)?;
        for r in 0..n {
            let f = Matrix::row_vector(reps.row(r));
            let fp = Matrix::row_vector(nav.blended.row(r));
            let delta = fp.sub(&f)?;
            let off_span = complement_residual(&delta, &q)?.frobenius_norm();
            worst = worst.max(off_span / (1.0 + delta.frobenius_norm()));
            let drift = complement_residual(&fp, &q)?.max_abs_diff(&complement_residual(&f, &q)?)?;
            worst = worst.max(drift);
        }
        done += n;
    }
    Ok(worst)
}

/// Orthonormality of Gram-Schmidt frames and the projection identities.
pub fn basis_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dim = rng.gen_range(2..=64);
        let m = rng.gen_range(1..dim);
        let q = orthogonalize(&Matrix::randn(dim, m, 1.0, &mut rng))?;
        worst = worst.max(orthogonality_error(&q));
        let v = Matrix::randn(1, dim, 1.0, &mut rng);
        let inside = span_project(&v, &q)?.matmul_t(&q)?;
        let outside = complement_residual(&v, &q)?;
        worst = worst.max(inside.add(&outside)?.max_abs_diff(&v)?);
        worst = worst.max(span_project(&outside, &q)?.max_abs());
    }
    Ok(worst)
}

/// Direct scalar evaluation of the multi-positive objective for one query.
pub fn info_nce_scalar(pos: &[f64], neg: &[f64], denominator: Denominator) -> f64 {
    let sp: f64 = pos.iter().map(|s| s.exp()).sum();
    let sn: f64 = neg.iter().map(|s| s.exp()).sum();
    match denominator {
        Denominator::PosNeg => -(sp / (sp + sn)).ln(),
        Denominator::NegOnly => -(sp / sn).ln(),
    }
}

/// Batched tape objective against [`info_nce_scalar`] on random unit vectors.
pub fn info_nce_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let b = rng.gen_range(1..=3);
        let p = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=5);
        let w = rng.gen_range(2..=6);
        let temp = rng.gen_range(0.05..1.0);
        let q = normalize_keys(&Matrix::randn(b, w, 1.0, &mut rng))?;
        let keys = (0..p)
            .map(|_| normalize_keys(&Matrix::randn(b, w, 1.0, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let negs = normalize_keys(&Matrix::randn(n, w, 1.0, &mut rng))?;
        for denominator in [Denominator::PosNeg, Denominator::NegOnly] {
            let mut tape = Tape::new();
            let qv = tape.leaf(q.clone())?;
            let loss = info_nce_batch(&mut tape, qv, &keys, &negs, temp, denominator)?;
            let got = tape.scalar(loss);
            let want = (0..b)
                .map(|r| {
                    let sim = |m: &Matrix, i: usize| crate::numerics::dot(q.row(r), m.row(i)) / temp;
                    let pos: Vec<f64> = keys.iter().map(|k| sim(k, r)).collect();
                    let neg: Vec<f64> = (0..n).map(|i| sim(&negs, i)).collect();
                    info_nce_scalar(&pos, &neg, denominator)
                })
                .sum::<f64>()
                / b as f64;
            worst = worst.max((got - want).abs());
        }
    }
    Ok(worst)
}

/// FIFO replay: after many single-key enqueues the queue holds exactly the
/// most recent `capacity` keys, oldest first. Returns the number of mismatches.
pub fn queue_replay_mismatches(enqueues: usize, capacity: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue = NegativeQueue::new(capacity, 3)?;
    let mut history = Vec::with_capacity(enqueues);
    for _ in 0..enqueues {
        let k = normalize_keys(&Matrix::randn(1, 3, 1.0, &mut rng))?;
        queue.enqueue(&k)?;
        history.push(k);
    }
    let held = queue.to_matrix();
    let expected = &history[enqueues.saturating_sub(capacity)..];
    let mut mismatches = held.rows().abs_diff(expected.len());
    for (i, k) in expected.iter().enumerate().take(held.rows()) {
        if held.row(i) != k.row(0) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Momentum arithmetic against the scalar rule at the boundary and typical rates.
pub fn momentum_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 0.99, 1.0] {
        let online = Matrix::randn(3, 4, 1.0, &mut rng);
        let mut shadow = Matrix::randn(3, 4, 1.0, &mut rng);
        let before = shadow.clone();
        momentum_update(&mut shadow, &online, m)?;
        for i in 0..12 {
            let want = m * before.data()[i] + (1.0 - m) * online.data()[i];
            worst = worst.max((shadow.data()[i] - want).abs());
        }
        if m == 1.0 {
            worst = worst.max(shadow.max_abs_diff(&before)?);
        }
        if m == 0.0 {
            worst = worst.max(shadow.max_abs_diff(&online)?);
        }
    }
    Ok(worst)
}

/// Backward of a sum of losses equals the sum of separate backwards.
pub fn tape_linearity_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::randn(3, 4, 1.0, &mut rng);
    let b = Matrix::randn(4, 2, 1.0, &mut rng);
    let grads = |which: u8| -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone())?;
        let bv = tape.leaf(b.clone())?;
        let prod = tape.matmul(av, bv)?;
        let act = tape.relu(prod)?;
        let l1 = tape.sum(act)?;
        let sm = tape.softmax_rows(prod)?;
        let sq = tape.mul(sm, sm)?;
        let l2 = tape.mean(sq)?;
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => tape.add(l1, l2)?,
        };
        let mut g = tape.backward(loss)?;
        Ok((g.take(av), g.take(bv)))
    };
    let (a1, b1) = grads(1)?;
    let (a2, b2) = grads(2)?;
    let (a12, b12) = grads(0)?;
    Ok(a12.max_abs_diff(&a1.add(&a2)?)?.max(b12.max_abs_diff(&b1.add(&b2)?)?))
}

fn measured(name: &str, value: Result<f64>, tolerance: f64) -> Check {
    match value {
        Ok(v) => Check::new(name, v, tolerance),
        Err(_) => Check::failed(name, tolerance),
    }
}

/// Every suite; the build is healthy when all checks pass.
pub fn run_all() -> Vec<Check> {
    let mut checks = check_full_loss_gradients(24, 1);
    checks.push(check_byol_gradients(2));
    checks.push(measured(
        "subspace locality, 1000 pairs",
        subspace_locality_error(1000, 3),
        LOCALITY_TOLERANCE,
    ));
    checks.push(measured(
        "orthonormal frames",
        basis_error(200, 4),
        ORTHOGONALITY_TOLERANCE,
    ));
    checks.push(measured(
        "info_nce vs scalar formula",
        info_nce_error(200, 5),
        INFO_NCE_TOLERANCE,
    ));
    checks.push(measured(
        "queue replay, 1000 enqueues",
        queue_replay_mismatches(1000, 64, 6).map(|m| m as f64),
        0.5,
    ));
    checks.push(measured("momentum arithmetic", momentum_error(7), 1e-15));
    checks.push(measured("tape linearity", tape_linearity_error(8), 1e-12));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_cases_cover_every_variant_and_denominator() {
        let cases = grad_cases(24, 1);
        for v in [
            Variant::None,
            Variant::LinearAdd,
            Variant::Attention,
            Variant::LinearTransform,
        ] {
            for d in [Denominator::PosNeg, Denominator::NegOnly] {
                assert!(cases.iter().any(|c| c.config.variant == v && c.config.denominator == d));
            }
        }
    }

    #[test]
    fn scalar_formula_symmetric_case() {
        assert!((info_nce_scalar(&[0.3], &[0.3], Denominator::PosNeg) - 2f64.ln()).abs() < 1e-15);
        assert!(info_nce_scalar(&[0.3], &[0.3], Denominator::NegOnly).abs() < 1e-15);
    }

    #[test]
    fn a_few_full_gradients() {
        for c in check_full_loss_gradients(8, 11) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn replay_detects_a_short_history() {
        assert_eq!(queue_replay_mismatches(10, 64, 0).unwrap(), 0);
        assert_eq!(queue_replay_mismatches(1000, 64, 0).unwrap(), 0);
    }

    #[test]
    fn check_display() {
        let c = Check::new("x", 1e-12, 1e-10);
        assert!(c.passed);
        assert_eq!(c.to_string(), "PASS x: worst 1.000e-12 (tol 1e-10)");
        assert!(!Check::new("nan", f64::NAN, 1.0).passed);
    }
}
