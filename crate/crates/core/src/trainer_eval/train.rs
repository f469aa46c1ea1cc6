use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{ContrastiveConfig, ContrastiveState, Framework};
use crate::error::{LtnError, Result};
use crate::latent_basis::orthogonality_error;
use crate::numerics::{Matrix, Tape};
use crate::params::ParamStore;
use crate::synthetic_data::{sample_views, Augmentation, ClipEncoder, ClipView, Dataset, DatasetSpec, ViewSampling};

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use super::model::{LtnModel, StepBatch};

/// RNG streams derived from the run seed.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const PROBE_STREAM: u64 = 2;
pub(crate) const QUEUE_STREAM: u64 = 3;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub queue_size: usize,
    /// `max |Q^T Q - I|` of the frame after the update; absent without a basis.
    pub basis_orthogonality_error: Option<f64>,
}

pub fn dataset_spec(cfg: &RunConfig) -> DatasetSpec {
    DatasetSpec {
        regime: cfg.regime,
        features: cfg.features,
        frames: cfg.frames,
        duration: cfg.duration,
        clip_length: cfg.clip_length,
        speed: cfg.speed,
        static_scale: cfg.static_scale,
        noise: cfg.stream_noise,
        texture_classes: cfg.texture_classes,
    }
}

pub fn contrastive_config(cfg: &RunConfig) -> ContrastiveConfig {
    ContrastiveConfig {
        framework: cfg.framework,
        denominator: cfg.denominator,
        temperature: cfg.temperature,
        momentum: cfg.momentum,
        queue_capacity: cfg.queue_capacity,
        num_positives: cfg.num_positives,
    }
}

/// A single pre-training run.
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub model: LtnModel,
    pub store: ParamStore,
    pub state: ContrastiveState,
    velocity: Vec<Matrix>,
    data_rng: ChaCha8Rng,
    sampling: ViewSampling,
    step: usize,
    next_stream_id: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = seeded(config.seed, INIT_STREAM);
        let dataset = Dataset::new(dataset_spec(&config), config.dataset_seed())?;
        let mut store = ParamStore::new();
        let model = LtnModel::new(&config, &mut store, &mut init)?;
        let state = ContrastiveState::new(
            contrastive_config(&config),
            &store,
            &model.shadowed_params(&store),
            config.proj_dim,
        )?;
        let velocity = store
            .values()
            .iter()
            .map(|v| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        let sampling = ViewSampling {
            clip_length: config.clip_length,
            min_gap: config.view_gap,
            augmentation: Augmentation {
                strength: config.augment_strength,
                ..Default::default()
            },
        };
        let mut trainer = Trainer {
            data_rng: seeded(config.seed, DATA_STREAM),
            config,
            dataset,
            model,
            store,
            state,
            velocity,
            sampling,
            step: 0,
            next_stream_id: 0,
        };
        trainer.warm_queue()?;
        Ok(trainer)
    }

    /// Fills the queue with keys of the initial key encoder on views of fresh
    /// streams, so early negatives look like real ones. Draws from its own RNG
    /// stream; stream ids continue after the training ids' range.
    fn warm_queue(&mut self) -> Result<()> {
        let mut rng = seeded(self.config.seed, QUEUE_STREAM);
        let key_store = self.state.key_params(&self.store);
        let mut id = u64::MAX / 2;
        let mut pushed = 0;
        while pushed < self.state.queue.capacity() {
            let mut views = Vec::new();
            for _ in 0..self.config.batch_size {
                let stream = self.dataset.draw_stream(id, &mut rng)?;
                id += 1;
                let (_, keys) = sample_views(&stream, self.config.num_positives, &self.sampling, &mut rng)?;
                views.extend(keys);
            }
            let refs: Vec<&ClipView> = views.iter().collect();
            let keys = self.model.key_projections(&key_store, &refs)?;
            self.state.queue.enqueue(&keys)?;
            pushed += keys.rows();
        }
        Ok(())
    }

    /// Completed optimizer steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws the next batch of views: `B` queries and `P` keys per query,
    /// returned as `keys[j][b]`.
    fn draw_views(&mut self) -> Result<(Vec<ClipView>, Vec<Vec<ClipView>>)> {
        let b = self.config.batch_size;
        let p = self.config.num_positives;
        let mut queries = Vec::with_capacity(b);
        let mut keys: Vec<Vec<ClipView>> = (0..p).map(|_| Vec::with_capacity(b)).collect();
        for _ in 0..b {
            let stream = self.dataset.draw_stream(self.next_stream_id, &mut self.data_rng)?;
            self.next_stream_id += 1;
            let (q, ks) = sample_views(&stream, p, &self.sampling, &mut self.data_rng)?;
            queries.push(q);
            for (j, k) in ks.into_iter().enumerate() {
                keys[j].push(k);
            }
        }
        Ok((queries, keys))
    }

    /// One optimization step. Errors leave the trainer in an unspecified state.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let (queries, keys) = self.draw_views()?;
        let b = self.config.batch_size;

        let key_store = self.state.key_params(&self.store);
        let key_views: Vec<&ClipView> = keys.iter().flatten().collect();
        let key_proj = self.model.key_projections(&key_store, &key_views)?;
        let per_positive = (0..keys.len())
            .map(|j| {
                let w = key_proj.cols();
                Matrix::from_vec(b, w, key_proj.data()[j * b * w..(j + 1) * b * w].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;

        let query_views: Vec<&ClipView> = queries.iter().collect();
        let batch = StepBatch {
            query_clips: ClipEncoder::stack(&query_views)?,
            query_times: self.model.time_column(&query_views),
            keys: per_positive,
            negatives: self.state.queue.to_matrix(),
        };

        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape)?;
        let out = self.model.loss(
            &mut tape,
            &vars,
            &batch,
            self.config.framework,
            self.config.temperature,
            self.config.denominator,
        )?;
        let loss = tape.scalar(out.loss);
        let mut grads = tape.backward(out.loss)?;

        let lr = self.config.learning_rate;
        let mu = self.config.sgd_momentum;
        for (i, var) in vars.iter().enumerate() {
            let g = grads.take(*var);
            let v = &mut self.velocity[i];
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            let p = &mut self.store.values_mut()[i];
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        if !self.store.all_finite() {
            return Err(LtnError::NonFinite { op: "sgd update" });
        }
        self.state.momentum_update(&self.store)?;
        if self.config.framework == Framework::Moco {
            self.state.queue.enqueue(&key_proj)?;
        }

        let frame = self.model.frame_values(&self.store)?;
        let metrics = StepMetrics {
            step: self.step,
            loss,
            queue_size: self.state.queue.len(),
            basis_orthogonality_error: frame.as_ref().map(orthogonality_error),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `n` steps, reporting each; failures become [`LtnError::Abort`] with the step index.
    pub fn run(&mut self, n: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let step = self.step;
            let m = self.step().map_err(|e| match e {
                LtnError::Abort { .. } => e,
                other => LtnError::Abort {
                    step,
                    source: Box::new(other),
                },
            })?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Runs until `config.steps` steps are done.
    pub fn run_to_end(&mut self, on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let remaining = self.config.steps.saturating_sub(self.step);
        self.run(remaining, on_step)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.store.clone(),
            momentum: self.state.momentum_params.clone(),
            velocity: self.velocity.clone(),
            queue: self.state.queue.clone(),
            rng: RngState::capture(&self.data_rng),
            next_stream_id: self.next_stream_id,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone())?;
        if t.store.names() != ck.params.names() {
            return Err(LtnError::Format("parameter layout does not match the config".into()));
        }
        t.store.set_values(ck.params.values().to_vec())?;
        if ck.momentum.len() != t.state.momentum_params.len() {
            return Err(LtnError::Format("momentum layout does not match the config".into()));
        }
        for ((id, shadow), (cid, cvalue)) in t.state.momentum_params.iter_mut().zip(&ck.momentum) {
            if id != cid || shadow.shape() != cvalue.shape() {
                return Err(LtnError::Format("momentum layout does not match the config".into()));
            }
            *shadow = cvalue.clone();
        }
        if ck.velocity.len() != t.velocity.len()
            || ck.velocity.iter().zip(&t.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(LtnError::Format("optimizer state does not match the config".into()));
        }
        if ck.queue.capacity() != t.state.queue.capacity() || ck.queue.width() != t.state.queue.width() {
            return Err(LtnError::Format("queue shape does not match the config".into()));
        }
        t.velocity = ck.velocity.clone();
        t.state.queue = ck.queue.clone();
        t.data_rng = ck.rng.restore();
        t.step = ck.step;
        t.next_stream_id = ck.next_stream_id;
        Ok(t)
    }
}

/// Pre-trains from scratch for `config.steps` steps.
pub fn train(config: RunConfig) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(config)?;
    let metrics = trainer.run_to_end(|_| {})?;
    Ok((trainer.checkpoint(), metrics))
}

/// Header record of a metrics log: the resolved config and seed.
pub fn metrics_header(config: &RunConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = config
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
        .collect();
    serde_json::json!({ "config": map, "seed": config.seed })
}

/// Writes the metrics log: a header line, then one JSON object per step.
pub fn write_metrics<W: Write>(mut w: W, config: &RunConfig, metrics: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{}", metrics_header(config))?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| LtnError::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: &str) -> RunConfig {
        let mut cfg = RunConfig::with_dim(16);
        cfg.set("variant", variant).unwrap();
        cfg.basis_size = 2;
        cfg.queue_capacity = 64;
        cfg.batch_size = 4;
        cfg.num_positives = 2;
        cfg.steps = 6;
        cfg
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = small("v3");
        cfg.learning_rate = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.store.clone();
        t.run(5, |_| {}).unwrap();
        assert_eq!(t.store, before);
    }

    #[test]
    fn identical_configs_give_identical_metrics() {
        for v in ["none", "v1", "v2", "v3"] {
            let (_, a) = train(small(v)).unwrap();
            let (_, b) = train(small(v)).unwrap();
            assert_eq!(a, b, "variant {v}");
        }
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let cfg = small("v3");
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        let all = straight.run(6, |_| {}).unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run(4, |_| {}).unwrap();
        let mut bytes = Vec::new();
        first.checkpoint().write(&mut bytes).unwrap();
        let ck = Checkpoint::read(&bytes[..]).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        let tail = resumed.run(2, |_| {}).unwrap();

        assert_eq!(&all[4..], &tail[..]);
        assert_eq!(straight.checkpoint(), resumed.checkpoint());
    }

    #[test]
    fn checkpoint_round_trips_bytes() {
        let mut t = Trainer::new(small("v2")).unwrap();
        t.run(2, |_| {}).unwrap();
        let ck = t.checkpoint();
        let mut a = Vec::new();
        ck.write(&mut a).unwrap();
        let back = Checkpoint::read(&a[..]).unwrap();
        assert_eq!(back, ck);
        let mut b = Vec::new();
        back.write(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_from_other_config_is_rejected() {
        let ck = Trainer::new(small("v3")).unwrap().checkpoint();
        let mut other = ck.clone();
        other.config.basis_size = 3;
        assert!(Trainer::from_checkpoint(&other).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut bytes = Vec::new();
        Trainer::new(small("none"))
            .unwrap()
            .checkpoint()
            .write(&mut bytes)
            .unwrap();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read(&bytes[..]), Err(LtnError::Format(_))));
    }

    #[test]
    fn queue_receives_every_key() {
        let cfg = small("v3");
        let per_step = cfg.batch_size * cfg.num_positives;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.state.queue.to_matrix();
        t.step().unwrap();
        let after = t.state.queue.to_matrix();
        let n = after.rows();
        assert_eq!(n, before.rows());
        // The oldest `per_step` rows were evicted; the rest shifted up.
        assert_eq!(
            after.data()[..(n - per_step) * after.cols()],
            before.data()[per_step * before.cols()..]
        );
    }

    #[test]
    fn unit_momentum_freezes_the_key_path() {
        let mut cfg = small("v3");
        cfg.momentum = 1.0;
        let mut t = Trainer::new(cfg).unwrap();
        let keys_before = t.state.key_params(&t.store);
        t.run(3, |_| {}).unwrap();
        assert_ne!(t.store, keys_before);
        assert_eq!(t.state.key_params(&t.store), keys_before);
    }

    #[test]
    fn byol_skips_the_queue() {
        let mut cfg = small("v3");
        cfg.set("framework", "byol").unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.state.queue.clone();
        let m = t.run(3, |_| {}).unwrap();
        assert_eq!(t.state.queue, before);
        assert!(m
            .iter()
            .all(|s| s.loss.is_finite() && s.loss >= -1e-12 && s.loss <= 4.0 + 1e-12));
    }

    #[test]
    fn failures_report_the_step() {
        let mut cfg = small("v3");
        cfg.learning_rate = 1e300;
        let mut t = Trainer::new(cfg).unwrap();
        match t.run(5, |_| {}) {
            Err(LtnError::Abort { step, source }) => {
                assert!(step <= 1, "aborted at {step}");
                assert!(source.is_numerical(), "{source}");
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn basis_metric_only_with_a_basis() {
        let (_, m) = train(small("v1")).unwrap();
        assert!(m.iter().all(|s| s.basis_orthogonality_error.is_none()));
        let (_, m) = train(small("v3")).unwrap();
        assert!(m.iter().all(|s| s.basis_orthogonality_error.unwrap() < 1e-8));
    }

    #[test]
    fn metrics_log_is_self_describing() {
        let cfg = small("v2");
        let (_, m) = train(cfg.clone()).unwrap();
        let mut out = Vec::new();
        write_metrics(&mut out, &cfg, &m).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["config"]["variant"], "v2");
        assert_eq!(header["seed"], cfg.seed);
        let first: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        for key in ["step", "loss", "queue_size", "basis_orthogonality_error"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(lines.count(), m.len() - 1);
    }
}
