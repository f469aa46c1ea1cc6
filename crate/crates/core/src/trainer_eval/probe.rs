//! Linear-probe evaluation on frozen features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LtnError, Result};
use crate::numerics::Matrix;
use crate::params::ParamStore;
use crate::synthetic_data::{ClipView, Dataset};
use crate::time_encoder::TimeShift;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::LtnModel;
use super::train::{dataset_spec, seeded, INIT_STREAM, PROBE_STREAM};

/// Which representation the probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFeatures {
    /// Pre-navigation `f`.
    Representation,
    /// Time-blended `f'`.
    Blended,
}

#[derive(Clone, Debug)]
pub struct LabeledClips {
    pub views: Vec<ClipView>,
    pub labels: Vec<usize>,
}

/// Optimizer settings of the logistic classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl ProbeSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ProbeSettings {
            epochs: cfg.probe_epochs,
            learning_rate: cfg.probe_learning_rate,
            l2: cfg.probe_l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub features: ProbeFeatures,
    pub num_classes: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `features x classes`
    weight: Matrix,
    bias: Vec<f64>,
}

fn check_labels(x: &Matrix, labels: &[usize]) -> Result<usize> {
    if x.rows() != labels.len() {
        return Err(LtnError::Shape {
            op: "linear_probe",
            left: x.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(LtnError::Empty { op: "linear_probe" });
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(LtnError::invalid("linear probe needs at least two distinct labels"));
    }
    Ok(labels.iter().copied().max().unwrap_or(0) + 1)
}

impl LogisticProbe {
    /// Full-batch gradient descent on the mean cross-entropy plus `l2 |W|^2 / 2`.
    pub fn fit(x: &Matrix, labels: &[usize], settings: ProbeSettings) -> Result<Self> {
        let classes = check_labels(x, labels)?;
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = LogisticProbe {
            mean,
            scale,
            weight: Matrix::zeros(d, classes),
            bias: vec![0.0; classes],
        };
        let z = probe.standardize(x)?;
        for _ in 0..settings.epochs {
            let p = probe.probabilities_standardized(&z)?;
            let mut g = p;
            for (r, &l) in labels.iter().enumerate() {
                let row = g.row_mut(r);
                row[l] -= 1.0;
                for v in row.iter_mut() {
                    *v /= n as f64;
                }
            }
            let gw = z.t_matmul(&g)?;
            for c in 0..classes {
                let gb: f64 = (0..n).map(|r| g.get(r, c)).sum();
                probe.bias[c] -= settings.learning_rate * gb;
            }
            for (w, gw) in probe.weight.data_mut().iter_mut().zip(gw.data()) {
                *w -= settings.learning_rate * (gw + settings.l2 * *w);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(LtnError::Shape {
                op: "linear_probe",
                left: x.shape(),
                right: (x.rows(), self.mean.len()),
            });
        }
        let mut z = x.clone();
        for r in 0..z.rows() {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        Ok(z)
    }

    fn probabilities_standardized(&self, z: &Matrix) -> Result<Matrix> {
        let mut logits = z.matmul(&self.weight)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        crate::numerics::softmax_rows(&logits)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let p = self.probabilities_standardized(&self.standardize(x)?)?;
        Ok((0..p.rows())
            .map(|r| {
                let row = p.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(LtnError::Shape {
                op: "probe_accuracy",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        let hits = self.predict(x)?.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Fits on the training split and scores both splits.
pub fn probe_accuracy(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    settings: ProbeSettings,
) -> Result<(f64, f64)> {
    let probe = LogisticProbe::fit(train_x, train_y, settings)?;
    Ok((probe.accuracy(train_x, train_y)?, probe.accuracy(test_x, test_y)?))
}

/// Draws `clips_per_stream` unaugmented clips at uniform start frames from
/// each of `streams` fresh streams.
pub fn draw_labeled_clips<R: Rng + ?Sized>(
    dataset: &Dataset,
    streams: usize,
    clips_per_stream: usize,
    first_id: u64,
    rng: &mut R,
) -> Result<LabeledClips> {
    let len = dataset.spec.clip_length;
    let mut views = Vec::with_capacity(streams * clips_per_stream);
    let mut labels = Vec::with_capacity(streams * clips_per_stream);
    for i in 0..streams {
        let stream = dataset.draw_stream(first_id + i as u64, rng)?;
        let last = stream.num_frames() - len;
        for _ in 0..clips_per_stream {
            let start = rng.gen_range(0..=last);
            views.push(ClipView {
                clip: stream.slice(start, len)?,
                dt: TimeShift::new(stream.frame_time(start))?,
                stream_id: stream.id,
                augmentation_seed: 0,
            });
            labels.push(stream.class_label);
        }
    }
    Ok(LabeledClips { views, labels })
}

/// Network and parameters of a checkpoint, plus its dataset.
pub fn restore_model(ck: &Checkpoint) -> Result<(LtnModel, ParamStore, Dataset)> {
    let cfg = &ck.config;
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = LtnModel::new(cfg, &mut store, &mut seeded(cfg.seed, INIT_STREAM))?;
    if store.names() != ck.params.names() {
        return Err(LtnError::Format("parameter layout does not match the config".into()));
    }
    store.set_values(ck.params.values().to_vec())?;
    let dataset = Dataset::new(dataset_spec(cfg), cfg.dataset_seed())?;
    Ok((model, store, dataset))
}

pub fn extract_features(
    model: &LtnModel,
    store: &ParamStore,
    clips: &LabeledClips,
    which: ProbeFeatures,
) -> Result<Matrix> {
    let views: Vec<&ClipView> = clips.views.iter().collect();
    match which {
        ProbeFeatures::Representation => model.representations(store, &views),
        ProbeFeatures::Blended => Ok(model.blended(store, &views)?.blended),
    }
}

/// Probe splits for a config: disjoint streams drawn from the probe RNG stream.
pub fn probe_splits(cfg: &RunConfig, dataset: &Dataset) -> Result<(LabeledClips, LabeledClips)> {
    let mut rng: ChaCha8Rng = seeded(cfg.seed, PROBE_STREAM);
    let train = draw_labeled_clips(
        dataset,
        cfg.probe_train_streams,
        cfg.probe_clips_per_stream,
        0,
        &mut rng,
    )?;
    let test = draw_labeled_clips(
        dataset,
        cfg.probe_test_streams,
        cfg.probe_clips_per_stream,
        cfg.probe_train_streams as u64,
        &mut rng,
    )?;
    Ok((train, test))
}

/// Freezes the checkpoint's encoder and reports held-out probe accuracy.
pub fn linear_probe(ck: &Checkpoint, which: ProbeFeatures) -> Result<ProbeReport> {
    let (model, store, dataset) = restore_model(ck)?;
    let (train, test) = probe_splits(&ck.config, &dataset)?;
    let train_x = extract_features(&model, &store, &train, which)?;
    let test_x = extract_features(&model, &store, &test, which)?;
    let (train_accuracy, test_accuracy) = probe_accuracy(
        &train_x,
        &train.labels,
        &test_x,
        &test.labels,
        ProbeSettings::from_config(&ck.config),
    )?;
    Ok(ProbeReport {
        features: which,
        num_classes: dataset.num_classes(),
        train_examples: train.labels.len(),
        test_examples: test.labels.len(),
        train_accuracy,
        test_accuracy,
    })
}
