//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::contrastive::{Denominator, Framework};
use crate::error::{LtnError, Result};
use crate::latent_basis::BasisMode;
use crate::navigation::{AttentionReading, Variant};
use crate::synthetic_data::Regime;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub basis_mode: BasisMode,
    pub attention: AttentionReading,
    pub framework: Framework,
    pub denominator: Denominator,
    pub temperature: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub num_positives: usize,

    pub dim: usize,
    pub basis_size: usize,
    pub proj_dim: usize,
    pub encoder_hidden: usize,
    pub time_inner_width: usize,
    pub time_hidden_width: usize,
    pub time_hidden_layers: usize,

    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub steps: usize,
    pub batch_size: usize,

    pub regime: Regime,
    pub features: usize,
    pub frames: usize,
    pub duration: f64,
    pub clip_length: usize,
    pub speed: f64,
    pub static_scale: f64,
    pub stream_noise: f64,
    pub texture_classes: usize,
    pub augment_strength: f64,
    /// Minimum positive-view start gap in seconds; `None` means `duration / (2 (P + 1))`.
    pub view_gap: Option<f64>,

    pub seed: u64,
    /// Seed of the dataset structure (drift axis, prototypes); defaults to `seed`.
    pub dataset_seed: Option<u64>,

    pub probe_train_streams: usize,
    pub probe_test_streams: usize,
    pub probe_clips_per_stream: usize,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_l2: f64,
    pub align_segments: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::LinearTransform,
            basis_mode: BasisMode::Orthogonalized,
            attention: AttentionReading::Hadamard,
            framework: Framework::Moco,
            denominator: Denominator::PosNeg,
            temperature: 0.1,
            momentum: 0.99,
            queue_capacity: 1024,
            num_positives: 4,
            dim: 64,
            basis_size: 8,
            proj_dim: 16,
            encoder_hidden: 64,
            time_inner_width: 16,
            time_hidden_width: 64,
            time_hidden_layers: 2,
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            steps: 500,
            batch_size: 16,
            regime: Regime::TemporalDirection,
            features: 16,
            frames: 64,
            duration: 10.0,
            clip_length: 8,
            speed: 0.4,
            static_scale: 1.0,
            stream_noise: 0.05,
            texture_classes: 4,
            augment_strength: 1.0,
            view_gap: None,
            seed: 0,
            dataset_seed: None,
            probe_train_streams: 300,
            probe_test_streams: 300,
            probe_clips_per_stream: 2,
            probe_epochs: 300,
            probe_learning_rate: 0.5,
            probe_l2: 1e-4,
            align_segments: 20,
        }
    }
}

fn basis_mode_name(m: BasisMode) -> &'static str {
    match m {
        BasisMode::Orthogonalized => "gram_schmidt",
        BasisMode::StraightThrough => "straight_through",
        BasisMode::Raw => "raw",
    }
}

fn parse_basis_mode(s: &str) -> std::result::Result<BasisMode, String> {
    match s {
        "gram_schmidt" => Ok(BasisMode::Orthogonalized),
        "straight_through" => Ok(BasisMode::StraightThrough),
        "raw" => Ok(BasisMode::Raw),
        _ => Err(format!("expected gram_schmidt|straight_through|raw, got `{s}`")),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| LtnError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    /// Default values for a latent width, with dependent widths scaled to it.
    pub fn with_dim(dim: usize) -> Self {
        RunConfig {
            dim,
            proj_dim: (dim / 4).max(1),
            encoder_hidden: dim,
            time_inner_width: (dim / 4).max(1),
            time_hidden_width: dim,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = parse(key, v)?,
            "basis_mode" => self.basis_mode = parse_basis_mode(v).map_err(|e| LtnError::config(key, e))?,
            "attention" => self.attention = parse(key, v)?,
            "framework" => self.framework = parse(key, v)?,
            "denominator" => self.denominator = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "queue_capacity" => self.queue_capacity = parse(key, v)?,
            "num_positives" => self.num_positives = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "basis_size" => self.basis_size = parse(key, v)?,
            "proj_dim" => self.proj_dim = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, v)?,
            "time_inner_width" => self.time_inner_width = parse(key, v)?,
            "time_hidden_width" => self.time_hidden_width = parse(key, v)?,
            "time_hidden_layers" => self.time_hidden_layers = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "regime" => self.regime = parse(key, v)?,
            "features" => self.features = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "duration" => self.duration = parse(key, v)?,
            "clip_length" => self.clip_length = parse(key, v)?,
            "speed" => self.speed = parse(key, v)?,
            "static_scale" => self.static_scale = parse(key, v)?,
            "stream_noise" => self.stream_noise = parse(key, v)?,
            "texture_classes" => self.texture_classes = parse(key, v)?,
            "augment_strength" => self.augment_strength = parse(key, v)?,
            "view_gap" => self.view_gap = parse_optional(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "dataset_seed" => self.dataset_seed = parse_optional(key, v)?,
            "probe_train_streams" => self.probe_train_streams = parse(key, v)?,
            "probe_test_streams" => self.probe_test_streams = parse(key, v)?,
            "probe_clips_per_stream" => self.probe_clips_per_stream = parse(key, v)?,
            "probe_epochs" => self.probe_epochs = parse(key, v)?,
            "probe_learning_rate" => self.probe_learning_rate = parse(key, v)?,
            "probe_l2" => self.probe_l2 = parse(key, v)?,
            "align_segments" => self.align_segments = parse(key, v)?,
            _ => return Err(LtnError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("basis_mode", basis_mode_name(self.basis_mode).to_string()),
            ("attention", self.attention.to_string()),
            ("framework", self.framework.to_string()),
            ("denominator", self.denominator.to_string()),
            ("temperature", self.temperature.to_string()),
            ("momentum", self.momentum.to_string()),
            ("queue_capacity", self.queue_capacity.to_string()),
            ("num_positives", self.num_positives.to_string()),
            ("dim", self.dim.to_string()),
            ("basis_size", self.basis_size.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("encoder_hidden", self.encoder_hidden.to_string()),
            ("time_inner_width", self.time_inner_width.to_string()),
            ("time_hidden_width", self.time_hidden_width.to_string()),
            ("time_hidden_layers", self.time_hidden_layers.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("regime", self.regime.to_string()),
            ("features", self.features.to_string()),
            ("frames", self.frames.to_string()),
            ("duration", self.duration.to_string()),
            ("clip_length", self.clip_length.to_string()),
            ("speed", self.speed.to_string()),
            ("static_scale", self.static_scale.to_string()),
            ("stream_noise", self.stream_noise.to_string()),
            ("texture_classes", self.texture_classes.to_string()),
            ("augment_strength", self.augment_strength.to_string()),
            ("view_gap", show_optional(&self.view_gap)),
            ("seed", self.seed.to_string()),
            ("dataset_seed", show_optional(&self.dataset_seed)),
            ("probe_train_streams", self.probe_train_streams.to_string()),
            ("probe_test_streams", self.probe_test_streams.to_string()),
            ("probe_clips_per_stream", self.probe_clips_per_stream.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_learning_rate", self.probe_learning_rate.to_string()),
            ("probe_l2", self.probe_l2.to_string()),
            ("align_segments", self.align_segments.to_string()),
        ]
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| LtnError::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(LtnError::config(key, msg));
        if self.dim < 2 {
            return fail("dim", "must be at least 2");
        }
        if self.basis_size == 0 || self.basis_size >= self.dim {
            return fail("basis_size", "must satisfy 1 <= basis_size < dim");
        }
        for (key, v) in [
            ("proj_dim", self.proj_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("time_inner_width", self.time_inner_width),
            ("time_hidden_width", self.time_hidden_width),
            ("queue_capacity", self.queue_capacity),
            ("num_positives", self.num_positives),
            ("batch_size", self.batch_size),
            ("features", self.features),
            ("clip_length", self.clip_length),
            ("probe_train_streams", self.probe_train_streams),
            ("probe_test_streams", self.probe_test_streams),
            ("probe_clips_per_stream", self.probe_clips_per_stream),
        ] {
            if v == 0 {
                return fail(key, "must be positive");
            }
        }
        if self.time_hidden_layers > 3 {
            return fail("time_hidden_layers", "must be between 0 and 3");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("sgd_momentum", "must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be non-negative");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration", "must be positive");
        }
        if self.frames < 2 * self.clip_length {
            return fail("frames", "must be at least twice clip_length");
        }
        for (key, v) in [
            ("speed", self.speed),
            ("static_scale", self.static_scale),
            ("stream_noise", self.stream_noise),
            ("augment_strength", self.augment_strength),
            ("probe_learning_rate", self.probe_learning_rate),
            ("probe_l2", self.probe_l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, "must be non-negative");
            }
        }
        if let Some(g) = self.view_gap {
            if !(g >= 0.0 && g.is_finite()) {
                return fail("view_gap", "must be non-negative or auto");
            }
        }
        if self.texture_classes < 2 {
            return fail("texture_classes", "must be at least 2");
        }
        if self.align_segments < 3 {
            return fail("align_segments", "must be at least 3");
        }
        Ok(())
    }
}
