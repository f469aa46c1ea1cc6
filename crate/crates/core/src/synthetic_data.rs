//! Synthetic temporally-structured streams, view sampling, and the clip encoder.
//!
//! A stream is a sequence of feature frames `x(t) = s + t * speed * d + noise`
//! where `s` is a static component and `d` a drift direction. Two regimes are
//! provided:
//!
//! * temporal-direction: every stream drifts along a shared axis, forward or
//!   reversed; the class is the drift sign. Because the clip encoder pools
//!   frames without regard to order, the class is only visible through the
//!   absolute position along the axis, which changes with time.
//! * static-texture: the class is the static component; drift directions are
//!   random per stream and carry no label information.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LtnError, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::{Linear, ParamStore};
use crate::time_encoder::TimeShift;

/// Parameters of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub frames: usize,
    pub duration: f64,
    pub drift: Vec<f64>,
    pub speed: f64,
    pub static_component: Vec<f64>,
    pub noise: f64,
    pub label: usize,
}

impl GeneratorSpec {
    pub fn features(&self) -> usize {
        self.static_component.len()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LtnError::invalid(format!("generator spec: {m}")));
        if self.frames < 2 {
            return bad("need at least two frames");
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad("duration must be positive");
        }
        if self.drift.len() != self.static_component.len() || self.drift.is_empty() {
            return bad("drift and static component must share a non-zero width");
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return bad("speed must be non-negative");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be non-negative");
        }
        if self.drift.iter().chain(&self.static_component).any(|x| !x.is_finite()) {
            return bad("non-finite component");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub id: u64,
    pub duration: f64,
    /// `frames x features`
    pub frames: Matrix,
    pub spec: GeneratorSpec,
    pub class_label: usize,
}

impl Stream {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn features(&self) -> usize {
        self.frames.cols()
    }

    /// Frames per second.
    pub fn rate(&self) -> f64 {
        self.num_frames() as f64 / self.duration
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.rate()
    }

    /// Raw frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.num_frames() {
            return Err(LtnError::invalid(format!(
                "clip [{start}, {}) exceeds {} frames",
                start + len,
                self.num_frames()
            )));
        }
        let f = self.features();
        Matrix::from_vec(len, f, self.frames.data()[start * f..(start + len) * f].to_vec())
    }
}

/// Frame `i` sits at `t = i * duration / frames`.
pub fn generate_stream(spec: &GeneratorSpec, id: u64, seed: u64) -> Result<Stream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.features();
    let dt = spec.duration / spec.frames as f64;
    let mut frames = Matrix::zeros(spec.frames, f);
    for i in 0..spec.frames {
        let t = i as f64 * dt;
        for (j, x) in frames.row_mut(i).iter_mut().enumerate() {
            *x = spec.static_component[j] + t * spec.speed * spec.drift[j];
            if spec.noise > 0.0 {
                *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(Stream {
        id,
        duration: spec.duration,
        frames,
        spec: spec.clone(),
        class_label: spec.label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    TemporalDirection,
    StaticTexture,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::TemporalDirection => "temporal-direction",
            Regime::StaticTexture => "static-texture",
        })
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "temporal-direction" => Ok(Regime::TemporalDirection),
            "static-texture" => Ok(Regime::StaticTexture),
            _ => Err(format!("expected temporal-direction|static-texture, got `{s}`")),
        }
    }
}

/// Shape and statistics of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub regime: Regime,
    pub features: usize,
    pub frames: usize,
    pub duration: f64,
    pub clip_length: usize,
    pub speed: f64,
    pub static_scale: f64,
    pub noise: f64,
    /// Number of static prototypes in the static-texture regime.
    pub texture_classes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            regime: Regime::TemporalDirection,
            features: 16,
            frames: 64,
            duration: 10.0,
            clip_length: 8,
            speed: 0.4,
            static_scale: 1.0,
            noise: 0.05,
            texture_classes: 4,
        }
    }
}

/// Dataset-level structure shared by all streams: drift axis and class prototypes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    axis: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
}

fn unit_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Dataset {
    pub fn new(spec: DatasetSpec, seed: u64) -> Result<Self> {
        if spec.frames < 2 * spec.clip_length || spec.clip_length == 0 {
            return Err(LtnError::invalid(format!(
                "streams need at least twice the clip length ({} frames), got {}",
                2 * spec.clip_length,
                spec.frames
            )));
        }
        if spec.features == 0 {
            return Err(LtnError::invalid("features must be positive"));
        }
        if spec.regime == Regime::StaticTexture && spec.texture_classes < 2 {
            return Err(LtnError::invalid("static-texture regime needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = unit_gaussian(spec.features, &mut rng);
        let prototypes = (0..spec.texture_classes)
            .map(|_| {
                (0..spec.features)
                    .map(|_| spec.static_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Dataset { spec, axis, prototypes })
    }

    pub fn num_classes(&self) -> usize {
        match self.spec.regime {
            Regime::TemporalDirection => 2,
            Regime::StaticTexture => self.spec.texture_classes,
        }
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    /// Generator parameters for a stream of the given class.
    pub fn stream_spec<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> GeneratorSpec {
        let s = &self.spec;
        let f = s.features;
        let gauss = |rng: &mut R, scale: f64| -> Vec<f64> {
            (0..f).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let (drift, static_component) = match s.regime {
            Regime::TemporalDirection => {
                let sign = if label == 0 { 1.0 } else { -1.0 };
                let mut st = gauss(rng, s.static_scale);
                let along: f64 = st.iter().zip(&self.axis).map(|(a, b)| a * b).sum();
                for (x, a) in st.iter_mut().zip(&self.axis) {
                    *x -= along * a;
                }
                (self.axis.iter().map(|a| sign * a).collect(), st)
            }
            Regime::StaticTexture => {
                let jitter = gauss(rng, 0.5 * s.static_scale);
                let st = self.prototypes[label].iter().zip(jitter).map(|(p, j)| p + j).collect();
                (unit_gaussian(f, rng), st)
            }
        };
        GeneratorSpec {
            frames: s.frames,
            duration: s.duration,
            drift,
            speed: s.speed,
            static_component,
            noise: s.noise,
            label,
        }
    }

    /// Draws a stream with a uniformly random class.
    pub fn draw_stream<R: Rng + ?Sized>(&self, id: u64, rng: &mut R) -> Result<Stream> {
        let label = rng.gen_range(0..self.num_classes());
        self.draw_stream_of_class(id, label, rng)
    }

    pub fn draw_stream_of_class<R: Rng + ?Sized>(&self, id: u64, label: usize, rng: &mut R) -> Result<Stream> {
        let spec = self.stream_spec(label, rng);
        let seed = rng.gen();
        generate_stream(&spec, id, seed)
    }

    /// Same stream with the noise switched off.
    pub fn noise_free(&self, stream: &Stream) -> Result<Stream> {
        let mut spec = stream.spec.clone();
        spec.noise = 0.0;
        generate_stream(&spec, stream.id, 0)
    }
}

/// Strength of the view augmentations; `strength = 0` disables all of them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub strength: f64,
    pub noise_std: f64,
    pub scale_jitter: f64,
    pub mask_prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            strength: 1.0,
            noise_std: 0.1,
            scale_jitter: 0.1,
            mask_prob: 0.1,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            strength: 0.0,
            ..Default::default()
        }
    }

    /// Additive noise, per-feature scale jitter, and per-feature masking.
    pub fn apply(&self, clip: &mut Matrix, seed: u64) {
        if self.strength == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = clip.cols();
        let scales: Vec<f64> = (0..f)
            .map(|_| 1.0 + self.strength * self.scale_jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let keep: Vec<bool> = (0..f)
            .map(|_| !rng.gen_bool((self.strength * self.mask_prob).clamp(0.0, 1.0)))
            .collect();
        for r in 0..clip.rows() {
            for (j, x) in clip.row_mut(r).iter_mut().enumerate() {
                let noise = self.strength * self.noise_std * rng.sample::<f64, _>(StandardNormal);
                *x = if keep[j] { *x * scales[j] + noise } else { 0.0 };
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipView {
    /// `clip_length x features`
    pub clip: Matrix,
    pub dt: TimeShift,
    pub stream_id: u64,
    pub augmentation_seed: u64,
}

/// Settings for [`sample_views`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSampling {
    pub clip_length: usize,
    /// Minimum start-time gap in seconds; `None` uses `duration / (2 (P + 1))`.
    pub min_gap: Option<f64>,
    pub augmentation: Augmentation,
}

/// Draws a query and `p` positive keys from one stream, with pairwise start
/// gaps of at least the configured minimum.
pub fn sample_views<R: Rng + ?Sized>(
    stream: &Stream,
    p: usize,
    settings: &ViewSampling,
    rng: &mut R,
) -> Result<(ClipView, Vec<ClipView>)> {
    if p == 0 {
        return Err(LtnError::invalid("need at least one positive key"));
    }
    let n = p + 1;
    let len = settings.clip_length;
    let rate = stream.rate();
    let gap_secs = settings.min_gap.unwrap_or(stream.duration / (2.0 * n as f64));
    let gap = ((gap_secs * rate) - 1e-9).ceil().max(1.0) as usize;
    let last_start = stream
        .num_frames()
        .checked_sub(len)
        .ok_or_else(|| LtnError::invalid("stream shorter than one clip"))?;
    let slack = last_start
        .checked_sub(p * gap)
        .ok_or_else(|| LtnError::invalid(format!("stream too short for {n} views {gap} frames apart")))?;

    // Sorted uniform offsets spread by the gap: consecutive starts differ by >= gap.
    let mut offsets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    offsets.sort_unstable();
    let mut starts: Vec<usize> = offsets.iter().enumerate().map(|(i, o)| o + i * gap).collect();
    starts.shuffle(rng);

    let mut views = Vec::with_capacity(n);
    for start in starts {
        let mut clip = stream.slice(start, len)?;
        let seed: u64 = rng.gen();
        settings.augmentation.apply(&mut clip, seed);
        views.push(ClipView {
            clip,
            dt: TimeShift::new(stream.frame_time(start))?,
            stream_id: stream.id,
            augmentation_seed: seed,
        });
    }
    let query = views.remove(0);
    Ok((query, views))
}

/// Clip encoder: shared per-frame affine layer with rectified-linear output,
/// mean-pooled over time, then an affine map to the latent width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipEncoder {
    pub frame: Linear,
    pub out: Linear,
    pub clip_length: usize,
    pub features: usize,
    pub dim: usize,
}

impl ClipEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        features: usize,
        clip_length: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let frame = Linear::new(store, "encoder.frame", features, hidden, rng);
        let out = Linear::new(store, "encoder.out", hidden, dim, rng);
        ClipEncoder {
            frame,
            out,
            clip_length,
            features,
            dim,
        }
    }

    pub fn param_ids(&self) -> [crate::params::ParamId; 4] {
        [self.frame.weight, self.frame.bias, self.out.weight, self.out.bias]
    }

    /// `clips` holds `n` clips stacked row-wise: `(n * clip_length) x features`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], clips: Var) -> Result<Var> {
        let shape = tape.value(clips).shape();
        if shape.1 != self.features || !shape.0.is_multiple_of(self.clip_length) || shape.0 == 0 {
            return Err(LtnError::Shape {
                op: "encode_clip",
                left: shape,
                right: (self.clip_length, self.features),
            });
        }
        let h = self.frame.forward(tape, vars, clips)?;
        let h = tape.relu(h)?;
        let pooled = tape.mean_groups(h, self.clip_length)?;
        self.out.forward(tape, vars, pooled)
    }

    pub fn stack(views: &[&ClipView]) -> Result<Matrix> {
        let clips: Vec<&Matrix> = views.iter().map(|v| &v.clip).collect();
        Matrix::vstack(&clips)
    }

    /// Representations of a batch of views, `n x dim`, without gradients.
    pub fn encode_values(&self, store: &ParamStore, views: &[&ClipView]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape)?;
        let x = tape.leaf(Self::stack(views)?)?;
        let f = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }
}

/// `f(view)` as a `1 x dim` row.
pub fn encode_clip(view: &ClipView, enc: &ClipEncoder, store: &ParamStore) -> Result<Matrix> {
    enc.encode_values(store, &[view])
}

const STREAM_MAGIC: &[u8; 8] = b"LTNSTRM1";

/// Writes streams sharing one frame shape to the flat binary export format.
///
/// Layout (little-endian): magic, `u64` stream count, `u64` frames, `u64`
/// features; then per stream `u64` id, `u64` label, `f64` duration, and the
/// row-major `f64` frames.
pub fn write_streams<W: Write>(mut w: W, streams: &[Stream]) -> Result<()> {
    let (frames, features) = streams.first().map_or((0, 0), |s| s.frames.shape());
    w.write_all(STREAM_MAGIC)?;
    for v in [streams.len(), frames, features] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for s in streams {
        if s.frames.shape() != (frames, features) {
            return Err(LtnError::Shape {
                op: "write_streams",
                left: (frames, features),
                right: s.frames.shape(),
            });
        }
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&(s.class_label as u64).to_le_bytes())?;
        w.write_all(&s.duration.to_le_bytes())?;
        for x in s.frames.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Exported stream record: id, label, duration, frames.
pub type StreamRecord = (u64, u64, f64, Matrix);

pub fn read_streams<R: Read>(mut r: R) -> Result<Vec<StreamRecord>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != STREAM_MAGIC {
        return Err(LtnError::Format("not a stream export".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let count = u64::from_le_bytes(next(&mut r)?) as usize;
    let frames = u64::from_le_bytes(next(&mut r)?) as usize;
    let features = u64::from_le_bytes(next(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(next(&mut r)?);
        let label = u64::from_le_bytes(next(&mut r)?);
        let duration = f64::from_le_bytes(next(&mut r)?);
        let mut data = Vec::with_capacity(frames * features);
        for _ in 0..frames * features {
            data.push(f64::from_le_bytes(next(&mut r)?));
        }
        out.push((id, label, duration, Matrix::from_vec(frames, features, data)?));
    }
    Ok(out)
}
