//! Multi-positive InfoNCE over time-blended representations.
//!
//! Similarities are cosines of projected representations divided by a
//! temperature. Keys come from a momentum copy of the encoder and head and
//! never carry gradient; a FIFO queue of past keys supplies the negatives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{LtnError, Result};
use crate::navigation::TimeBlendedRep;
use crate::numerics::{dot, l2_normalize_rows, Matrix, Tape, Var, NORM_EPS};
use crate::params::{Mlp, ParamId, ParamStore};

/// Tolerance on the norm of vectors entering the queue.
pub const UNIT_NORM_TOL: f64 = 1e-8;

/// Two-layer projection head `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub mlp: Mlp,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, proj_dim: usize, rng: &mut R) -> Self {
        ProjectionHead {
            mlp: Mlp::new(store, "head", &[dim, dim, proj_dim], rng),
        }
    }

    /// Identity-free construction used by tests: `dim -> proj_dim` with no hidden layer.
    pub fn linear<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, proj_dim: usize, rng: &mut R) -> Self {
        ProjectionHead {
            mlp: Mlp::new(store, "head", &[dim, proj_dim], rng),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }

    /// Unit-normalized projections of the rows of `x`.
    pub fn project(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let z = self.mlp.forward(tape, vars, x)?;
        tape.l2_normalize_rows(z, NORM_EPS)
    }

    pub fn project_values(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let z = self.project(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }
}

/// Cosine similarity of `φ(x)` and `φ(y)` divided by `temp`.
pub fn similarity(x: &Matrix, y: &Matrix, head: &ProjectionHead, store: &ParamStore, temp: f64) -> Result<f64> {
    if !(temp > 0.0) {
        return Err(LtnError::invalid("temperature must be positive"));
    }
    if x.rows() != 1 || x.shape() != y.shape() {
        return Err(LtnError::Shape {
            op: "similarity",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let px = head.project_values(store, x)?;
    let py = head.project_values(store, y)?;
    Ok(dot(px.data(), py.data()) / temp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Denominator {
    /// Positives and negatives in the partition function (standard InfoNCE).
    PosNeg,
    /// Negatives only, as the objective is sometimes written.
    NegOnly,
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::PosNeg => "pos+neg",
            Denominator::NegOnly => "neg_only",
        })
    }
}

impl FromStr for Denominator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pos+neg" => Ok(Denominator::PosNeg),
            "neg_only" => Ok(Denominator::NegOnly),
            _ => Err(format!("expected pos+neg|neg_only, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    Moco,
    /// Negative-free cosine regression onto momentum keys through a linear predictor.
    Byol,
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Moco => "moco",
            Framework::Byol => "byol",
        })
    }
}

impl FromStr for Framework {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "moco" => Ok(Framework::Moco),
            "byol" => Ok(Framework::Byol),
            _ => Err(format!("expected moco|byol, got `{s}`")),
        }
    }
}

/// FIFO ring of unit-norm key projections.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    width: usize,
    buffer: Vec<f64>,
    cursor: usize,
    len: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(LtnError::invalid("queue capacity and width must be positive"));
        }
        Ok(NegativeQueue {
            capacity,
            width,
            buffer: vec![0.0; capacity * width],
            cursor: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends every row of `keys`, evicting the oldest entries beyond capacity.
    /// Nothing is written if any row is not unit-norm.
    pub fn enqueue(&mut self, keys: &Matrix) -> Result<()> {
        if keys.cols() != self.width {
            return Err(LtnError::Shape {
                op: "enqueue",
                left: keys.shape(),
                right: (keys.rows(), self.width),
            });
        }
        for r in 0..keys.rows() {
            let row = keys.row(r);
            let norm = dot(row, row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(LtnError::invalid(format!("queue key {r} has norm {norm}")));
            }
        }
        for r in 0..keys.rows() {
            let w = self.width;
            self.buffer[self.cursor * w..(self.cursor + 1) * w].copy_from_slice(keys.row(r));
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys, oldest first, as a `len x width` matrix.
    pub fn to_matrix(&self) -> Matrix {
        let w = self.width;
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        let mut data = Vec::with_capacity(self.len * w);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            data.extend_from_slice(&self.buffer[slot * w..(slot + 1) * w]);
        }
        Matrix::from_vec(self.len, w, data).expect("queue layout")
    }

    /// Fills the queue with random unit vectors so the first step has negatives.
    pub fn fill_random<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let keys = normalize_keys(&Matrix::randn(self.capacity, self.width, 1.0, rng))?;
        self.enqueue(&keys)
    }

    /// Raw ring state for checkpointing: `(buffer, cursor, len)`.
    pub fn raw_parts(&self) -> (&[f64], usize, usize) {
        (&self.buffer, self.cursor, self.len)
    }

    pub fn from_raw_parts(capacity: usize, width: usize, buffer: Vec<f64>, cursor: usize, len: usize) -> Result<Self> {
        if buffer.len() != capacity * width || cursor >= capacity.max(1) || len > capacity {
            return Err(LtnError::Format("inconsistent queue state".into()));
        }
        Ok(NegativeQueue {
            capacity,
            width,
            buffer,
            cursor,
            len,
        })
    }
}

/// Hyper-parameters of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub framework: Framework,
    pub denominator: Denominator,
    pub temperature: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub num_positives: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            framework: Framework::Moco,
            denominator: Denominator::PosNeg,
            temperature: 0.1,
            momentum: 0.99,
            queue_capacity: 1024,
            num_positives: 4,
        }
    }
}

/// Momentum shadows, negative queue and objective settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveState {
    pub config: ContrastiveConfig,
    /// Shadowed online parameters and their moving averages.
    pub momentum_params: Vec<(ParamId, Matrix)>,
    pub queue: NegativeQueue,
}

impl ContrastiveState {
    pub fn new(config: ContrastiveConfig, online: &ParamStore, shadowed: &[ParamId], proj_dim: usize) -> Result<Self> {
        if !(config.temperature > 0.0) {
            return Err(LtnError::invalid("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&config.momentum) {
            return Err(LtnError::invalid("momentum must lie in [0, 1]"));
        }
        if config.num_positives == 0 {
            return Err(LtnError::invalid("need at least one positive"));
        }
        Ok(ContrastiveState {
            config,
            momentum_params: shadowed.iter().map(|&id| (id, online.get(id).clone())).collect(),
            queue: NegativeQueue::new(config.queue_capacity, proj_dim)?,
        })
    }

    /// Online values with shadowed entries replaced by their moving averages.
    pub fn key_params(&self, online: &ParamStore) -> ParamStore {
        let mut keys = online.clone();
        for (id, value) in &self.momentum_params {
            *keys.get_mut(*id) = value.clone();
        }
        keys
    }

    /// `shadow <- m * shadow + (1 - m) * online`.
    pub fn momentum_update(&mut self, online: &ParamStore) -> Result<()> {
        let m = self.config.momentum;
        for (id, shadow) in &mut self.momentum_params {
            momentum_update(shadow, online.get(*id), m)?;
        }
        Ok(())
    }
}

/// Entrywise `shadow <- m * shadow + (1 - m) * online`.
pub fn momentum_update(shadow: &mut Matrix, online: &Matrix, m: f64) -> Result<()> {
    if shadow.shape() != online.shape() {
        return Err(LtnError::Shape {
            op: "momentum_update",
            left: shadow.shape(),
            right: online.shape(),
        });
    }
    for (s, &o) in shadow.data_mut().iter_mut().zip(online.data()) {
        *s = m * *s + (1.0 - m) * o;
    }
    Ok(())
}

/// Batched InfoNCE on the tape.
///
/// `queries` are unit projections (`B x p`) recorded on the tape; `keys[j]`
/// holds the `j`-th positive for every query (`B x p`, unit rows, constant);
/// `negatives` is the queue (`N x p`). Returns the mean loss over the batch.
pub fn info_nce_batch(
    tape: &mut Tape,
    queries: Var,
    keys: &[Matrix],
    negatives: &Matrix,
    temperature: f64,
    denominator: Denominator,
) -> Result<Var> {
    if keys.is_empty() {
        return Err(LtnError::Empty {
            op: "info_nce positives",
        });
    }
    if negatives.rows() == 0 {
        return Err(LtnError::Empty {
            op: "info_nce negatives",
        });
    }
    let inv_t = 1.0 / temperature;
    let mut pos = Vec::with_capacity(keys.len());
    for k in keys {
        let kv = tape.leaf(k.clone())?;
        let prod = tape.mul(queries, kv)?;
        let s = tape.row_sum(prod)?;
        pos.push(tape.scale(s, inv_t)?);
    }
    let pos = tape.concat_cols(&pos)?;
    let lse_pos = tape.logsumexp_rows(pos)?;
    // pos+neg: log(1 + sum_n e^{s_n} / sum_p e^{s_p}) = softplus(lse_neg - lse_pos),
    // which keeps precision when the positives dominate.
    let nv = tape.leaf(negatives.clone())?;
    let neg = tape.matmul_t(queries, nv)?;
    let neg = tape.scale(neg, inv_t)?;
    let lse_neg = tape.logsumexp_rows(neg)?;
    let gap = tape.sub(lse_neg, lse_pos)?;
    let per_query = match denominator {
        Denominator::PosNeg => tape.softplus(gap)?,
        Denominator::NegOnly => gap,
    };
    tape.mean(per_query)
}

/// Negative-free loss: mean of `2 - 2 cos(predicted query, key)` over all positives.
pub fn byol_loss(tape: &mut Tape, predicted: Var, keys: &[Matrix]) -> Result<Var> {
    if keys.is_empty() {
        return Err(LtnError::Empty { op: "byol positives" });
    }
    let p = tape.l2_normalize_rows(predicted, NORM_EPS)?;
    let mut total: Option<Var> = None;
    for k in keys {
        let kv = tape.leaf(k.clone())?;
        let c = tape.dot(p, kv)?;
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
    }
    let rows = tape.value(p).rows() * keys.len();
    let mean_cos = tape.scale(total.expect("non-empty"), 1.0 / rows as f64)?;
    let neg = tape.scale(mean_cos, -2.0)?;
    let two = tape.leaf(Matrix::scalar(2.0))?;
    tape.add(two, neg)
}

/// InfoNCE for a single query against `pos` and the queue.
pub fn info_nce(
    q_rep: &TimeBlendedRep,
    pos: &[TimeBlendedRep],
    queue: &NegativeQueue,
    head: &ProjectionHead,
    store: &ParamStore,
    config: &ContrastiveConfig,
) -> Result<f64> {
    if pos.is_empty() {
        return Err(LtnError::Empty {
            op: "info_nce positives",
        });
    }
    if queue.is_empty() {
        return Err(LtnError::Empty {
            op: "info_nce negatives",
        });
    }
    let q = head.project_values(store, &q_rep.blended)?;
    let keys = pos
        .iter()
        .map(|k| head.project_values(store, &k.blended))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q)?;
    let loss = info_nce_batch(
        &mut tape,
        qv,
        &keys,
        &queue.to_matrix(),
        config.temperature,
        config.denominator,
    )?;
    Ok(tape.scalar(loss))
}

/// Unit-normalizes `m` row-wise for the queue.
pub fn normalize_keys(m: &Matrix) -> Result<Matrix> {
    l2_normalize_rows(m, NORM_EPS)
}
