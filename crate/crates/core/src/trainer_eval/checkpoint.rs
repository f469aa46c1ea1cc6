//! Binary run checkpoints.
//!
//! Layout, all integers `u64` little-endian and all reals `f64` little-endian:
//!
//! ```text
//! magic "LTNCKPT1"
//! config_len, config text (UTF-8, `key = value` lines)
//! step, next_stream_id
//! n_params, then per parameter: name_len, name, rows, cols, data
//! n_momentum, then per shadow: param_index, rows, cols, data
//! n_velocity, then per tensor: rows, cols, data
//! queue: capacity, width, cursor, len, capacity * width reals
//! rng: 32 seed bytes, stream, word_pos_lo, word_pos_hi
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::NegativeQueue;
use crate::error::{LtnError, Result};
use crate::numerics::Matrix;
use crate::params::{ParamId, ParamStore};

use super::config::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LTNCKPT1";

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: ParamStore,
    pub momentum: Vec<(ParamId, Matrix)>,
    pub velocity: Vec<Matrix>,
    pub queue: NegativeQueue,
    pub rng: RngState,
    pub next_stream_id: u64,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.usize(b.len())?;
        self.0.write_all(b)?;
        Ok(())
    }

    fn reals(&mut self, xs: &[f64]) -> Result<()> {
        for x in xs {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.usize(m.rows())?;
        self.usize(m.cols())?;
        self.reals(m.data())
    }
}

struct Reader<R: Read>(R);

/// Upper bound on any single length field, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 32;

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(LtnError::Format(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.usize()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.0.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = self.reals(rows * cols)?;
        Matrix::from_vec(rows, cols, data)
    }
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer(w);
        w.0.write_all(CHECKPOINT_MAGIC)?;
        w.bytes(self.config.to_text().as_bytes())?;
        w.usize(self.step)?;
        w.u64(self.next_stream_id)?;
        w.usize(self.params.len())?;
        for id in self.params.ids() {
            w.bytes(self.params.name(id).as_bytes())?;
            w.matrix(self.params.get(id))?;
        }
        w.usize(self.momentum.len())?;
        for (id, m) in &self.momentum {
            w.usize(id.index())?;
            w.matrix(m)?;
        }
        w.usize(self.velocity.len())?;
        for m in &self.velocity {
            w.matrix(m)?;
        }
        let (buffer, cursor, len) = self.queue.raw_parts();
        w.usize(self.queue.capacity())?;
        w.usize(self.queue.width())?;
        w.usize(cursor)?;
        w.usize(len)?;
        w.reals(buffer)?;
        w.0.write_all(&self.rng.seed)?;
        w.u64(self.rng.stream)?;
        w.u64(self.rng.word_pos as u64)?;
        w.u64((self.rng.word_pos >> 64) as u64)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader(r);
        let mut magic = [0u8; 8];
        r.0.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(LtnError::Format("not a checkpoint (bad magic)".into()));
        }
        let text = String::from_utf8(r.bytes()?).map_err(|_| LtnError::Format("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let step = r.usize()?;
        let next_stream_id = r.u64()?;
        let n = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?).map_err(|_| LtnError::Format("bad parameter name".into()))?;
            params.add(name, r.matrix()?);
        }
        let n = r.usize()?;
        let mut momentum = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = r.usize()?;
            if idx >= params.len() {
                return Err(LtnError::Format(format!("momentum entry for unknown parameter {idx}")));
            }
            momentum.push((ParamId(idx), r.matrix()?));
        }
        let n = r.usize()?;
        let velocity = (0..n).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
        let capacity = r.usize()?;
        let width = r.usize()?;
        let cursor = r.usize()?;
        let len = r.usize()?;
        let buffer = r.reals(capacity * width)?;
        let queue = NegativeQueue::from_raw_parts(capacity, width, buffer, cursor, len)?;
        let mut seed = [0u8; 32];
        r.0.read_exact(&mut seed)?;
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        Ok(Checkpoint {
            config,
            step,
            params,
            momentum,
            velocity,
            queue,
            rng: RngState {
                seed,
                stream,
                word_pos: lo | (hi << 64),
            },
            next_stream_id,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Checkpoint::read(std::io::BufReader::new(file))
    }
}
