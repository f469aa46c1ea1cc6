//! The full network: clip encoder, navigation, projection head.

use rand::Rng;

use crate::contrastive::{byol_loss, info_nce_batch, Framework, ProjectionHead};
use crate::error::Result;
use crate::latent_basis::OrthogonalBasis;
use crate::navigation::{Navigator, TimeBlendedRep, Variant};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::{Linear, ParamId, ParamStore};
use crate::synthetic_data::{ClipEncoder, ClipView};
use crate::time_encoder::{TimeEncoderParams, TimeEncoderShape, TimeShift};

use super::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LtnModel {
    pub encoder: ClipEncoder,
    pub navigator: Navigator,
    pub head: ProjectionHead,
    /// Linear predictor for the negative-free objective.
    pub predictor: Option<Linear>,
}

/// Inputs of one contrastive step with the key side already computed.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// Query clips stacked row-wise.
    pub query_clips: Matrix,
    /// Normalized query start times, `B x 1`.
    pub query_times: Matrix,
    /// `keys[j]`: unit key projections of the `j`-th positive of every query.
    pub keys: Vec<Matrix>,
    pub negatives: Matrix,
}

/// Handles into the tape after [`LtnModel::loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub frame: Option<Var>,
}

impl LtnModel {
    /// Builds the network and its parameters. Parameter creation order is fixed
    /// so a config and an init RNG state determine every value.
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let encoder = ClipEncoder::new(store, cfg.features, cfg.clip_length, cfg.encoder_hidden, cfg.dim, rng);
        let basis = if cfg.variant.uses_basis() {
            Some(OrthogonalBasis::new(store, cfg.dim, cfg.basis_size, rng)?)
        } else {
            None
        };
        let encoder_out = match cfg.variant {
            Variant::LinearAdd => cfg.dim,
            _ => cfg.basis_size,
        };
        let time = if cfg.variant.uses_time_encoder() {
            let shape = TimeEncoderShape {
                dim: cfg.dim,
                inner_width: cfg.time_inner_width,
                hidden_width: cfg.time_hidden_width,
                hidden_layers: cfg.time_hidden_layers,
                out_width: encoder_out,
            };
            Some(TimeEncoderParams::new(store, shape, cfg.duration, rng)?)
        } else {
            None
        };
        let navigator = Navigator::new(cfg.variant, time, basis, cfg.basis_mode, cfg.attention)?;
        let head = ProjectionHead::new(store, cfg.dim, cfg.proj_dim, rng);
        let predictor = match cfg.framework {
            Framework::Byol => Some(Linear::new(store, "predictor", cfg.proj_dim, cfg.proj_dim, rng)),
            Framework::Moco => None,
        };
        Ok(LtnModel {
            encoder,
            navigator,
            head,
            predictor,
        })
    }

    /// Parameters with a momentum copy: everything on the key path (encoder,
    /// basis, time encoder, head), that is all but the predictor.
    pub fn shadowed_params(&self, store: &ParamStore) -> Vec<ParamId> {
        let predictor = self.predictor.map(|p| [p.weight, p.bias]);
        store
            .ids()
            .filter(|id| !predictor.is_some_and(|p| p.contains(id)))
            .collect()
    }

    pub fn basis(&self) -> Option<&OrthogonalBasis> {
        self.navigator.basis.as_ref()
    }

    /// Navigation frame values for the current parameters.
    pub fn frame_values(&self, store: &ParamStore) -> Result<Option<Matrix>> {
        match self.navigator.basis {
            Some(b) if self.navigator.variant.uses_basis() => {
                Ok(Some(b.frame_values(store, self.navigator.basis_mode)?))
            }
            _ => Ok(None),
        }
    }

    /// Pre-navigation representations `f`, `n x dim`.
    pub fn representations(&self, store: &ParamStore, views: &[&ClipView]) -> Result<Matrix> {
        self.encoder.encode_values(store, views)
    }

    /// `f` and `f'` for a batch of views.
    pub fn blended(&self, store: &ParamStore, views: &[&ClipView]) -> Result<TimeBlendedRep> {
        let reps = self.representations(store, views)?;
        let shifts: Vec<TimeShift> = views.iter().map(|v| v.dt).collect();
        self.navigator.navigate(store, &reps, &shifts)
    }

    pub fn time_column(&self, views: &[&ClipView]) -> Matrix {
        match &self.navigator.encoder {
            Some(e) => e.time_column(&views.iter().map(|v| v.dt).collect::<Vec<_>>()),
            None => Matrix::zeros(views.len(), 1),
        }
    }

    /// Unit projections of time-blended keys, computed with `key_store`
    /// (momentum encoder and head). No gradient is recorded for the caller.
    pub fn key_projections(&self, key_store: &ParamStore, views: &[&ClipView]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = key_store.bind(&mut tape)?;
        let x = tape.leaf(ClipEncoder::stack(views)?)?;
        let t = tape.leaf(self.time_column(views))?;
        let f = self.encoder.forward(&mut tape, &vars, x)?;
        let frame = self.navigator.frame(&mut tape, &vars)?;
        let nav = self.navigator.forward(&mut tape, &vars, f, t, frame)?;
        let z = self.head.project(&mut tape, &vars, nav.blended)?;
        Ok(tape.value(z).clone())
    }

    /// Query-side forward pass and objective, recorded on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &StepBatch,
        framework: Framework,
        temperature: f64,
        denominator: crate::contrastive::Denominator,
    ) -> Result<LossOutput> {
        let x = tape.leaf(batch.query_clips.clone())?;
        let t = tape.leaf(batch.query_times.clone())?;
        let f = self.encoder.forward(tape, vars, x)?;
        let frame = self.navigator.frame(tape, vars)?;
        let nav = self.navigator.forward(tape, vars, f, t, frame)?;
        let loss = match (framework, &self.predictor) {
            (Framework::Byol, Some(pred)) => {
                let raw = self.head.mlp.forward(tape, vars, nav.blended)?;
                let p = pred.forward(tape, vars, raw)?;
                byol_loss(tape, p, &batch.keys)?
            }
            _ => {
                let z = self.head.project(tape, vars, nav.blended)?;
                info_nce_batch(tape, z, &batch.keys, &batch.negatives, temperature, denominator)?
            }
        };
        Ok(LossOutput { loss, frame })
    }
}
