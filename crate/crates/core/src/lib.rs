//! Latent time navigation for contrastive representation learning.
//!
//! A learnable orthonormal frame `Q` (dim x M) splits the latent space into a
//! time-encoded subspace and its complement. Each view's start time is encoded
//! into magnitudes along `Q`, moving the representation only inside that
//! subspace before the contrastive objective compares views.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod error;
pub mod latent_basis;
pub mod navigation;
pub mod numerics;
pub mod params;
pub mod selftest;
pub mod synthetic_data;
pub mod time_encoder;
pub mod trainer_eval;

pub use error::{LtnError, Result};
pub use numerics::{Matrix, Tape, Var};
pub use trainer_eval::{Checkpoint, LtnModel, ProbeFeatures, RunConfig, StepMetrics, Trainer};
