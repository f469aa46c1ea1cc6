//! Training loop, checkpoints, and evaluation on frozen features.

pub mod ablation;
pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod probe;
pub mod train;

pub use alignment::{time_alignment, Alignment, AlignmentReport};
pub use checkpoint::{Checkpoint, RngState};
pub use config::RunConfig;
pub use model::LtnModel;
pub use probe::{linear_probe, ProbeFeatures, ProbeReport};
pub use train::{train, StepMetrics, Trainer};
