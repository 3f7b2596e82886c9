//! 3D convolutional amplitude regressor: network, optimizer, checkpoints,
//! training and evaluation.

mod adam;
mod checkpoint;
mod evaluate;
pub mod layers;
mod network;
mod train;

pub use adam::Adam;
pub use checkpoint::{AberrationEstimator, ModelCheckpoint, MAGIC, VERSION};
pub use evaluate::{evaluate, BoxStats, EvalCase, EvalReport, EvalRow, EvalSummary, ModeSummary};
pub use network::{ArchitectureSpec, Gradients, Network, ParamKind};
pub use train::{
    mean_squared_error, train, LogRow, TrainConfig, TrainLog, TrainOutcome, Validation,
};
