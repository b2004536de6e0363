//! Neural surrogate prediction model: an MLP binary classifier trained with
//! class-rebalanced batches and fine-tuned online for a fixed number of epochs.

mod adam;
mod batcher;
pub mod io;
mod mlp;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use batcher::RebalancedBatcher;
pub use mlp::{init_model, param_count, MlpModel, LOGIT_CLAMP};
pub use train::{fine_tune, train, FineTuneOutcome, TrainReport, TrainingConfig};

/// Hidden widths used unless a configuration says otherwise.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Hidden widths of the full-size architecture, `MLP(d, 256, 256, 256, 256, 1)`.
pub const FULL_HIDDEN: [usize; 4] = [256, 256, 256, 256];
