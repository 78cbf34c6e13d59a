//! Sparsified training: ISTA on batch-norm scales, the γ-W rescaling trick,
//! the convergence monitor and tuning diagnostics.

mod config;
mod monitor;
mod prox;
mod rescale;
mod train;

pub use config::{GammaUpdate, IstaConfig};
pub use monitor::{
    diagnose, EpochRecord, GammaLayer, GammaState, TrainMonitor, Warning, CHANCE_FRACTION, EARLY_EPOCHS, FULL_SPARSITY,
    NEAR_ZERO_SPARSITY,
};
pub use prox::{ista_step, prox, prox_scalar};
pub use rescale::{rescale_gamma_w, snap_alpha, suggest_alpha, AlphaSuggestion, ALPHA_GRID};
pub use train::{evaluate, train, EvalMetrics, StopReason, TrainOptions, TrainOutcome};
