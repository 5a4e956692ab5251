//! Losses, optimizer, metrics and the training loop.

mod fit;
mod loss;
pub mod metrics;
mod optim;

pub use fit::{confusion_at, evaluate_model, fit, predict_probs, EpochRecord, FitReport, TrainConfig};
pub use loss::{bce_loss, combined_loss, dice_loss, LossConfig, PROB_EPS};
pub use metrics::{evaluate, miou, ods, ois, prf1, ConfusionCounts, MetricReport, OdsMode, ThresholdSweep};
pub use optim::{adamw_step, OptimConfig, OptimState};
