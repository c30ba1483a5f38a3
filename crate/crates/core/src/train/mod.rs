//! Losses, optimizer, learning-rate schedule and the epoch loop.

pub mod loss;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod trainer;

pub use loss::{cb_focal_loss, cross_entropy, ClassCounts, LossKind};
pub use optim::{nesterov_update, sgd_nesterov_step, Sgd};
pub use report::{CondenseEvent, EpochRecord, ReportSummary, TrainingReport};
pub use schedule::{cosine_lr, cosine_lr_at};
pub use trainer::{evaluate, train, train_step, EvalReport, StepStats, TrainConfig, TrainData, TrainEvent, TrainOutcome};
