//! Losses, optimiser, learning-rate schedule, metrics and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod schedule;
mod trainer;

pub use loss::{focal_loss, masked_cross_entropy};
pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use trainer::{
    evaluate, train_loop, EpochRecord, EvalReport, Example, RunFiles, Target, TrainConfig, Trainer,
};
