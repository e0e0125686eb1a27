//! Optimizer, schedule, training loop, and whole-volume inference.

mod fit;
mod infer;
mod optim;
mod schedule;

pub use fit::{
    finetune, image_chw, threshold_probs, train_fold, write_history_csv, EpochRecord,
    TrainConfig, TrainOutcome,
};
pub use infer::{ensemble_predict, sliding_window_predict};
pub use optim::{AdamW, AdamWHyper};
pub use schedule::{onecycle_lr, START_DIV, WARMUP_FRACTION};
