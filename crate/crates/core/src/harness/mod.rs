//! Training, evaluation, range transfer, and inference timing.

mod bench;
mod eval;
mod fit;
mod optim;
mod report;
mod train;

pub use bench::{median, time_inference, timings_csv, Timing};
pub use eval::{evaluate, range_transfer_matrix, ClassCount, EvalReport, TransferMatrix};
pub use fit::fit_scaling_exponent;
pub use optim::{adamw_step, clip_global_norm, learning_rate, AdamState, AdamW};
pub use report::{config_hash, csv_document, EvalRecord, RunReport};
pub use train::{batch_loss, train, TrainConfig};
