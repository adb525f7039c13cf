//! Losses, schedule, optimizer, synthetic data, metrics and the toy loop.

pub mod data;
mod harness;
pub mod metrics;
pub mod schedule;
pub mod sgd;

pub use data::{generate_batch, SyntheticSpec};
pub use harness::{
    combined_loss, combined_loss_value, evaluate, evaluate_miou, history_csv, slope, train_loop,
    HistoryRow, TrainOptions, CSV_HEADER,
};
pub use metrics::{argmax_classes, compute_miou, Confusion, MiouReport};
pub use schedule::TrainingSchedule;
pub use sgd::Sgd;
