//! Training loop, schedules, optimizers and evaluation.

mod optim;
mod schedule;
mod trainer;

pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{cosine_lr, lambda_at, ScheduleState};
pub use trainer::{
    evaluate, iterations_per_epoch, train_loop, train_step, EpochReport, LrSchedule, MetricsRecord,
    MetricsWriter, RunOutputs, TrainOutcome, TrainerConfig,
};
