//! Training loops for ERM, AdaBN, AdvStyle and ABRA, inference with and
//! without test-time recalibration, and shift diagnostics.

mod config;
mod eval;
mod optim;
mod report;
mod trainer;

pub use config::{InferMode, Method, TrainConfig};
pub use eval::{
    batch_size_sweep, bn_shift_diagnostics, evaluate, export_embeddings, gaussian_kl, infer, stats_mmd, thread_budget,
    Evaluation, LayerShift, PlateAccuracy, Prediction, SweepRow,
};
pub use optim::{Adam, WarmupSchedule};
pub use report::{config_echo, evaluation_table, train, train_with_mode, RunReport, TrainedRun};
pub use trainer::{EpochTrace, Phase, PhaseSnapshot, StepStats, TrainOutcome, Trainer, MAX_NONFINITE_STREAK};
