//! Training schedules, evaluation grid, diagnostics and plots.

pub mod config;
pub mod eval;
pub mod plot;
pub mod table;
pub mod train;

pub use config::{reference_ade, Condition, ExperimentConfig, MODELS, MODEL_CYCLE, MODEL_ENCODER, MODEL_ONE_TO_ONE};
pub use eval::{evaluate_condition, evaluate_grid, ResultCell};
pub use table::{run_condition, run_grid, ConditionRun};
pub use train::{joint_train, pretrain_prediction, train_all, train_baseline, Phase, TrainLog, TrainedModels};
