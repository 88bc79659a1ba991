//! Optimization, metrics and the training protocol.

mod experiment;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use experiment::{prepare_scene, run_experiment, Experiment, ExperimentResult};
pub use loss::label_smoothed_ce;
pub use metrics::EvalReport;
pub use optim::{clip_gradients, AdamW, ClipMode, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{evaluate, predict_pixels, train, EpochLog, TrainConfig, TrainOutcome};
