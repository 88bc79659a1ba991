use crate::data::{inject_noise, normalize_bands, stratified_split, HyperCube, LabelMap, Split, SplitSpec};
use crate::exec::Executor;
use crate::model::ModelConfig;
use crate::train::metrics::EvalReport;
use crate::train::trainer::{evaluate, train, TrainConfig, TrainOutcome};
use crate::{derive_seed, Result};

const STREAM_NOISE: u64 = 0x6e_6f69_7365;

/// One training run: model, optimizer, split and an optional noise level.
/// `train.seed` drives every random stream of the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_frac: f64,
    pub val_frac: f64,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub split: Split,
    /// Held-out test metrics of the best-validation parameters.
    pub test: EvalReport,
}

/// Per-band standardization, then Gaussian noise at `snr_db` with a stream
/// derived from `seed`.
pub fn prepare_scene(cube: &HyperCube, snr_db: Option<f64>, seed: u64) -> HyperCube {
    let normalized = normalize_bands(cube);
    match snr_db {
        None => normalized,
        Some(_) => inject_noise(&normalized, snr_db, derive_seed(seed, &[STREAM_NOISE])),
    }
}

pub fn run_experiment<E: Executor>(
    exp: &Experiment,
    cube: &HyperCube,
    labels: &LabelMap,
    exec: &E,
) -> Result<ExperimentResult> {
    labels.check_pair(cube)?;
    let seed = exp.train.seed;
    let split = stratified_split(
        labels,
        &SplitSpec {
            train_frac: exp.train_frac,
            val_frac: exp.val_frac,
            seed,
        },
    )?;
    let scene = prepare_scene(cube, exp.snr_db, seed);
    let outcome = train(&exp.model, &exp.train, &scene, labels, &split, exec)?;
    let test = evaluate(&outcome.params, &exp.model, &scene, labels, &split.test, exec)?;
    Ok(ExperimentResult { outcome, split, test })
}
