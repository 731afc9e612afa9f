//! Configuration, training, evaluation and ablation sweeps.

mod ablate;
mod config;
mod eval;
mod train;

pub use ablate::{ablate, parse_sweep, to_csv as ablate_csv, AblationRow, Sweep};
pub use config::RunConfig;
pub use eval::{dump_densities, evaluate, predicted_total, presence_baseline, EvalOptions, Evaluation};
pub use train::{run_split, stage_of, supervision, train, EpochSummary, StepRecord, TrainOutcome, TrainingLog};

use std::path::Path;

use crate::error::Result;
use crate::scenegen::{generate_dataset, Dataset};

/// Training split (seeded by `data_seed`) and test split (`data_seed + 1`).
pub fn generate_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&cfg.scene_spec(cfg.data_seed), cfg.n_train)?;
    let test = generate_dataset(&cfg.scene_spec(cfg.data_seed.wrapping_add(1)), cfg.n_test)?;
    Ok((train, test))
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

/// Trains on `train` and evaluates on `test`, writing artifacts and
/// `report.json` / `report.csv` under `out` when given.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_data: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
) -> Result<RunResult> {
    let mut outcome = train(cfg, train_data, out)?;
    let opts = EvalOptions {
        batch_size: 64,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let evaluation = evaluate(&mut outcome.model, test, &opts)?;
    if let Some(dir) = out {
        evaluation.report.write(dir)?;
    }
    Ok(RunResult { outcome, evaluation })
}
