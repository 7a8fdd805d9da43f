//! Runs the full grid: one dataset and one trained model set per condition,
//! with trained models cached on disk by configuration.

use std::path::{Path, PathBuf};

use log::info;

use super::config::{Condition, ExperimentConfig};
use super::eval::{aggregate, evaluate_grid, ResultCell};
use super::train::{train_all, TrainedModels};
use crate::error::Result;
use crate::trajgen::{make_dataset, Dataset};

/// Trained models and data for one condition.
pub struct ConditionRun {
    pub condition: Condition,
    pub data: Dataset,
    pub models: TrainedModels,
}

/// Directory holding the checkpoints for `cfg` under `root`.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("seed{}_{}", cfg.seed, cfg.condition().slug()))
}

/// Generates the dataset for `cfg` and trains on it, or reloads models
/// trained earlier under an identical configuration from `cache`.
pub fn run_condition(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<ConditionRun> {
    cfg.validate()?;
    let data = make_dataset(&cfg.generator, cfg.n_trajectories)?;
    let dir = cache.map(|root| run_dir(root, cfg));
    if let Some(dir) = &dir {
        if let Ok(models) = TrainedModels::load(dir) {
            if &models.config == cfg {
                info!("reusing trained models from {}", dir.display());
                return Ok(ConditionRun { condition: cfg.condition(), data, models });
            }
        }
    }
    info!("training {}", cfg.condition());
    let models = train_all(cfg, &data)?;
    if let Some(dir) = &dir {
        models.save(dir)?;
    }
    Ok(ConditionRun { condition: cfg.condition(), data, models })
}

/// Runs every condition of the grid with `base` as the template.
pub fn run_grid(base: &ExperimentConfig, cache: Option<&Path>) -> Result<Vec<ConditionRun>> {
    Condition::grid()
        .iter()
        .map(|c| run_condition(&base.with_condition(*c), cache))
        .collect()
}

pub fn evaluate_runs(runs: &[ConditionRun]) -> Result<Vec<ResultCell>> {
    let pairs: Vec<_> = runs.iter().map(|r| (&r.models, r.data.eval.as_slice())).collect();
    evaluate_grid(&pairs)
}

/// Grid evaluation repeated for each training/data seed, plus the mean.
pub fn multi_seed(base: &ExperimentConfig, seeds: &[u64], cache: Option<&Path>) -> Result<(Vec<Vec<ResultCell>>, Vec<ResultCell>)> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.generator.seed = seed;
        per_seed.push(evaluate_runs(&run_grid(&cfg, cache)?)?);
    }
    let mean = aggregate(&per_seed)?;
    Ok((per_seed, mean))
}
