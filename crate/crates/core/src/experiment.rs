//! End-to-end runs: generate a dataset, train, evaluate.

use crate::datakit::{generate, Dataset, DatasetSpec, FeatureRecord};
use crate::error::Result;
use crate::evalkit::{evaluate, Metrics};
use crate::trainer::{TrainConfig, TrainState, Trainer};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dataset: Dataset,
    pub state: TrainState,
    pub metrics: Metrics,
}

/// Trains on `train` and evaluates on the validation and OOD records.
pub fn train_and_evaluate(
    cfg: TrainConfig,
    classes: usize,
    train: &[FeatureRecord],
    val: &[FeatureRecord],
    ood: &[FeatureRecord],
) -> Result<(TrainState, Metrics)> {
    let mut trainer = Trainer::new(cfg, train, classes)?;
    trainer.run()?;
    let state = trainer.into_state();
    let metrics = evaluate(&state.heads, val, ood)?;
    Ok((state, metrics))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dataset = generate(&cfg.data)?;
    let (state, metrics) = train_and_evaluate(cfg.train, cfg.data.classes, &dataset.train, &dataset.val, &dataset.ood)?;
    Ok(ExperimentOutcome { dataset, state, metrics })
}
