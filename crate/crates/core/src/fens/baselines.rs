//! Reference protocols: iterative FL over the clients' full data and
//! centralized training on the pooled data.

use super::protocol::{initial_params, EnsembleEval};
use crate::data::{ClientShard, Dataset};
use crate::error::Result;
use crate::fedalgos::{
    local_train, model_accuracy, run_fl, FedConfig, FlOutcome, LocalRecipe, SupervisedObjective,
    TrafficPhases,
};
use crate::ledger::CommLedger;
use crate::models::LocalModel;
use crate::rng::stream;

/// Iterative FL (or one-round FL with `rounds = 1`) over each client's whole
/// shard, starting from the shared initial model.
pub fn run_fl_baseline(
    shards: &[ClientShard],
    arch: &[usize],
    cfg: &FedConfig,
    validation: Option<&Dataset>,
    ledger: &mut CommLedger,
) -> Result<FlOutcome> {
    let data = shards.iter().map(ClientShard::full).collect::<Result<Vec<_>>>()?;
    let objectives: Vec<_> = data
        .iter()
        .map(|d| SupervisedObjective { arch, data: d })
        .collect();
    let init = initial_params(arch, cfg.seed)?;
    run_fl(&init, &objectives, cfg, TrafficPhases::default(), ledger, |p| match validation {
        Some(v) => model_accuracy(arch, p, v),
        None => Ok(0.0),
    })
}

/// One model trained on all data at once.
pub fn central_train(train: &Dataset, arch: &[usize], recipe: &LocalRecipe, seed: u64) -> Result<LocalModel> {
    let init = initial_params(arch, seed)?;
    let obj = SupervisedObjective { arch, data: train };
    let params = local_train(&init, &obj, recipe, &mut stream(seed, "central", 0))?;
    LocalModel::from_params(arch.to_vec(), params)
}

/// Mean test accuracy of the clients' own models.
pub fn local_only_accuracy(models: &[LocalModel], test: &Dataset) -> Result<f64> {
    if models.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for m in models {
        sum += model_accuracy(&m.arch, &m.params, test)?;
    }
    Ok(sum / models.len() as f64)
}

/// Test accuracy of the uniformly averaged ensemble.
pub fn average_ensemble_accuracy(models: &[LocalModel], test: &Dataset) -> Result<f64> {
    let first = models.first().ok_or_else(|| crate::error::invalid("empty ensemble"))?;
    let spec = crate::models::AggregatorSpec::average(models.len(), first.num_classes())?;
    EnsembleEval::new(models, test)?.accuracy(&spec)
}
