//! Data setup shared by every protocol: partition, per-client splits, and a
//! held-out validation/test pair.

use crate::data::{dirichlet_partition, gen_synthetic, split_eval, split_local, ClientShard, Dataset, PartitionSpec};
use crate::error::Result;
use crate::rng::derive_seed;

use super::config::LOCAL_FRACTION;

#[derive(Clone, Debug)]
pub struct Scenario {
    pub train: Dataset,
    pub shards: Vec<ClientShard>,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Scenario {
    /// Partition `train` over clients and split `holdout` 50/50.
    pub fn from_data(train: Dataset, holdout: &Dataset, spec: &PartitionSpec) -> Result<Self> {
        let parts = dirichlet_partition(&train, spec)?;
        let shards = make_shards(parts, spec.seed)?;
        let (validation, test) = split_eval(holdout, derive_seed(spec.seed, "holdout", 0))?;
        Ok(Self {
            train,
            shards,
            validation,
            test,
        })
    }

    /// Gaussian blobs; the held-out set has `holdout_per_class` samples per
    /// class drawn from the same distribution.
    pub fn synthetic(
        classes: usize,
        dim: usize,
        per_class: usize,
        holdout_per_class: usize,
        separation: f64,
        spec: &PartitionSpec,
        data_seed: u64,
    ) -> Result<Self> {
        let train = gen_synthetic(classes, dim, per_class, separation, derive_seed(data_seed, "train", 0))?;
        let holdout = gen_synthetic(
            classes,
            dim,
            holdout_per_class,
            separation,
            derive_seed(data_seed, "holdout", 0),
        )?;
        Self::from_data(train, &holdout, spec)
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// 90/10 split of each client's data. A single-sample client keeps it for
/// local training and has an empty aggregator split.
pub fn make_shards(parts: Vec<Dataset>, seed: u64) -> Result<Vec<ClientShard>> {
    parts
        .into_iter()
        .enumerate()
        .map(|(i, ds)| {
            if ds.len() < 2 {
                let empty = ds.subset(&[]);
                return Ok(ClientShard::new(i, ds, empty));
            }
            let (a, b) = split_local(&ds, LOCAL_FRACTION, derive_seed(seed, "shard", i as u64))?;
            Ok(ClientShard::new(i, a, b))
        })
        .collect()
}
