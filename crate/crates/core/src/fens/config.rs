use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fedalgos::{FedConfig, FlAlgorithm, LocalRecipe, LocalWork};
use crate::models::{AggregatorKind, DEFAULT_GATING_HIDDEN, DEFAULT_NN_HIDDEN};

/// Fraction of each client's data used for local training; the rest trains
/// the aggregator.
pub const LOCAL_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FensConfig {
    /// Hidden widths of the local MLPs; input and output come from the data.
    pub local_hidden: Vec<usize>,
    pub local: LocalRecipe,
    pub quantize: bool,
    pub aggregator: AggregatorKind,
    pub nn_hidden: usize,
    pub moe_hidden: usize,
    pub agg_fl: FedConfig,
    /// Charge each client for downloading the shared initial model.
    pub count_init_download: bool,
    /// Precompute each client's ensemble logits on its aggregator split.
    pub cache_logits: bool,
    pub seed: u64,
}

impl Default for FensConfig {
    fn default() -> Self {
        Self {
            local_hidden: vec![64],
            local: LocalRecipe::default(),
            quantize: false,
            aggregator: AggregatorKind::Nn,
            nn_hidden: DEFAULT_NN_HIDDEN,
            moe_hidden: DEFAULT_GATING_HIDDEN,
            agg_fl: default_agg_fl(),
            count_init_download: false,
            cache_logits: false,
            seed: 0,
        }
    }
}

/// FedAdam, full participation, batch 128, one local step per round.
pub fn default_agg_fl() -> FedConfig {
    FedConfig {
        algorithm: FlAlgorithm::Fedadam,
        rounds: 500,
        local_work: LocalWork::Steps(1),
        batch_size: 128,
        client_lr: 0.1,
        server_lr: 0.01,
        participation: 1.0,
        ..FedConfig::default()
    }
}

impl FensConfig {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        self.agg_fl.validate_schedule()?;
        if self.local_hidden.contains(&0) {
            return Err(invalid("local_hidden widths must be >= 1"));
        }
        if self.aggregator == AggregatorKind::Nn && self.nn_hidden == 0 {
            return Err(invalid("nn_hidden must be >= 1"));
        }
        if self.aggregator == AggregatorKind::Moe && self.moe_hidden == 0 {
            return Err(invalid("moe_hidden must be >= 1"));
        }
        Ok(())
    }

    pub fn local_arch(&self, dim: usize, classes: usize) -> Vec<usize> {
        let mut a = vec![dim];
        a.extend_from_slice(&self.local_hidden);
        a.push(classes);
        a
    }
}
