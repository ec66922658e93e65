use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{AdaptiveHyper, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlAlgorithm {
    Fedavg,
    Fedprox,
    Fedadam,
    Fedyogi,
    FedavgStc,
}

impl FlAlgorithm {
    pub const ALL: [FlAlgorithm; 5] = [
        Self::Fedavg,
        Self::Fedprox,
        Self::Fedadam,
        Self::Fedyogi,
        Self::FedavgStc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fedavg => "fedavg",
            Self::Fedprox => "fedprox",
            Self::Fedadam => "fedadam",
            Self::Fedyogi => "fedyogi",
            Self::FedavgStc => "fedavg_stc",
        }
    }

    pub fn server_optimizer(self) -> OptimizerKind {
        match self {
            Self::Fedadam => OptimizerKind::Adam,
            Self::Fedyogi => OptimizerKind::Yogi,
            _ => OptimizerKind::Sgd,
        }
    }
}

impl fmt::Display for FlAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlAlgorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown FL algorithm {s:?}")))
    }
}

/// Amount of local work per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    Steps(usize),
    /// Converted to `ceil(n / batch) * epochs` steps for a client with `n`
    /// samples.
    Epochs(usize),
}

impl LocalWork {
    pub fn steps_for(self, n: usize, batch: usize) -> usize {
        match self {
            LocalWork::Steps(k) => k,
            LocalWork::Epochs(e) => n.div_ceil(batch.max(1)) * e,
        }
    }
}

/// Top-k sparsification plus low-precision values for client deltas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StcConfig {
    pub sparsity: f64,
    pub bits: u32,
    /// Charge `ceil(log2 n)` bits per kept index in addition to the values.
    pub strict_indices: bool,
}

impl Default for StcConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            bits: 16,
            strict_indices: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub algorithm: FlAlgorithm,
    pub rounds: usize,
    pub local_work: LocalWork,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    pub prox_mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Weight the server mean by client sample counts instead of uniformly.
    pub weighted_mean: bool,
    pub stc: StcConfig,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            algorithm: FlAlgorithm::Fedavg,
            rounds: 1,
            local_work: LocalWork::Epochs(1),
            batch_size: 32,
            client_lr: 0.05,
            server_lr: 1.0,
            participation: 1.0,
            prox_mu: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            weighted_mean: false,
            stc: StcConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be >= 1"));
        }
        self.validate_schedule()
    }

    /// Everything except the round count; aggregator training may run zero
    /// rounds.
    pub fn validate_schedule(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(invalid(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(invalid("prox_mu must be >= 0"));
        }
        if !(self.client_lr >= 0.0) || !(self.server_lr >= 0.0) {
            return Err(invalid("learning rates must be >= 0"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be > 0"));
        }
        if !(self.stc.sparsity > 0.0 && self.stc.sparsity < 1.0) {
            return Err(invalid("stc sparsity must be in (0, 1)"));
        }
        if !(2..=16).contains(&self.stc.bits) {
            return Err(invalid("stc bits must be in [2, 16]"));
        }
        Ok(())
    }

    pub fn adaptive_hyper(&self) -> AdaptiveHyper {
        AdaptiveHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            tau: self.tau,
            lr: self.server_lr,
        }
    }

    /// Proximal coefficient in effect for this algorithm.
    pub fn effective_mu(&self) -> f64 {
        if self.algorithm == FlAlgorithm::Fedprox {
            self.prox_mu
        } else {
            0.0
        }
    }
}
