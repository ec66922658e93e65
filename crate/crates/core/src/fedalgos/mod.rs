//! Iterative federated learning: client updates, server strategies, and the
//! round loop.

mod client;
mod config;
mod runner;
mod server;
mod stc;

pub use client::{
    accuracy, client_local_update, local_train, model_accuracy, sgd_train, BatchSampler,
    LocalObjective, LocalRecipe, SupervisedObjective,
};
pub use config::{FedConfig, FlAlgorithm, LocalWork, StcConfig};
pub use runner::{run_fl, sample_clients, FlOutcome, TrafficPhases};
pub use server::{mean_params, server_adaptive, server_fedavg, ClientUpdate, RoundMetrics, WirePayload};
pub use stc::{kept_count, stc_compress, CompressedDelta};
