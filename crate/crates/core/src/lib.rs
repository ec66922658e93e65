//! Federated ensembles with a federated aggregator.
//!
//! Clients train local models once and upload them; the server broadcasts the
//! (optionally INT8-quantized) ensemble back, and a small aggregator over the
//! frozen ensemble's logits is trained with iterative federated learning.
//! Iterative FL baselines (FedAvg, FedProx, FedAdam, FedYogi, compressed
//! FedAvg) and one-shot baselines share the same machinery, and every byte
//! exchanged is recorded in a per-client ledger.

pub mod data;
pub mod error;
pub mod fedalgos;
pub mod fens;
pub mod ledger;
pub mod models;
pub mod numerics;
pub mod quantize;
pub mod rng;

pub use error::{Error, Result};
