//! The FENS protocol: one-shot local training, ensemble broadcast, and
//! federated training of a light aggregator over the frozen ensemble.

mod baselines;
mod config;
mod distill;
mod global;
mod protocol;
mod report;
mod scenario;

pub use baselines::{average_ensemble_accuracy, central_train, local_only_accuracy, run_fl_baseline};
pub use config::{default_agg_fl, FensConfig, LOCAL_FRACTION};
pub use distill::{distill, DistillObjective, DistillRecipe};
pub use global::{global_predict, GlobalModel};
pub use protocol::{
    broadcast_ensemble, fit_static, init_aggregator, initial_params, phase1, phase2, run_fens,
    AggregatorObjective, Broadcast, EnsembleEval, FensRun,
};
pub use report::{fens_closed_form, ledger_report, CostModel, LedgerReport};
pub use scenario::{make_shards, Scenario};
