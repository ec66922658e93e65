//! Local classifiers and the aggregator family.

mod aggregator;
pub mod io;
mod mlp;
mod vote;

pub use aggregator::{
    agg_average, agg_linear, agg_moe, agg_nn, agg_per_class, agg_weighted, AggCache, AggGrads,
    AggregatorKind, AggregatorSpec, DEFAULT_GATING_HIDDEN, DEFAULT_NN_HIDDEN,
};
pub use mlp::{
    ensemble_forward, init_mlp_params, logit_matrix, mlp_backward, mlp_forward, mlp_param_count,
    LocalModel, MlpCache,
};
pub use vote::{
    agg_vote, aggregate_competency, competency_from_votes, estimate_competency, uniform_prior,
    CompetencyMatrix, COMPETENCY_EPS, VOTE_TIE_TOL,
};
