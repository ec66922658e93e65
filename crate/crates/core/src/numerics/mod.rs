//! Minimal dense-network training stack.

mod gradcheck;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, EXHAUSTIVE_LIMIT, SAMPLED_COORDS};
pub use ops::{
    distillation_loss, linear_backward, linear_forward, log_softmax, relu, relu_backward,
    softmax, softmax_cross_entropy, softmax_rows,
};
pub use optim::{adaptive_step, cosine_anneal, sgd_step, AdaptiveHyper, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use tensor::{argmax, Real, Tensor};
