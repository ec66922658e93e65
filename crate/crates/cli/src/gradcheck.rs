//! Finite-difference checks of every trainable component on random
//! instances.

use std::fmt;
use std::str::FromStr;

use fens_core::models::{init_mlp_params, mlp_backward, mlp_forward, AggregatorSpec};
use fens_core::numerics::{grad_check, softmax_cross_entropy, GradCheckReport, ParamSet, Tensor};
use fens_core::rng::stream;
use fens_core::Result;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    LocalMlp,
    NnAggregator,
    PerClass,
    Linear,
    MoeGating,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Self::LocalMlp,
        Self::NnAggregator,
        Self::PerClass,
        Self::Linear,
        Self::MoeGating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LocalMlp => "mlp",
            Self::NnAggregator => "nn",
            Self::PerClass => "per_class",
            Self::Linear => "linear",
            Self::MoeGating => "moe",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown component {s:?}"))
    }
}

pub const FD_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn perturb(p: &ParamSet, rng: &mut impl Rng, scale: f32) -> ParamSet {
    p.map_values(|_| rng.random_range(-scale..scale))
}

/// Check one random instance of `component`. Sizes, weights, inputs and
/// labels are all drawn from the instance's stream.
pub fn check_instance(component: Component, seed: u64, instance: u64) -> Result<GradCheckReport> {
    let mut r = stream(seed, "grad-check", instance);
    let n = r.random_range(2..6usize);
    let c = r.random_range(2..5usize);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    if component == Component::LocalMlp {
        let d = r.random_range(2..6usize);
        let arch = [d, r.random_range(2..8usize), c];
        let params = init_mlp_params(&arch, &mut r)?;
        let x = random_tensor(&mut r, n, d, 2.0);
        return grad_check(
            |p| {
                let (z, cache) = mlp_forward(&arch, p, &x)?;
                let (loss, dz) = softmax_cross_entropy(&z, &labels)?;
                Ok((loss, mlp_backward(&arch, p, &cache, &dz)?.0))
            },
            &params,
            FD_EPS,
            instance,
        );
    }
    let m = r.random_range(2..5usize);
    let d = r.random_range(2..6usize);
    let mut spec = match component {
        Component::NnAggregator => AggregatorSpec::nn(m, c, r.random_range(2..8usize), &mut r)?,
        Component::PerClass => AggregatorSpec::per_class(m, c)?,
        Component::Linear => AggregatorSpec::linear(m, c)?,
        Component::MoeGating => AggregatorSpec::moe(d, r.random_range(2..8usize), m, c, &mut r)?,
        Component::LocalMlp => unreachable!(),
    };
    // move away from the structured initialization
    spec.params = perturb(&spec.params, &mut r, 1.0);
    let stacked = random_tensor(&mut r, n, m * c, 3.0);
    let features = random_tensor(&mut r, n, d, 2.0);
    grad_check(
        |p| {
            let (out, cache) = spec.forward_with(p, &features, &stacked)?;
            let (loss, dout) = softmax_cross_entropy(&out, &labels)?;
            Ok((loss, spec.backward_with(p, &stacked, &cache, &dout)?.params))
        },
        &spec.params,
        FD_EPS,
        instance,
    )
}

/// Worst relative error over `instances` random instances.
pub fn check_component(component: Component, instances: u64, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        worst = worst.max(check_instance(component, seed, i)?.max_rel_error);
    }
    Ok(worst)
}
