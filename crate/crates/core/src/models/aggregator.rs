//! Aggregation rules over the stacked logits of a frozen ensemble.
//!
//! Batched inputs use the stacked layout produced by
//! [`ensemble_forward`](super::ensemble_forward): one row per sample holding
//! `concat(z_1, ..., z_M)`. All rules consume raw logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_backward, mlp_forward, MlpCache};
use super::vote::{agg_vote, uniform_prior, CompetencyMatrix};
use crate::error::{invalid, Error, Result};
use crate::numerics::{linear_backward, linear_forward, relu, relu_backward, ParamSet, Real, Tensor};

/// Default hidden width of the NN aggregator.
pub const DEFAULT_NN_HIDDEN: usize = 40;
/// Default hidden width of the MoE gating network.
pub const DEFAULT_GATING_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Average,
    WeightedAverage,
    Linear,
    PerClass,
    Nn,
    Vote,
    Moe,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 7] = [
        Self::Average,
        Self::WeightedAverage,
        Self::Linear,
        Self::PerClass,
        Self::Nn,
        Self::Vote,
        Self::Moe,
    ];

    pub fn is_trainable(self) -> bool {
        matches!(self, Self::Linear | Self::PerClass | Self::Nn | Self::Moe)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::WeightedAverage => "weighted_average",
            Self::Linear => "linear",
            Self::PerClass => "per_class",
            Self::Nn => "nn",
            Self::Vote => "vote",
            Self::Moe => "moe",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown aggregator kind {s:?}")))
    }
}

/// One aggregation rule together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub num_clients: usize,
    pub num_classes: usize,
    /// Hidden width `k` for `nn`; gating hidden width for `moe`; 0 otherwise.
    pub hidden: usize,
    /// Raw feature dimension consumed by the `moe` gating network.
    pub input_dim: usize,
    pub params: ParamSet,
    /// One matrix per client, `vote` only.
    pub competency: Vec<CompetencyMatrix>,
    pub prior: Vec<f64>,
}

/// Intermediate values needed by the backward pass.
pub enum AggCache<T> {
    Linear,
    Nn { pre: Tensor<T>, hidden: Tensor<T> },
    Moe { gating: MlpCache<T>, gates: Tensor<T> },
}

/// Gradients of a trainable aggregator.
pub struct AggGrads<T> {
    pub params: ParamSet<T>,
    /// Gradient w.r.t. the stacked logits.
    pub stacked: Tensor<T>,
}

fn uniform(m: usize) -> f32 {
    1.0 / m as f32
}

impl AggregatorSpec {
    fn bare(kind: AggregatorKind, m: usize, c: usize) -> Result<Self> {
        if m == 0 || c == 0 {
            return Err(invalid("aggregator needs >= 1 client and >= 1 class"));
        }
        Ok(Self {
            kind,
            num_clients: m,
            num_classes: c,
            hidden: 0,
            input_dim: 0,
            params: ParamSet::new(),
            competency: Vec::new(),
            prior: Vec::new(),
        })
    }

    pub fn average(m: usize, c: usize) -> Result<Self> {
        Self::bare(AggregatorKind::Average, m, c)
    }

    /// Class-wise weights from label counts: `λ_i[c] = n_i^c / Σ_j n_j^c`,
    /// falling back to `1/M` for classes nobody holds.
    pub fn weighted_average(label_counts: &[Vec<usize>]) -> Result<Self> {
        let m = label_counts.len();
        let c = label_counts.first().map_or(0, Vec::len);
        if label_counts.iter().any(|v| v.len() != c) {
            return Err(invalid("label count vectors differ in length"));
        }
        let mut s = Self::bare(AggregatorKind::WeightedAverage, m, c)?;
        let mut lambda = vec![0.0f32; m * c];
        for k in 0..c {
            let total: usize = label_counts.iter().map(|v| v[k]).sum();
            for i in 0..m {
                lambda[i * c + k] = if total == 0 {
                    uniform(m)
                } else {
                    (label_counts[i][k] as f64 / total as f64) as f32
                };
            }
        }
        s.params.insert("lambda", Tensor::new(vec![m, c], lambda)?)?;
        Ok(s)
    }

    /// One scalar per client, initialized to `1/M`.
    pub fn linear(m: usize, c: usize) -> Result<Self> {
        let mut s = Self::bare(AggregatorKind::Linear, m, c)?;
        s.params.insert("w", Tensor::filled(&[m], uniform(m)))?;
        Ok(s)
    }

    /// Per-client per-class weights, initialized to `1/M`.
    pub fn per_class(m: usize, c: usize) -> Result<Self> {
        let mut s = Self::bare(AggregatorKind::PerClass, m, c)?;
        s.params.insert("lambda", Tensor::filled(&[m, c], uniform(m)))?;
        Ok(s)
    }

    /// `f = W2^T relu(W1^T z)` with `W1: MC x k`, `W2: k x C`.
    ///
    /// When `k >= 2C` the first `2C` hidden units are wired so that the
    /// network outputs exactly the average of the client logits
    /// (`relu(a) - relu(-a) = a`); the remaining units get uniform
    /// `±sqrt(1/fan_in)` input weights and zero output weights. For `k < 2C`
    /// every weight is drawn uniformly.
    pub fn nn<R: Rng + ?Sized>(m: usize, c: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(invalid("nn aggregator needs hidden width k >= 1"));
        }
        let mut s = Self::bare(AggregatorKind::Nn, m, c)?;
        s.hidden = k;
        let mc = m * c;
        let b1 = (1.0 / mc as f64).sqrt();
        let b2 = (1.0 / k as f64).sqrt();
        let mut w1 = vec![0.0f32; mc * k];
        let mut w2 = vec![0.0f32; k * c];
        let (passthrough, start) = if k >= 2 * c { (true, 2 * c) } else { (false, 0) };
        if passthrough {
            let w = uniform(m);
            for i in 0..m {
                for cls in 0..c {
                    let row = (i * c + cls) * k;
                    w1[row + cls] = w;
                    w1[row + c + cls] = -w;
                }
            }
            for cls in 0..c {
                w2[cls * c + cls] = 1.0;
                w2[(c + cls) * c + cls] = -1.0;
            }
        }
        for j in 0..mc {
            for u in start..k {
                w1[j * k + u] = rng.random_range(-b1..b1) as f32;
            }
        }
        if !passthrough {
            w2.iter_mut()
                .for_each(|v| *v = rng.random_range(-b2..b2) as f32);
        }
        s.params.insert("w1", Tensor::new(vec![mc, k], w1)?)?;
        s.params.insert("w2", Tensor::new(vec![k, c], w2)?)?;
        Ok(s)
    }

    /// Gating network `[d, hidden, M]` with a softmax over clients. The output
    /// layer starts at zero so the initial gates are uniform.
    pub fn moe<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        m: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut s = Self::bare(AggregatorKind::Moe, m, c)?;
        s.hidden = hidden;
        s.input_dim = input_dim;
        let mut p = super::mlp::init_mlp_params(&s.gating_arch(), rng)?;
        if let Some(w) = p.get_mut("layer1.weight") {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        s.params = p;
        Ok(s)
    }

    pub fn vote(competency: Vec<CompetencyMatrix>, c: usize) -> Result<Self> {
        let mut s = Self::bare(AggregatorKind::Vote, competency.len(), c)?;
        if competency.iter().any(|p| p.classes() != c) {
            return Err(invalid("competency matrices must be C x C"));
        }
        s.competency = competency;
        s.prior = uniform_prior(c);
        Ok(s)
    }

    pub fn gating_arch(&self) -> Vec<usize> {
        vec![self.input_dim, self.hidden, self.num_clients]
    }

    pub fn is_trainable(&self) -> bool {
        self.kind.is_trainable()
    }

    /// Scalars exchanged per aggregator transfer.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_stacked<T: Real>(&self, stacked: &Tensor<T>) -> Result<()> {
        let mc = self.num_clients * self.num_classes;
        if stacked.shape().len() != 2 || stacked.cols() != mc {
            return Err(Error::ShapeMismatch {
                op: "aggregator",
                expected: vec![stacked.rows(), mc],
                got: stacked.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Aggregated logits using `params` in place of `self.params`.
    pub fn forward_with<T: Real>(
        &self,
        params: &ParamSet<T>,
        features: &Tensor<T>,
        stacked: &Tensor<T>,
    ) -> Result<(Tensor<T>, AggCache<T>)> {
        self.check_stacked(stacked)?;
        let (m, c) = (self.num_clients, self.num_classes);
        match self.kind {
            AggregatorKind::Average => {
                let w = vec![T::from_acc(uniform(m) as f64); m * c];
                Ok((class_weighted(stacked, &w, m, c)?, AggCache::Linear))
            }
            AggregatorKind::WeightedAverage | AggregatorKind::PerClass => {
                let lambda = params.expect("lambda")?;
                lambda.check_shape("per_class(lambda)", &[m, c])?;
                Ok((class_weighted(stacked, lambda.data(), m, c)?, AggCache::Linear))
            }
            AggregatorKind::Linear => {
                let w = params.expect("w")?;
                w.check_shape("linear(w)", &[m])?;
                let expanded: Vec<T> = w
                    .data()
                    .iter()
                    .flat_map(|&wi| std::iter::repeat_n(wi, c))
                    .collect();
                Ok((class_weighted(stacked, &expanded, m, c)?, AggCache::Linear))
            }
            AggregatorKind::Nn => {
                let w1 = params.expect("w1")?;
                let w2 = params.expect("w2")?;
                let pre = linear_forward(stacked, w1, &Tensor::zeros(&[w1.cols()]))?;
                let hidden = relu(&pre);
                let out = linear_forward(&hidden, w2, &Tensor::zeros(&[w2.cols()]))?;
                Ok((out, AggCache::Nn { pre, hidden }))
            }
            AggregatorKind::Moe => {
                if features.rows() != stacked.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "moe",
                        expected: vec![stacked.rows(), self.input_dim],
                        got: features.shape().to_vec(),
                    });
                }
                let (gate_logits, gating) = mlp_forward(&self.gating_arch(), params, features)?;
                let gates = crate::numerics::softmax_rows(&gate_logits);
                let n = stacked.rows();
                let mut out = Vec::with_capacity(n * c);
                for j in 0..n {
                    let (z, g) = (stacked.row(j), gates.row(j));
                    for k in 0..c {
                        let s: f64 = (0..m).map(|i| g[i].to_acc() * z[i * c + k].to_acc()).sum();
                        out.push(T::from_acc(s));
                    }
                }
                Ok((Tensor::new(vec![n, c], out)?, AggCache::Moe { gating, gates }))
            }
            AggregatorKind::Vote => Err(invalid("vote aggregator produces classes, not logits")),
        }
    }

    /// Gradients of a trainable aggregator given upstream `dout` (`n x C`).
    pub fn backward_with<T: Real>(
        &self,
        params: &ParamSet<T>,
        stacked: &Tensor<T>,
        cache: &AggCache<T>,
        dout: &Tensor<T>,
    ) -> Result<AggGrads<T>> {
        let (m, c) = (self.num_clients, self.num_classes);
        let n = stacked.rows();
        dout.check_shape("aggregator backward", &[n, c])?;
        match (self.kind, cache) {
            (AggregatorKind::PerClass, _) => {
                let lambda = params.expect("lambda")?;
                let mut dl = vec![0.0f64; m * c];
                let mut dz = Vec::with_capacity(n * m * c);
                for j in 0..n {
                    let (z, g) = (stacked.row(j), dout.row(j));
                    for i in 0..m {
                        for k in 0..c {
                            dl[i * c + k] += g[k].to_acc() * z[i * c + k].to_acc();
                            dz.push(T::from_acc(g[k].to_acc() * lambda.data()[i * c + k].to_acc()));
                        }
                    }
                }
                let mut grads = ParamSet::new();
                grads.insert("lambda", Tensor::new(vec![m, c], dl.into_iter().map(T::from_acc).collect())?)?;
                Ok(AggGrads {
                    params: grads,
                    stacked: Tensor::new(vec![n, m * c], dz)?,
                })
            }
            (AggregatorKind::Linear, _) => {
                let w = params.expect("w")?;
                let mut dw = vec![0.0f64; m];
                let mut dz = Vec::with_capacity(n * m * c);
                for j in 0..n {
                    let (z, g) = (stacked.row(j), dout.row(j));
                    for i in 0..m {
                        for k in 0..c {
                            dw[i] += g[k].to_acc() * z[i * c + k].to_acc();
                            dz.push(T::from_acc(g[k].to_acc() * w.data()[i].to_acc()));
                        }
                    }
                }
                let mut grads = ParamSet::new();
                grads.insert("w", Tensor::new(vec![m], dw.into_iter().map(T::from_acc).collect())?)?;
                Ok(AggGrads {
                    params: grads,
                    stacked: Tensor::new(vec![n, m * c], dz)?,
                })
            }
            (AggregatorKind::Nn, AggCache::Nn { pre, hidden }) => {
                let w1 = params.expect("w1")?;
                let w2 = params.expect("w2")?;
                let (dh, dw2, _) = linear_backward(hidden, w2, dout)?;
                let dpre = relu_backward(pre, &dh)?;
                let (dz, dw1, _) = linear_backward(stacked, w1, &dpre)?;
                let mut grads = ParamSet::new();
                grads.insert("w1", dw1)?;
                grads.insert("w2", dw2)?;
                Ok(AggGrads {
                    params: grads,
                    stacked: dz,
                })
            }
            (AggregatorKind::Moe, AggCache::Moe { gating, gates }) => {
                let mut dlogits = Vec::with_capacity(n * m);
                let mut dz = Vec::with_capacity(n * m * c);
                for j in 0..n {
                    let (z, g, d) = (stacked.row(j), gates.row(j), dout.row(j));
                    let dg: Vec<f64> = (0..m)
                        .map(|i| (0..c).map(|k| d[k].to_acc() * z[i * c + k].to_acc()).sum())
                        .collect();
                    let mean: f64 = (0..m).map(|i| g[i].to_acc() * dg[i]).sum();
                    for i in 0..m {
                        dlogits.push(T::from_acc(g[i].to_acc() * (dg[i] - mean)));
                        for k in 0..c {
                            dz.push(T::from_acc(g[i].to_acc() * d[k].to_acc()));
                        }
                    }
                }
                let dlogits = Tensor::new(vec![n, m], dlogits)?;
                let (grads, _) = mlp_backward(&self.gating_arch(), params, gating, &dlogits)?;
                Ok(AggGrads {
                    params: grads,
                    stacked: Tensor::new(vec![n, m * c], dz)?,
                })
            }
            (kind, _) => Err(invalid(format!("{kind} aggregator is not trainable"))),
        }
    }

    /// Aggregated logits for a batch.
    pub fn logits(&self, features: &Tensor, stacked: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(&self.params, features, stacked)?.0)
    }

    /// Predicted class per row. Ties resolve to the lowest class index.
    pub fn predict(&self, features: &Tensor, stacked: &Tensor) -> Result<Vec<usize>> {
        if self.kind == AggregatorKind::Vote {
            self.check_stacked(stacked)?;
            let (m, c) = (self.num_clients, self.num_classes);
            return (0..stacked.rows())
                .map(|j| {
                    let row = stacked.row(j);
                    let votes: Vec<usize> = (0..m)
                        .map(|i| crate::numerics::argmax(&row[i * c..(i + 1) * c]))
                        .collect();
                    agg_vote(&votes, &self.competency, &self.prior, None)
                })
                .collect();
        }
        Ok(self.logits(features, stacked)?.argmax_rows())
    }
}

/// `out[j][k] = Σ_i w[i*C + k] * z[j][i*C + k]`, accumulated in client order.
fn class_weighted<T: Real>(stacked: &Tensor<T>, w: &[T], m: usize, c: usize) -> Result<Tensor<T>> {
    let n = stacked.rows();
    let mut out = Vec::with_capacity(n * c);
    for j in 0..n {
        let z = stacked.row(j);
        for k in 0..c {
            let mut s = 0.0f64;
            for i in 0..m {
                s += w[i * c + k].to_acc() * z[i * c + k].to_acc();
            }
            out.push(T::from_acc(s));
        }
    }
    Tensor::new(vec![n, c], out)
}

fn as_stacked(z: &Tensor) -> Result<(Tensor, usize, usize)> {
    if z.shape().len() != 2 || z.rows() == 0 {
        return Err(invalid("logit matrix must be M x C with M >= 1"));
    }
    let (m, c) = (z.rows(), z.cols());
    Ok((z.clone().reshape(vec![1, m * c])?, m, c))
}

fn single(spec: &AggregatorSpec, x: &Tensor, stacked: &Tensor) -> Result<Tensor> {
    let out = spec.logits(x, stacked)?;
    let c = out.cols();
    out.reshape(vec![c])
}

/// Column-wise mean of an `M x C` logit matrix.
pub fn agg_average(z: &Tensor) -> Result<Tensor> {
    let (s, m, c) = as_stacked(z)?;
    single(&AggregatorSpec::average(m, c)?, &Tensor::zeros(&[1, 0]), &s)
}

/// Label-count weighted average.
pub fn agg_weighted(z: &Tensor, label_counts: &[Vec<usize>]) -> Result<Tensor> {
    let (s, m, _) = as_stacked(z)?;
    if label_counts.len() != m {
        return Err(invalid("one label-count vector per client required"));
    }
    single(&AggregatorSpec::weighted_average(label_counts)?, &Tensor::zeros(&[1, 0]), &s)
}

/// `Σ_i w_i z_i`.
pub fn agg_linear(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (s, m, c) = as_stacked(z)?;
    let mut spec = AggregatorSpec::linear(m, c)?;
    spec.params = ParamSet::new().with("w", w.clone());
    single(&spec, &Tensor::zeros(&[1, 0]), &s)
}

/// `Σ_i λ_i ⊙ z_i`.
pub fn agg_per_class(z: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    let (s, m, c) = as_stacked(z)?;
    let mut spec = AggregatorSpec::per_class(m, c)?;
    spec.params = ParamSet::new().with("lambda", lambda.clone());
    single(&spec, &Tensor::zeros(&[1, 0]), &s)
}

/// `W2^T relu(W1^T concat(z))`.
pub fn agg_nn(z: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let (s, m, c) = as_stacked(z)?;
    w1.check_shape("agg_nn(w1)", &[m * c, w1.cols()])?;
    w2.check_shape("agg_nn(w2)", &[w1.cols(), c])?;
    let mut spec = AggregatorSpec::bare(AggregatorKind::Nn, m, c)?;
    spec.hidden = w1.cols();
    spec.params = ParamSet::new().with("w1", w1.clone()).with("w2", w2.clone());
    single(&spec, &Tensor::zeros(&[1, 0]), &s)
}

/// `Σ_i G(x)_i z_i` with `G` the softmax of the gating network on raw
/// features `x`.
pub fn agg_moe(x: &Tensor, gating: &ParamSet, hidden: usize, z: &Tensor) -> Result<Tensor> {
    let (s, m, c) = as_stacked(z)?;
    let mut spec = AggregatorSpec::bare(AggregatorKind::Moe, m, c)?;
    spec.hidden = hidden;
    spec.input_dim = x.len();
    spec.params = gating.clone();
    let x = x.clone().reshape(vec![1, spec.input_dim])?;
    single(&spec, &x, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn mat(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn average_examples() {
        assert_eq!(agg_average(&mat(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(agg_average(&mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn weighted_lambda_from_counts() {
        let s = AggregatorSpec::weighted_average(&[vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(s.params.get("lambda").unwrap().data(), &[0.75, 0.25, 0.25, 0.75]);
        // class 1 held by nobody -> uniform
        let s = AggregatorSpec::weighted_average(&[vec![2, 0], vec![0, 0]]).unwrap();
        assert_eq!(s.params.get("lambda").unwrap().data(), &[1.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn weighted_sole_holder_passes_through() {
        let z = mat(&[&[4.0, -1.0], &[2.0, 7.0]]);
        let out = agg_weighted(&z, &[vec![5, 0], vec![0, 5]]).unwrap();
        assert_eq!(out.data(), &[4.0, 7.0]);
        let eq = agg_weighted(&z, &[vec![5, 5], vec![5, 5]]).unwrap();
        assert_eq!(eq, agg_average(&z).unwrap());
    }

    #[test]
    fn linear_and_per_class_special_cases() {
        let z = mat(&[&[1.0, 2.0, 3.0], &[-4.0, 0.5, 9.0]]);
        let pick = agg_linear(&z, &Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(pick.data(), z.row(1));
        let avg = agg_linear(&z, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert_eq!(avg, agg_average(&z).unwrap());
        let lam = mat(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(agg_per_class(&z, &lam).unwrap().data(), &[1.0, 0.5, 3.0]);
        let lam = Tensor::filled(&[2, 3], 0.5);
        assert_eq!(agg_per_class(&z, &lam).unwrap(), agg_average(&z).unwrap());
    }

    #[test]
    fn nn_hand_examples() {
        let w1 = mat(&[&[2.0]]);
        let w2 = mat(&[&[3.0]]);
        assert_eq!(agg_nn(&mat(&[&[1.0]]), &w1, &w2).unwrap().data(), &[6.0]);
        assert_eq!(agg_nn(&mat(&[&[-1.0]]), &w1, &w2).unwrap().data(), &[0.0]);
        let zero = agg_nn(&mat(&[&[1.0, 2.0]]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2]));
        assert_eq!(zero.unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn moe_uniform_and_saturated_gates() {
        let mut r = crate::rng::stream(0, "t", 0);
        let z = mat(&[&[1.0, 2.0], &[3.0, -5.0], &[0.5, 0.5]]);
        let x = Tensor::vector(vec![0.2, -0.4, 1.0]);
        let spec = AggregatorSpec::moe(3, 4, 3, 2, &mut r).unwrap();
        let out = agg_moe(&x, &spec.params, 4, &z).unwrap();
        let avg = agg_average(&z).unwrap();
        for (a, b) in out.data().iter().zip(avg.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // saturate the gate on client 1 through the output bias
        let mut p = spec.params.clone();
        p.get_mut("layer1.bias").unwrap().data_mut()[1] = 100.0;
        let out = agg_moe(&x, &p, 4, &z).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-5 && (out.data()[1] + 5.0).abs() < 1e-5);
    }

    #[test]
    fn nn_init_reproduces_average() {
        let mut r = crate::rng::stream(5, "t", 0);
        let (m, c) = (4, 3);
        let spec = AggregatorSpec::nn(m, c, 40, &mut r).unwrap();
        let avg = AggregatorSpec::average(m, c).unwrap();
        let stacked = Tensor::new(
            vec![16, m * c],
            (0..16 * m * c).map(|_| r.random_range(-9.0f32..9.0)).collect(),
        )
        .unwrap();
        let none = Tensor::zeros(&[16, 0]);
        assert_eq!(spec.logits(&none, &stacked).unwrap(), avg.logits(&none, &stacked).unwrap());
    }

    fn random_stacked(n: usize, mc: usize, seed: u64) -> Tensor<f64> {
        let mut r = crate::rng::stream(seed, "stacked", 0);
        Tensor::new(vec![n, mc], (0..n * mc).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap()
    }

    fn check(spec: &AggregatorSpec, features: &Tensor<f64>, stacked: &Tensor<f64>) -> f64 {
        let labels: Vec<usize> = (0..stacked.rows()).map(|j| j % spec.num_classes).collect();
        grad_check(
            |p| {
                let (out, cache) = spec.forward_with(p, features, stacked)?;
                let (loss, d) = crate::numerics::softmax_cross_entropy(&out, &labels)?;
                Ok((loss, spec.backward_with(p, stacked, &cache, &d)?.params))
            },
            &spec.params,
            1e-4,
            0,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn trainable_gradients_match_finite_differences() {
        let mut r = crate::rng::stream(9, "t", 0);
        let (m, c, d) = (3, 4, 5);
        let stacked = random_stacked(7, m * c, 1);
        let feats = random_stacked(7, d, 2);
        let mut lin = AggregatorSpec::linear(m, c).unwrap();
        lin.params = ParamSet::new().with("w", Tensor::vector(vec![0.3, -0.2, 0.9]));
        let mut pc = AggregatorSpec::per_class(m, c).unwrap();
        pc.params = pc.params.map_values(|_| r.random_range(-1.0f32..1.0));
        let mut nn = AggregatorSpec::nn(m, c, 6, &mut r).unwrap();
        nn.params = nn.params.map_values(|_| r.random_range(-0.5f32..0.5));
        let mut moe = AggregatorSpec::moe(d, 6, m, c, &mut r).unwrap();
        moe.params = moe.params.map_values(|_| r.random_range(-0.5f32..0.5));
        for spec in [&lin, &pc, &nn, &moe] {
            let e = check(spec, &feats, &stacked);
            assert!(e < 1e-4, "{}: {e}", spec.kind);
        }
    }

    #[test]
    fn nn_input_gradient_matches_finite_differences() {
        let mut r = crate::rng::stream(4, "t", 0);
        let mut nn = AggregatorSpec::nn(2, 3, 5, &mut r).unwrap();
        nn.params = nn.params.map_values(|_| r.random_range(-0.5f32..0.5));
        let p64 = nn.params.cast::<f64>();
        let stacked = random_stacked(1, 6, 3);
        let none = Tensor::<f64>::zeros(&[1, 0]);
        let loss = |s: &Tensor<f64>| {
            let (o, _) = nn.forward_with(&p64, &none, s).unwrap();
            crate::numerics::softmax_cross_entropy(&o, &[1]).unwrap().0
        };
        let (o, cache) = nn.forward_with(&p64, &none, &stacked).unwrap();
        let (_, d) = crate::numerics::softmax_cross_entropy(&o, &[1]).unwrap();
        let g = nn.backward_with(&p64, &stacked, &cache, &d).unwrap().stacked;
        for k in 0..6 {
            let mut a = stacked.clone();
            a.data_mut()[k] += 1e-6;
            let mut b = stacked.clone();
            b.data_mut()[k] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - g.data()[k]).abs() < 1e-6, "{k}");
        }
    }

    #[test]
    fn vote_has_no_logits() {
        let s = AggregatorSpec::vote(vec![], 2);
        assert!(s.is_err() || s.unwrap().logits(&Tensor::zeros(&[1, 0]), &Tensor::zeros(&[1, 0])).is_err());
    }

    #[test]
    fn kind_roundtrips_through_strings() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.as_str().parse::<AggregatorKind>().unwrap(), k);
        }
        assert!("median".parse::<AggregatorKind>().is_err());
    }
}
