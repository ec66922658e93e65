//! Client-side local training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FedConfig;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::models::{mlp_backward, mlp_forward};
use crate::numerics::{cosine_anneal, softmax_cross_entropy, ParamSet};
use crate::rng::Stream;

/// A client's training problem: mean loss and gradient over a batch of its
/// sample indices.
pub trait LocalObjective: Sync {
    fn num_samples(&self) -> usize;
    fn loss_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, ParamSet)>;
}

/// Cross-entropy training of a local MLP on a labelled dataset.
pub struct SupervisedObjective<'a> {
    pub arch: &'a [usize],
    pub data: &'a Dataset,
}

impl LocalObjective for SupervisedObjective<'_> {
    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn loss_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, ParamSet)> {
        let x = self.data.features.select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
        let (z, cache) = mlp_forward(self.arch, params, &x)?;
        let (loss, dz) = softmax_cross_entropy(&z, &y)?;
        Ok((loss, mlp_backward(self.arch, params, &cache, &dz)?.0))
    }
}

/// Shuffled mini-batches; reshuffles whenever an epoch is exhausted. The last
/// batch of an epoch may be short.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.max(1),
        }
    }

    pub fn next_batch(&mut self, rng: &mut Stream) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = &self.order[self.pos..end];
        self.pos = end;
        b
    }
}

/// Local SGD from `start`, `steps` mini-batch steps with learning rate
/// `lr(step)`. With `prox = Some((mu, anchor))` the loss gains
/// `mu/2 * ||theta - anchor||^2`.
pub fn sgd_train<O: LocalObjective + ?Sized>(
    start: &ParamSet,
    objective: &O,
    steps: usize,
    batch_size: usize,
    lr: impl Fn(usize) -> f64,
    prox: Option<(f64, &ParamSet)>,
    rng: &mut Stream,
) -> Result<ParamSet> {
    if steps == 0 {
        return Ok(start.clone());
    }
    let n = objective.num_samples();
    if n == 0 {
        return Err(invalid("local training on an empty dataset"));
    }
    let mut sampler = BatchSampler::new(n, batch_size);
    let mut params = start.clone();
    for t in 0..steps {
        let (_, mut grad) = objective.loss_grad(&params, sampler.next_batch(rng))?;
        if let Some((mu, anchor)) = prox {
            if mu != 0.0 {
                let pull = params.sub(anchor)?;
                grad = grad.axpy(mu as f32, &pull)?;
            }
        }
        params = params.axpy(-(lr(t) as f32), &grad)?;
        params.ensure_same_layout(start, "sgd_train")?;
    }
    if !params.all_finite() {
        return Err(crate::error::Error::NonFinite("local training diverged".into()));
    }
    Ok(params)
}

/// One round of client work under `cfg`: constant learning rate, FedProx
/// term when the algorithm is FedProx.
pub fn client_local_update<O: LocalObjective + ?Sized>(
    start: &ParamSet,
    objective: &O,
    cfg: &FedConfig,
    rng: &mut Stream,
) -> Result<ParamSet> {
    let steps = cfg
        .local_work
        .steps_for(objective.num_samples(), cfg.batch_size);
    let mu = cfg.effective_mu();
    sgd_train(
        start,
        objective,
        steps,
        cfg.batch_size,
        |_| cfg.client_lr,
        Some((mu, start)),
        rng,
    )
}

/// Recipe for one-shot local training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Cosine-anneal the learning rate to 0 over all steps.
    pub cosine: bool,
}

impl Default for LocalRecipe {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            cosine: true,
        }
    }
}

impl LocalRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("local epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("local batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("local lr must be > 0"));
        }
        Ok(())
    }
}

/// Train to the recipe's epoch budget.
pub fn local_train<O: LocalObjective + ?Sized>(
    start: &ParamSet,
    objective: &O,
    recipe: &LocalRecipe,
    rng: &mut Stream,
) -> Result<ParamSet> {
    let steps = objective.num_samples().div_ceil(recipe.batch_size) * recipe.epochs;
    sgd_train(
        start,
        objective,
        steps,
        recipe.batch_size,
        |t| {
            if recipe.cosine {
                cosine_anneal(recipe.lr, t, steps).expect("t < steps")
            } else {
                recipe.lr
            }
        },
        None,
        rng,
    )
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of an MLP with the given parameters.
pub fn model_accuracy(arch: &[usize], params: &ParamSet, data: &Dataset) -> Result<f64> {
    let (z, _) = mlp_forward(arch, params, &data.features)?;
    Ok(accuracy(&z.argmax_rows(), &data.labels))
}
