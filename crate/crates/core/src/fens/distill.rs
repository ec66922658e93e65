//! Server-side knowledge distillation of the global model into one MLP.

use serde::{Deserialize, Serialize};

use super::global::GlobalModel;
use crate::error::{invalid, Result};
use crate::fedalgos::{sgd_train, LocalObjective};
use crate::models::{init_mlp_params, mlp_backward, mlp_forward, LocalModel};
use crate::numerics::{cosine_anneal, distillation_loss, ParamSet, Tensor};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for DistillRecipe {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            temperature: 1.0,
            cosine: true,
            seed: 0,
        }
    }
}

impl DistillRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("distillation epochs and batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(invalid("distillation lr and temperature must be > 0"));
        }
        Ok(())
    }
}

/// `T^2 KL(teacher || student)` at temperature `T` on unlabeled features.
pub struct DistillObjective<'a> {
    pub arch: &'a [usize],
    pub features: &'a Tensor,
    pub teacher: &'a Tensor,
    pub temperature: f64,
}

impl LocalObjective for DistillObjective<'_> {
    fn num_samples(&self) -> usize {
        self.features.rows()
    }

    fn loss_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, ParamSet)> {
        let x = self.features.select_rows(batch);
        let t = self.teacher.select_rows(batch);
        let (s, cache) = mlp_forward(self.arch, params, &x)?;
        let (loss, ds) = distillation_loss(&s, &t, self.temperature)?;
        Ok((loss, mlp_backward(self.arch, params, &cache, &ds)?.0))
    }
}

/// Train a student of shape `student_arch` to match the global model's
/// aggregated logits on `aux`. Starts from `init` when given.
pub fn distill(
    gm: &GlobalModel,
    aux: &Tensor,
    student_arch: &[usize],
    recipe: &DistillRecipe,
    init: Option<ParamSet>,
) -> Result<LocalModel> {
    recipe.validate()?;
    if !gm.is_distillable() {
        return Err(invalid("the vote aggregator outputs classes, not logits; cannot distill"));
    }
    if aux.rows() == 0 {
        return Err(invalid("empty auxiliary set"));
    }
    if student_arch.last() != Some(&gm.num_classes()) {
        return Err(invalid("student output width must equal the number of classes"));
    }
    let teacher = gm.logits(aux)?;
    let start = match init {
        Some(p) => p,
        None => init_mlp_params(student_arch, &mut stream(recipe.seed, "student", 0))?,
    };
    let obj = DistillObjective {
        arch: student_arch,
        features: aux,
        teacher: &teacher,
        temperature: recipe.temperature,
    };
    let steps = aux.rows().div_ceil(recipe.batch_size) * recipe.epochs;
    let mut rng = stream(recipe.seed, "distill", 0);
    let params = sgd_train(
        &start,
        &obj,
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
        &mut rng,
    )?;
    LocalModel::from_params(student_arch.to_vec(), params)
}
