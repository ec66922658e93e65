use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// Unit direction for class `c` among `classes` in `dim` dimensions.
///
/// The first `2 * dim` classes sit on the signed coordinate axes
/// (`+e_0, ..., +e_{d-1}, -e_0, ...`); further classes use fixed Gaussian
/// directions drawn from a stream keyed only by `(classes, dim)`.
pub fn class_direction(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if c < 2 * dim {
        v[c % dim] = if c < dim { 1.0 } else { -1.0 };
        return v;
    }
    let mut rng = crate::rng::stream(((classes as u64) << 32) | dim as u64, "class_direction", c as u64);
    loop {
        v.iter_mut()
            .for_each(|x| *x = StandardNormal.sample(&mut rng));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Isotropic unit-variance Gaussian blobs, one per class, with means at
/// `separation * class_direction(c)`. Rows are shuffled by `seed`.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class < 1 {
        return Err(invalid(
            "gen_synthetic needs classes >= 2, dim >= 2, n_per_class >= 1",
        ));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(invalid("separation must be finite and non-negative"));
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            class_direction(c, classes, dim)
                .into_iter()
                .map(|x| x * separation)
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..classes * n_per_class).map(|i| i % classes).collect();
    order.shuffle(&mut crate::rng::stream(seed, "synthetic_order", 0));

    let mut noise = crate::rng::stream(seed, "synthetic_noise", 0);
    let mut data = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        for mu in &means[c] {
            let z: f64 = StandardNormal.sample(&mut noise);
            data.push((mu + z) as f32);
        }
    }
    let features = Tensor::new(vec![order.len(), dim], data)?;
    Dataset::new(features, order, classes)
}
