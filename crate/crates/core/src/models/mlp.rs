use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{
    linear_backward, linear_forward, relu, relu_backward, ParamSet, Real, Tensor,
};

/// Fully connected ReLU network with layer widths `[d, h1, ..., C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub arch: Vec<usize>,
    pub params: ParamSet,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Scalar count of an MLP with these widths: `sum(in * out + out)`.
pub fn mlp_param_count(arch: &[usize]) -> usize {
    arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(invalid(format!("invalid architecture {arch:?}")));
    }
    Ok(())
}

/// Weights uniform in `±sqrt(1/fan_in)`; biases zero.
pub fn init_mlp_params<R: Rng + ?Sized>(arch: &[usize], rng: &mut R) -> Result<ParamSet> {
    check_arch(arch)?;
    let mut p = ParamSet::new();
    for (l, w) in arch.windows(2).enumerate() {
        let bound = (1.0 / w[0] as f64).sqrt();
        let data = (0..w[0] * w[1])
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        p.insert(weight_name(l), Tensor::new(vec![w[0], w[1]], data)?)?;
        p.insert(bias_name(l), Tensor::zeros(&[w[1]]))?;
    }
    Ok(p)
}

/// Activations kept from the forward pass: the input of every layer and the
/// pre-activation of every hidden layer.
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

pub fn mlp_forward<T: Real>(
    arch: &[usize],
    params: &ParamSet<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    if x.cols() != arch[0] {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            expected: vec![x.rows(), arch[0]],
            got: x.shape().to_vec(),
        });
    }
    let layers = arch.len() - 1;
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(layers),
        pre: Vec::with_capacity(layers),
    };
    let mut h = x.clone();
    for l in 0..layers {
        let z = linear_forward(
            &h,
            params.expect(&weight_name(l))?,
            params.expect(&bias_name(l))?,
        )?;
        cache.inputs.push(h);
        if l + 1 < layers {
            h = relu(&z);
            cache.pre.push(z);
        } else {
            h = z;
        }
    }
    Ok((h, cache))
}

/// Parameter gradients and the gradient w.r.t. the input.
pub fn mlp_backward<T: Real>(
    arch: &[usize],
    params: &ParamSet<T>,
    cache: &MlpCache<T>,
    dlogits: &Tensor<T>,
) -> Result<(ParamSet<T>, Tensor<T>)> {
    let layers = arch.len() - 1;
    let mut grads: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(layers);
    let mut g = dlogits.clone();
    for l in (0..layers).rev() {
        let (dx, dw, db) = linear_backward(&cache.inputs[l], params.expect(&weight_name(l))?, &g)?;
        grads.push((dw, db));
        g = if l > 0 {
            relu_backward(&cache.pre[l - 1], &dx)?
        } else {
            dx
        };
    }
    let mut out = ParamSet::new();
    for (l, (dw, db)) in grads.into_iter().rev().enumerate() {
        out.insert(weight_name(l), dw)?;
        out.insert(bias_name(l), db)?;
    }
    Ok((out, g))
}

impl LocalModel {
    pub fn init<R: Rng + ?Sized>(arch: Vec<usize>, rng: &mut R) -> Result<Self> {
        let params = init_mlp_params(&arch, rng)?;
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Vec<usize>) -> Result<Self> {
        check_arch(&arch)?;
        let mut params = ParamSet::new();
        for (l, w) in arch.windows(2).enumerate() {
            params.insert(weight_name(l), Tensor::zeros(&[w[0], w[1]]))?;
            params.insert(bias_name(l), Tensor::zeros(&[w[1]]))?;
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Vec<usize>, params: ParamSet) -> Result<Self> {
        Self::zeros(arch.clone())?
            .params
            .ensure_same_layout(&params, "LocalModel::from_params")?;
        Ok(Self { arch, params })
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.arch.last().expect("arch has >= 2 entries")
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Raw pre-softmax logits, `n x C`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(mlp_forward(&self.arch, &self.params, x)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.argmax_rows())
    }
}

/// Stack every model's logits for each input: `n x (M*C)`, row `j` holding
/// `concat(z_1(x_j), ..., z_M(x_j))` in client order.
pub fn ensemble_forward(models: &[LocalModel], x: &Tensor) -> Result<Tensor> {
    let first = models
        .first()
        .ok_or_else(|| invalid("ensemble_forward needs at least one model"))?;
    let c = first.num_classes();
    if let Some(bad) = models.iter().find(|m| m.num_classes() != c) {
        return Err(invalid(format!(
            "heterogeneous ensemble: {} vs {} classes",
            c,
            bad.num_classes()
        )));
    }
    let n = x.rows();
    let m = models.len();
    let per_model: Vec<Tensor> = models.iter().map(|mdl| mdl.forward(x)).collect::<Result<_>>()?;
    let mut data = vec![0.0f32; n * m * c];
    for (i, z) in per_model.iter().enumerate() {
        for j in 0..n {
            data[j * m * c + i * c..j * m * c + (i + 1) * c].copy_from_slice(z.row(j));
        }
    }
    Tensor::new(vec![n, m * c], data)
}

/// View one stacked row as an `M x C` logit matrix.
pub fn logit_matrix(stacked: &Tensor, row: usize, m: usize) -> Result<Tensor> {
    let r = stacked.row(row);
    Tensor::new(vec![m, r.len() / m], r.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = LocalModel::zeros(vec![3, 4, 2]).unwrap();
        let x = Tensor::filled(&[5, 3], 1.5);
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_equals_linear_forward() {
        let mut r = crate::rng::stream(0, "t", 0);
        let m = LocalModel::init(vec![3, 2], &mut r).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let direct = linear_forward(
            &x,
            m.params.get("layer0.weight").unwrap(),
            m.params.get("layer0.bias").unwrap(),
        )
        .unwrap();
        assert_eq!(m.forward(&x).unwrap(), direct);
    }

    #[test]
    fn param_count_formula() {
        let mut r = crate::rng::stream(0, "t", 0);
        let m = LocalModel::init(vec![20, 64, 10], &mut r).unwrap();
        assert_eq!(m.num_params(), mlp_param_count(&[20, 64, 10]));
        assert_eq!(m.num_params(), 20 * 64 + 64 + 64 * 10 + 10);
    }

    #[test]
    fn ensemble_rows_follow_client_order() {
        let mut r = crate::rng::stream(1, "t", 0);
        let a = LocalModel::init(vec![2, 3], &mut r).unwrap();
        let b = LocalModel::init(vec![2, 3], &mut r).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let z = ensemble_forward(&[a.clone(), b.clone(), a.clone()], &x).unwrap();
        let za = a.forward(&x).unwrap();
        let zb = b.forward(&x).unwrap();
        assert_eq!(&z.row(0)[0..3], za.row(0));
        assert_eq!(&z.row(0)[3..6], zb.row(0));
        assert_eq!(&z.row(0)[6..9], za.row(0));
        let single = ensemble_forward(&[a.clone()], &x).unwrap();
        assert_eq!(single.data(), za.data());
    }

    #[test]
    fn ensemble_rejects_mixed_classes() {
        let a = LocalModel::zeros(vec![2, 3]).unwrap();
        let b = LocalModel::zeros(vec![2, 4]).unwrap();
        assert!(ensemble_forward(&[a, b], &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        use rand::Rng;
        let arch = vec![4, 5, 3];
        let mut r = crate::rng::stream(3, "t", 0);
        let m = LocalModel::init(arch.clone(), &mut r).unwrap();
        let x: Tensor<f64> = Tensor::new(
            vec![6, 4],
            (0..24).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let labels = [0, 1, 2, 2, 1, 0];
        let rep = grad_check(
            |p| {
                let (z, cache) = mlp_forward(&arch, p, &x)?;
                let (loss, dz) = crate::numerics::softmax_cross_entropy(&z, &labels)?;
                Ok((loss, mlp_backward(&arch, p, &cache, &dz)?.0))
            },
            &m.params,
            1e-4,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
