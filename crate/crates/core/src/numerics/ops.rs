//! Dense layer primitives with hand-written backward passes.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b` row-wise; reductions accumulate in f64.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != d {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            expected: vec![d, w.cols()],
            got: w.shape().to_vec(),
        });
    }
    let h = w.shape()[1];
    b.check_shape("linear_forward(bias)", &[h])?;
    let wd = w.data();
    let mut out = Vec::with_capacity(n * h);
    let mut acc = vec![0.0f64; h];
    for i in 0..n {
        acc.iter_mut()
            .zip(b.data())
            .for_each(|(a, &bv)| *a = bv.to_acc());
        for (k, &xv) in x.row(i).iter().enumerate() {
            let xv = xv.to_acc();
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[k * h..(k + 1) * h];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv.to_acc();
            }
        }
        out.extend(acc.iter().map(|&a| T::from_acc(a)));
    }
    Tensor::new(vec![n, h], out)
}

/// Gradients of `linear_forward` given upstream `dy` (n×h):
/// returns `(dx, dW, db)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = (x.rows(), x.cols());
    let h = w.shape()[1];
    dy.check_shape("linear_backward", &[n, h])?;
    let wd = w.data();

    let mut dw = vec![0.0f64; d * h];
    let mut db = vec![0.0f64; h];
    let mut dx = Vec::with_capacity(n * d);
    for i in 0..n {
        let g = dy.row(i);
        for (acc, &gv) in db.iter_mut().zip(g) {
            *acc += gv.to_acc();
        }
        for (k, &xv) in x.row(i).iter().enumerate() {
            let xv = xv.to_acc();
            let row = &mut dw[k * h..(k + 1) * h];
            for (acc, &gv) in row.iter_mut().zip(g) {
                *acc += xv * gv.to_acc();
            }
        }
        for k in 0..d {
            let wrow = &wd[k * h..(k + 1) * h];
            let s: f64 = wrow.iter().zip(g).map(|(&a, &b)| a.to_acc() * b.to_acc()).sum();
            dx.push(T::from_acc(s));
        }
    }
    Ok((
        Tensor::new(vec![n, d], dx)?,
        Tensor::new(vec![d, h], dw.into_iter().map(T::from_acc).collect())?,
        Tensor::new(vec![h], db.into_iter().map(T::from_acc).collect())?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gate `grad` by `pre > 0`. The subgradient at exactly zero is 0.
pub fn relu_backward<T: Real>(pre: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.check_shape("relu_backward", pre.shape())?;
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(pre.shape().to_vec(), data)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let c = logits.cols();
    if c == 0 {
        return out;
    }
    for i in 0..logits.rows() {
        let row = out.row_mut(i);
        let probs = softmax(row);
        row.iter_mut().zip(probs).for_each(|(r, p)| *r = T::from_acc(p));
    }
    out
}

/// Softmax of one vector, computed in f64.
pub fn softmax<T: Real>(z: &[T]) -> Vec<f64> {
    let max = z.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v.to_acc() - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// log-softmax of one vector in f64.
pub fn log_softmax<T: Real>(z: &[T]) -> Vec<f64> {
    let max = z.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v.to_acc() - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v.to_acc() - lse).collect()
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, with the
/// gradient `(softmax - onehot) / n`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let ls = log_softmax(logits.row(i));
        loss -= ls[y];
        for (j, l) in ls.iter().enumerate() {
            let p = l.exp();
            let g = if j == y { p - 1.0 } else { p };
            grad.push(T::from_acc(g * inv_n));
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}

/// Temperature-scaled distillation loss `T^2 * KL(softmax(t/T) || softmax(s/T))`,
/// averaged over rows, with its gradient w.r.t. the student logits.
pub fn distillation_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    temperature: f64,
) -> Result<(f64, Tensor<T>)> {
    teacher.check_shape("distillation_loss", student.shape())?;
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let (n, c) = (student.rows(), student.cols());
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    let scaled = |row: &[T]| -> Vec<f64> { row.iter().map(|v| v.to_acc() / temperature).collect() };
    for i in 0..n {
        let lt = log_softmax(&scaled(teacher.row(i)));
        let ls = log_softmax(&scaled(student.row(i)));
        for (a, b) in lt.iter().zip(&ls) {
            let p = a.exp();
            if p > 0.0 {
                loss += p * (a - b);
            }
            grad.push(T::from_acc(temperature * (b.exp() - p) * inv_n));
        }
    }
    let loss = loss * temperature * temperature * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation_loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[&[1.0, 2.0]]);
        let w = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::<f64>::zeros(&[1, 3]);
        let w = t(&[&[3.0, -1.0], &[0.5, 2.0], &[7.0, 7.0]]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_matches_hand_product() {
        // [[1,2,3],[-1,0,2]] . [[1,-1],[0,2],[3,1]] + [0.5,-0.5]
        // row0: [1+0+9, -1+4+3] = [10, 6] -> [10.5, 5.5]
        // row1: [-1+0+6, 1+0+2] = [5, 3]  -> [5.5, 2.5]
        let x = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 2.0]]);
        let w = t(&[&[1.0, -1.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let b = Tensor::vector(vec![0.5, -0.5]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[10.5, 5.5, 5.5, 2.5]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let w = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            linear_forward(&x, &w, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_values_and_gates() {
        let x = Tensor::vector(vec![-1.0f32, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let z = Tensor::<f64>::zeros(&[1, 4]);
        let (l, _) = softmax_cross_entropy(&z, &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let z = Tensor::new(vec![1, 3], vec![30.0f64, 0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!(l < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let z = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "test", 0);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = Tensor::new(vec![3, 5], data).unwrap();
        let labels = [4, 0, 2];
        let (_, g) = softmax_cross_entropy(&z, &labels).unwrap();
        let eps = 1e-5;
        for k in 0..15 {
            let mut zp = z.clone();
            zp.data_mut()[k] += eps;
            let mut zm = z.clone();
            zm.data_mut()[k] -= eps;
            let fd = (softmax_cross_entropy(&zp, &labels).unwrap().0
                - softmax_cross_entropy(&zm, &labels).unwrap().0)
                / (2.0 * eps);
            let a = g.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let z = Tensor::new(vec![1, 3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let (a, _) = softmax_cross_entropy(&z, &[1]).unwrap();
        let (b, _) = softmax_cross_entropy(&z.map(|v| v + 17.5), &[1]).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn distillation_zero_when_matching() {
        let z = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, -1.0, 0.0, 0.5, 0.2]).unwrap();
        let (l, g) = distillation_loss(&z, &z, 1.0).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn distillation_grad_matches_finite_differences() {
        let s = Tensor::new(vec![2, 3], vec![0.1f64, -0.4, 0.9, 1.5, 0.0, -0.7]).unwrap();
        let te = Tensor::new(vec![2, 3], vec![2.0f64, 0.3, -1.0, 0.2, 0.2, 1.1]).unwrap();
        for temp in [1.0, 3.0] {
            let (_, g) = distillation_loss(&s, &te, temp).unwrap();
            for k in 0..6 {
                let eps = 1e-6;
                let mut sp = s.clone();
                sp.data_mut()[k] += eps;
                let mut sm = s.clone();
                sm.data_mut()[k] -= eps;
                let fd = (distillation_loss(&sp, &te, temp).unwrap().0
                    - distillation_loss(&sm, &te, temp).unwrap().0)
                    / (2.0 * eps);
                assert!((g.data()[k] - fd).abs() < 1e-7, "T={temp} k={k}");
            }
        }
    }
}
