//! Plain SGD, cosine annealing and the adaptive server optimizers.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// `p - lr * g`, elementwise.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f32) -> Result<ParamSet> {
    params.axpy(-lr, grads)
}

/// Cosine-annealed learning rate with a floor of 0:
/// `0.5 * lr0 * (1 + cos(pi * t / total))`.
pub fn cosine_anneal(lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(invalid("cosine_anneal: total steps must be >= 1"));
    }
    if t > total {
        return Err(invalid(format!("cosine_anneal: step {t} beyond {total}")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Yogi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveHyper {
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity floor added to the square root of the second moment.
    pub tau: f64,
    pub lr: f64,
}

impl Default for AdaptiveHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            lr: 0.01,
        }
    }
}

/// Server optimizer state: moment accumulators mirroring the model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: AdaptiveHyper,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: AdaptiveHyper, layout: &ParamSet) -> Self {
        Self {
            kind,
            hyper,
            first_moment: layout.zeros_like(),
            second_moment: layout.zeros_like(),
            step_count: 0,
        }
    }
}

/// One FedAdam / FedYogi server step applied to `params` with pseudo-gradient
/// `delta`. No bias correction.
pub fn adaptive_step(
    mut state: OptimizerState,
    delta: &ParamSet,
    params: &ParamSet,
) -> Result<(ParamSet, OptimizerState)> {
    let h = state.hyper;
    if state.kind == OptimizerKind::Sgd {
        return Err(invalid("adaptive_step requires adam or yogi"));
    }
    if !(h.tau > 0.0) {
        return Err(invalid("adaptivity floor tau must be > 0"));
    }
    params.ensure_same_layout(delta, "adaptive_step")?;
    params.ensure_same_layout(&state.first_moment, "adaptive_step")?;

    let mut out = ParamSet::new();
    let entries = params
        .iter()
        .zip(delta.iter())
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()));
    for (((name, p), (_, d)), ((_, m), (_, v))) in entries {
        let mut next = Vec::with_capacity(p.len());
        for (((&pv, &dv), mv), vv) in p
            .data()
            .iter()
            .zip(d.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let (dv, m_old, v_old) = (dv as f64, *mv as f64, *vv as f64);
            let m_new = h.beta1 * m_old + (1.0 - h.beta1) * dv;
            let d2 = dv * dv;
            let v_new = match state.kind {
                OptimizerKind::Adam => h.beta2 * v_old + (1.0 - h.beta2) * d2,
                _ => (v_old - (1.0 - h.beta2) * d2 * sign(v_old - d2)).max(0.0),
            };
            *mv = m_new as f32;
            *vv = v_new as f32;
            next.push((pv as f64 + h.lr * m_new / (v_new.sqrt() + h.tau)) as f32);
        }
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), next)?)?;
    }
    state.step_count += 1;
    Ok((out, state))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> ParamSet {
        ParamSet::new().with("w", Tensor::vector(vec![v]))
    }

    #[test]
    fn sgd_basics() {
        let p = scalar(1.0);
        let g = scalar(2.0);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().flatten(), vec![0.0]);
        let two = sgd_step(&sgd_step(&p, &g, 0.25).unwrap(), &g, 0.25).unwrap();
        assert_eq!(two, sgd_step(&p, &g, 0.5).unwrap());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_anneal(0.1, 0, 10).unwrap(), 0.1);
        assert!(cosine_anneal(0.1, 10, 10).unwrap().abs() < 1e-15);
        assert!((cosine_anneal(0.1, 5, 10).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_anneal(0.1, 11, 10).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=37 {
            let lr = cosine_anneal(0.3, t, 37).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn hyper() -> AdaptiveHyper {
        AdaptiveHyper {
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            lr: 0.1,
        }
    }

    #[test]
    fn adam_hand_example() {
        let p = scalar(0.0);
        let st = OptimizerState::new(OptimizerKind::Adam, hyper(), &p);
        let (next, st) = adaptive_step(st, &scalar(1.0), &p).unwrap();
        assert!((st.first_moment.flatten()[0] - 0.1).abs() < 1e-7);
        assert!((st.second_moment.flatten()[0] - 0.01).abs() < 1e-7);
        // 0.1 * 0.1 / (0.1 + 0.001)
        assert!((next.flatten()[0] - 0.099_009_9).abs() < 1e-6);
    }

    #[test]
    fn zero_delta_is_noop() {
        let p = ParamSet::new().with("a", Tensor::vector(vec![0.3, -2.0, 5.0]));
        for kind in [OptimizerKind::Adam, OptimizerKind::Yogi] {
            let st = OptimizerState::new(kind, hyper(), &p);
            let (next, _) = adaptive_step(st, &p.zeros_like(), &p).unwrap();
            assert_eq!(next, p);
        }
    }

    #[test]
    fn adam_and_yogi_agree_on_first_step() {
        let p = ParamSet::new().with("a", Tensor::vector(vec![0.3, -2.0, 5.0, 0.0]));
        let d = ParamSet::new().with("a", Tensor::vector(vec![0.5, -0.25, 3.0, 0.0]));
        let a = adaptive_step(OptimizerState::new(OptimizerKind::Adam, hyper(), &p), &d, &p)
            .unwrap();
        let y = adaptive_step(OptimizerState::new(OptimizerKind::Yogi, hyper(), &p), &d, &p)
            .unwrap();
        assert_eq!(a.0, y.0);
        assert_eq!(a.1.second_moment, y.1.second_moment);
    }

    #[test]
    fn rejects_bad_tau_and_sgd_kind() {
        let p = scalar(1.0);
        let mut h = hyper();
        h.tau = 0.0;
        assert!(adaptive_step(OptimizerState::new(OptimizerKind::Adam, h, &p), &p, &p).is_err());
        assert!(
            adaptive_step(OptimizerState::new(OptimizerKind::Sgd, hyper(), &p), &p, &p).is_err()
        );
    }

    #[test]
    fn yogi_second_moment_stays_nonnegative() {
        let p = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerKind::Yogi, hyper(), &p);
        let mut params = p.clone();
        for k in 0..50 {
            let d = scalar(if k % 7 == 0 { 3.0 } else { 0.01 });
            let (np, ns) = adaptive_step(st, &d, &params).unwrap();
            assert!(ns.second_moment.flatten()[0] >= 0.0);
            params = np;
            st = ns;
        }
    }
}
