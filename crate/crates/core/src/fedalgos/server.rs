//! Server-side aggregation.

use serde::{Deserialize, Serialize};

use super::stc::CompressedDelta;
use crate::error::{invalid, Result};
use crate::numerics::{adaptive_step, OptimizerState, ParamSet, Tensor};
use crate::quantize::{payload_bytes, Payload};

/// What a client puts on the wire.
#[derive(Clone, Debug, PartialEq)]
pub enum WirePayload {
    Full(ParamSet),
    /// `params - broadcast`.
    Delta(ParamSet),
    Compressed(CompressedDelta),
}

impl Payload for WirePayload {
    fn payload_bytes(&self) -> u64 {
        match self {
            WirePayload::Full(p) | WirePayload::Delta(p) => payload_bytes(p),
            WirePayload::Compressed(c) => c.payload_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub payload: WirePayload,
    pub sample_count: usize,
    pub bytes: u64,
}

impl ClientUpdate {
    pub fn new(client_id: usize, payload: WirePayload, sample_count: usize) -> Self {
        let bytes = payload.payload_bytes();
        Self {
            client_id,
            payload,
            sample_count,
            bytes,
        }
    }

    pub fn full(client_id: usize, params: ParamSet, sample_count: usize) -> Self {
        Self::new(client_id, WirePayload::Full(params), sample_count)
    }

    /// The client's model as the server reconstructs it.
    pub fn resolve(&self, broadcast: Option<&ParamSet>) -> Result<ParamSet> {
        match &self.payload {
            WirePayload::Full(p) => Ok(p.clone()),
            WirePayload::Delta(d) => base(broadcast)?.axpy(1.0, d),
            WirePayload::Compressed(c) => {
                let b = base(broadcast)?;
                b.axpy(1.0, &c.decompress(b)?)
            }
        }
    }
}

fn base(broadcast: Option<&ParamSet>) -> Result<&ParamSet> {
    broadcast.ok_or_else(|| invalid("delta payload needs the broadcast model"))
}

/// Coordinate-wise mean, accumulated in f64 in slice order. With `weights`
/// the mean is weighted (weights need not be normalized).
pub fn mean_params(sets: &[ParamSet], weights: Option<&[f64]>) -> Result<ParamSet> {
    let first = sets.first().ok_or_else(|| invalid("mean over an empty set"))?;
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != sets.len() => return Err(invalid("one weight per set required")),
        Some(w) => w.to_vec(),
        None => vec![1.0; sets.len()],
    };
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("weights must sum to a positive value"));
    }
    for s in &sets[1..] {
        first.ensure_same_layout(s, "server mean")?;
    }
    let mut out = ParamSet::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for (s, &wi) in sets.iter().zip(&w) {
            for (a, &v) in acc.iter_mut().zip(s.expect(name)?.data()) {
                *a += wi * v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / total) as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

fn resolved(updates: &[ClientUpdate], broadcast: Option<&ParamSet>) -> Result<Vec<ParamSet>> {
    if updates.is_empty() {
        return Err(invalid("server aggregation over an empty update set"));
    }
    updates.iter().map(|u| u.resolve(broadcast)).collect()
}

fn sample_weights(updates: &[ClientUpdate], weighted: bool) -> Option<Vec<f64>> {
    weighted.then(|| updates.iter().map(|u| u.sample_count as f64).collect())
}

/// Unweighted mean of the client models (sample-count weighted when
/// `weighted`). `broadcast` is needed only for delta payloads.
pub fn server_fedavg(
    updates: &[ClientUpdate],
    broadcast: Option<&ParamSet>,
    weighted: bool,
) -> Result<ParamSet> {
    let sets = resolved(updates, broadcast)?;
    mean_params(&sets, sample_weights(updates, weighted).as_deref())
}

/// FedAdam / FedYogi: pseudo-gradient `mean(updates) - broadcast` fed to the
/// adaptive optimizer.
pub fn server_adaptive(
    state: OptimizerState,
    broadcast: &ParamSet,
    updates: &[ClientUpdate],
    weighted: bool,
) -> Result<(ParamSet, OptimizerState)> {
    let mean = server_fedavg(updates, Some(broadcast), weighted)?;
    let delta = mean.sub(broadcast)?;
    adaptive_step(state, &delta, broadcast)
}

/// Validation accuracy and cumulative traffic after a round; round 0 is the
/// initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub val_accuracy: f64,
    pub cum_up_bytes: u64,
    pub cum_down_bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AdaptiveHyper, OptimizerKind};

    fn ps(v: Vec<f32>) -> ParamSet {
        ParamSet::new().with("w", Tensor::vector(v))
    }

    #[test]
    fn identical_updates_give_that_update() {
        let p = ps(vec![0.1, -3.7, 1e-6]);
        let ups: Vec<_> = (0..3).map(|i| ClientUpdate::full(i, p.clone(), 5)).collect();
        assert_eq!(server_fedavg(&ups, None, false).unwrap(), p);
    }

    #[test]
    fn opposite_updates_cancel() {
        let ups = vec![
            ClientUpdate::full(0, ps(vec![1.5, -2.0]), 1),
            ClientUpdate::full(1, ps(vec![-1.5, 2.0]), 1),
        ];
        assert_eq!(server_fedavg(&ups, None, false).unwrap(), ps(vec![0.0, 0.0]));
    }

    #[test]
    fn weighted_mean_uses_counts() {
        let ups = vec![
            ClientUpdate::full(0, ps(vec![0.0]), 3),
            ClientUpdate::full(1, ps(vec![4.0]), 1),
        ];
        assert_eq!(server_fedavg(&ups, None, true).unwrap(), ps(vec![1.0]));
        assert_eq!(server_fedavg(&ups, None, false).unwrap(), ps(vec![2.0]));
    }

    #[test]
    fn empty_set_errors() {
        assert!(server_fedavg(&[], None, false).is_err());
    }

    #[test]
    fn delta_payload_reconstructs() {
        let b = ps(vec![1.0, 1.0]);
        let u = ClientUpdate::new(0, WirePayload::Delta(ps(vec![0.5, -1.0])), 1);
        assert_eq!(u.resolve(Some(&b)).unwrap(), ps(vec![1.5, 0.0]));
        assert!(u.resolve(None).is_err());
        assert_eq!(u.bytes, 8);
    }

    #[test]
    fn adaptive_unchanged_cases() {
        let b = ps(vec![0.3, -0.2]);
        let st = OptimizerState::new(OptimizerKind::Adam, AdaptiveHyper::default(), &b);
        let ups = vec![ClientUpdate::full(0, b.clone(), 1)];
        let (p, _) = server_adaptive(st, &b, &ups, false).unwrap();
        assert_eq!(p, b);

        let hyper = AdaptiveHyper {
            lr: 0.0,
            ..AdaptiveHyper::default()
        };
        let st = OptimizerState::new(OptimizerKind::Yogi, hyper, &b);
        let ups = vec![ClientUpdate::full(0, ps(vec![5.0, 5.0]), 1)];
        let (p, _) = server_adaptive(st, &b, &ups, false).unwrap();
        assert_eq!(p, b);
    }

    #[test]
    fn adaptive_single_client_hand_value() {
        // delta = 1: m = 0.1, v = 0.01, step = 0.01 * 0.1 / (0.1 + 0.001)
        let b = ps(vec![0.0]);
        let st = OptimizerState::new(OptimizerKind::Adam, AdaptiveHyper::default(), &b);
        let ups = vec![ClientUpdate::full(0, ps(vec![1.0]), 1)];
        let (p, _) = server_adaptive(st, &b, &ups, false).unwrap();
        let want = 0.01 * 0.1 / (0.1 + 0.001);
        assert!((p.get("w").unwrap().data()[0] as f64 - want).abs() < 1e-7);
    }
}
