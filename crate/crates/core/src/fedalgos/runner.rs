//! The iterative FL loop.

use rand::seq::index::sample;
use rayon::prelude::*;

use super::client::{client_local_update, LocalObjective};
use super::server::{server_adaptive, server_fedavg, ClientUpdate, RoundMetrics, WirePayload};
use super::stc::stc_compress;
use super::{FedConfig, FlAlgorithm};
use crate::error::{invalid, Result};
use crate::ledger::{CommLedger, Phase};
use crate::numerics::{OptimizerState, ParamSet};
use crate::quantize::payload_bytes;
use crate::rng::stream;

/// Sorted ids of the clients taking part in round `t`.
pub fn sample_clients(num_clients: usize, participation: f64, seed: u64, t: usize) -> Vec<usize> {
    let k = ((participation * num_clients as f64).round() as usize).clamp(1, num_clients.max(1));
    if k >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = stream(seed, "participation", t as u64);
    let mut ids = sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug)]
pub struct FlOutcome {
    pub params: ParamSet,
    pub metrics: Vec<RoundMetrics>,
}

/// Ledger phases to charge for the two directions of each round.
#[derive(Clone, Copy, Debug)]
pub struct TrafficPhases {
    pub up: Phase,
    pub down: Phase,
}

impl Default for TrafficPhases {
    fn default() -> Self {
        Self {
            up: Phase::FlUp,
            down: Phase::FlDown,
        }
    }
}

/// `cfg.rounds` rounds of broadcast, local update, aggregate. Client `i` of
/// the ledger is `clients[i]`. `evaluate` scores the global parameters after
/// every round and once before the first.
pub fn run_fl<O, E>(
    init: &ParamSet,
    clients: &[O],
    cfg: &FedConfig,
    phases: TrafficPhases,
    ledger: &mut CommLedger,
    mut evaluate: E,
) -> Result<FlOutcome>
where
    O: LocalObjective,
    E: FnMut(&ParamSet) -> Result<f64>,
{
    cfg.validate_schedule()?;
    if clients.is_empty() {
        return Err(invalid("run_fl needs at least one client"));
    }
    let m = clients.len();
    let mut params = init.clone();
    let mut server = match cfg.algorithm {
        FlAlgorithm::Fedadam | FlAlgorithm::Fedyogi => Some(OptimizerState::new(
            cfg.algorithm.server_optimizer(),
            cfg.adaptive_hyper(),
            init,
        )),
        _ => None,
    };
    let (mut cum_up, mut cum_down) = (0u64, 0u64);
    let mut metrics = vec![RoundMetrics {
        round: 0,
        val_accuracy: evaluate(&params)?,
        cum_up_bytes: 0,
        cum_down_bytes: 0,
    }];

    for t in 1..=cfg.rounds {
        let ids = sample_clients(m, cfg.participation, cfg.seed, t);
        let down = payload_bytes(&params);
        let updates = ids
            .par_iter()
            .map(|&i| {
                let mut rng = stream(cfg.seed, "local", ((t as u64) << 32) | i as u64);
                let local = client_local_update(&params, &clients[i], cfg, &mut rng)?;
                let n = clients[i].num_samples();
                let payload = if cfg.algorithm == FlAlgorithm::FedavgStc {
                    WirePayload::Compressed(stc_compress(&local.sub(&params)?, &cfg.stc)?)
                } else {
                    WirePayload::Full(local)
                };
                Ok(ClientUpdate::new(i, payload, n))
            })
            .collect::<Result<Vec<_>>>()?;

        for u in &updates {
            ledger.record(u.client_id, phases.down, down);
            ledger.record(u.client_id, phases.up, u.bytes);
            cum_down += down;
            cum_up += u.bytes;
        }

        params = match server.take() {
            Some(state) => {
                let (p, s) = server_adaptive(state, &params, &updates, cfg.weighted_mean)?;
                server = Some(s);
                p
            }
            None => server_fedavg(&updates, Some(&params), cfg.weighted_mean)?,
        };
        if !params.all_finite() {
            return Err(crate::error::Error::NonFinite(format!("global model after round {t}")));
        }
        metrics.push(RoundMetrics {
            round: t,
            val_accuracy: evaluate(&params)?,
            cum_up_bytes: cum_up,
            cum_down_bytes: cum_down,
        });
    }
    Ok(FlOutcome { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedalgos::LocalWork;

    #[test]
    fn full_participation_every_round() {
        for t in 1..5 {
            assert_eq!(sample_clients(6, 1.0, 3, t), vec![0, 1, 2, 3, 4, 5]);
        }
        let s = sample_clients(10, 0.3, 3, 1);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_local_steps_keep_init() {
        let data = crate::data::gen_synthetic(3, 4, 10, 2.0, 0).unwrap();
        let arch = [4, 3];
        let objs: Vec<_> = (0..3)
            .map(|_| crate::fedalgos::SupervisedObjective { arch: &arch, data: &data })
            .collect();
        let init = crate::models::init_mlp_params(&arch, &mut stream(0, "i", 0)).unwrap();
        let cfg = FedConfig {
            rounds: 1,
            local_work: LocalWork::Steps(0),
            ..FedConfig::default()
        };
        let mut ledger = CommLedger::new(3);
        let out = run_fl(&init, &objs, &cfg, TrafficPhases::default(), &mut ledger, |_| Ok(0.0)).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(ledger.total(), 2 * 3 * payload_bytes(&init));
        assert_eq!(out.metrics.len(), 2);
    }
}
