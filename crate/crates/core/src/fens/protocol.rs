//! The two FENS phases.

use rayon::prelude::*;

use super::config::FensConfig;
use super::global::GlobalModel;
use crate::data::{ClientShard, Dataset};
use crate::error::{invalid, Error, Result};
use crate::fedalgos::{
    accuracy, local_train, run_fl, LocalObjective, RoundMetrics, SupervisedObjective, TrafficPhases,
};
use crate::ledger::{CommLedger, Phase};
use crate::models::{
    aggregate_competency, ensemble_forward, estimate_competency, init_mlp_params, AggregatorKind,
    AggregatorSpec, LocalModel, COMPETENCY_EPS,
};
use crate::numerics::{softmax_cross_entropy, ParamSet, Tensor};
use crate::quantize::{dequantize, payload_bytes, quantize_params, QuantizedParamSet, FP32_BYTES};
use crate::rng::stream;

/// Shared initial parameters for every client's local model.
pub fn initial_params(arch: &[usize], seed: u64) -> Result<ParamSet> {
    init_mlp_params(arch, &mut stream(seed, "init", 0))
}

/// One-shot local training on each client's local split, then one FP32
/// upload per client.
pub fn phase1(
    shards: &[ClientShard],
    cfg: &FensConfig,
    ledger: &mut CommLedger,
) -> Result<Vec<LocalModel>> {
    cfg.validate()?;
    let first = shards.first().ok_or_else(|| invalid("no clients"))?;
    let arch = cfg.local_arch(first.local_train.dim(), first.local_train.num_classes);
    if let Some(bad) = shards.iter().find(|s| s.local_train.is_empty()) {
        return Err(invalid(format!(
            "client {} has no local training data",
            bad.client_id
        )));
    }
    let init = initial_params(&arch, cfg.seed)?;
    let models = shards
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let obj = SupervisedObjective {
                arch: &arch,
                data: &s.local_train,
            };
            let mut rng = stream(cfg.seed, "phase1", i as u64);
            let params = local_train(&init, &obj, &cfg.local, &mut rng)?;
            LocalModel::from_params(arch.clone(), params)
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, m) in models.iter().enumerate() {
        if cfg.count_init_download {
            ledger.record(i, Phase::InitDown, payload_bytes(&init));
        }
        ledger.record(i, Phase::Phase1Up, payload_bytes(&m.params));
    }
    Ok(models)
}

/// What the server ships in the broadcast.
#[derive(Clone, Debug)]
pub struct Broadcast {
    /// The models as clients reconstruct them (dequantized when quantized).
    pub ensemble: Vec<LocalModel>,
    pub quantized: Option<Vec<QuantizedParamSet>>,
    /// Bytes each client downloads.
    pub bytes_per_client: u64,
}

/// Send every model to every one of `num_clients` clients, optionally
/// quantized to INT8 first.
pub fn broadcast_ensemble(
    models: &[LocalModel],
    quantize: bool,
    num_clients: usize,
    ledger: &mut CommLedger,
) -> Result<Broadcast> {
    let (ensemble, quantized, bytes) = if quantize {
        let q = models
            .iter()
            .map(|m| quantize_params(&m.params))
            .collect::<Result<Vec<_>>>()?;
        let bytes = q.iter().map(payload_bytes).sum();
        let ens = models
            .iter()
            .zip(&q)
            .map(|(m, qp)| LocalModel::from_params(m.arch.clone(), dequantize(qp)))
            .collect::<Result<Vec<_>>>()?;
        (ens, Some(q), bytes)
    } else {
        let bytes = models.iter().map(|m| payload_bytes(&m.params)).sum();
        (models.to_vec(), None, bytes)
    };
    for i in 0..num_clients {
        ledger.record(i, Phase::Phase1Down, bytes);
    }
    Ok(Broadcast {
        ensemble,
        quantized,
        bytes_per_client: bytes,
    })
}

/// Aggregator training objective on one client's aggregator split. The
/// ensemble is frozen; only aggregator parameters receive gradients.
pub struct AggregatorObjective<'a> {
    pub spec: &'a AggregatorSpec,
    pub ensemble: &'a [LocalModel],
    pub data: &'a Dataset,
    cached: Option<Tensor>,
}

impl<'a> AggregatorObjective<'a> {
    pub fn new(
        spec: &'a AggregatorSpec,
        ensemble: &'a [LocalModel],
        data: &'a Dataset,
        cache: bool,
    ) -> Result<Self> {
        let cached = if cache && !data.is_empty() {
            Some(ensemble_forward(ensemble, &data.features)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            ensemble,
            data,
            cached,
        })
    }
}

impl LocalObjective for AggregatorObjective<'_> {
    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn loss_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, ParamSet)> {
        let x = self.data.features.select_rows(batch);
        let stacked = match &self.cached {
            Some(all) => all.select_rows(batch),
            None => ensemble_forward(self.ensemble, &x)?,
        };
        let y: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
        let (out, cache) = self.spec.forward_with(params, &x, &stacked)?;
        let (loss, dout) = softmax_cross_entropy(&out, &y)?;
        let grads = self.spec.backward_with(params, &stacked, &cache, &dout)?;
        Ok((loss, grads.params))
    }
}

/// Starting point for a trainable aggregator. NN, linear and per-class start
/// at the averaging point; MoE starts with uniform gates.
pub fn init_aggregator(cfg: &FensConfig, m: usize, c: usize, dim: usize) -> Result<AggregatorSpec> {
    let mut rng = stream(cfg.seed, "aggregator", 0);
    match cfg.aggregator {
        AggregatorKind::Nn => AggregatorSpec::nn(m, c, cfg.nn_hidden, &mut rng),
        AggregatorKind::Linear => AggregatorSpec::linear(m, c),
        AggregatorKind::PerClass => AggregatorSpec::per_class(m, c),
        AggregatorKind::Moe => AggregatorSpec::moe(dim, cfg.moe_hidden, m, c, &mut rng),
        k => Err(invalid(format!("{k} aggregator is not trainable"))),
    }
}

/// Validation scorer with the ensemble's logits precomputed.
pub struct EnsembleEval {
    pub features: Tensor,
    pub stacked: Tensor,
    pub labels: Vec<usize>,
}

impl EnsembleEval {
    pub fn new(ensemble: &[LocalModel], data: &Dataset) -> Result<Self> {
        Ok(Self {
            features: data.features.clone(),
            stacked: ensemble_forward(ensemble, &data.features)?,
            labels: data.labels.clone(),
        })
    }

    pub fn accuracy(&self, spec: &AggregatorSpec) -> Result<f64> {
        if self.labels.is_empty() {
            return Ok(0.0);
        }
        Ok(accuracy(&spec.predict(&self.features, &self.stacked)?, &self.labels))
    }

    pub fn accuracy_with(&self, spec: &AggregatorSpec, params: &ParamSet) -> Result<f64> {
        if self.labels.is_empty() {
            return Ok(0.0);
        }
        let (out, _) = spec.forward_with(params, &self.features, &self.stacked)?;
        Ok(accuracy(&out.argmax_rows(), &self.labels))
    }
}

/// Federated training of the aggregator on the clients' aggregator splits.
/// Clients whose aggregator split is empty do not take part.
/// Metrics carry validation accuracy when `validation` is given.
pub fn phase2(
    ensemble: &[LocalModel],
    shards: &[ClientShard],
    cfg: &FensConfig,
    validation: Option<&Dataset>,
    ledger: &mut CommLedger,
) -> Result<(AggregatorSpec, Vec<RoundMetrics>)> {
    if !cfg.aggregator.is_trainable() {
        return Err(invalid(format!(
            "{} aggregator is not trained federatedly",
            cfg.aggregator
        )));
    }
    let first = ensemble.first().ok_or_else(|| invalid("empty ensemble"))?;
    let (m, c, d) = (ensemble.len(), first.num_classes(), first.input_dim());
    // Clients without aggregator data sit out phase 2.
    let active: Vec<&ClientShard> = shards.iter().filter(|s| !s.agg_train.is_empty()).collect();
    if active.is_empty() {
        return Err(invalid("no client has aggregator training data"));
    }
    let mut spec = init_aggregator(cfg, m, c, d)?;
    let objectives = active
        .iter()
        .map(|s| AggregatorObjective::new(&spec, ensemble, &s.agg_train, cfg.cache_logits))
        .collect::<Result<Vec<_>>>()?;
    let eval = validation.map(|v| EnsembleEval::new(ensemble, v)).transpose()?;
    let fl_cfg = crate::fedalgos::FedConfig {
        seed: crate::rng::derive_seed(cfg.seed, "phase2", 0),
        ..cfg.agg_fl.clone()
    };
    let phases = TrafficPhases {
        up: Phase::Phase2Up,
        down: Phase::Phase2Down,
    };
    let mut local_ledger = CommLedger::new(active.len());
    let out = run_fl(&spec.params, &objectives, &fl_cfg, phases, &mut local_ledger, |p| match &eval {
        Some(e) => e.accuracy_with(&spec, p),
        None => Ok(0.0),
    })?;
    drop(objectives);
    for (k, s) in active.iter().enumerate() {
        for p in [Phase::Phase2Up, Phase::Phase2Down] {
            let b = local_ledger.get(k, p);
            if b > 0 {
                ledger.record(s.client_id, p, b);
            }
        }
    }
    spec.params = out.params;
    Ok((spec, out.metrics))
}

/// Static aggregators: averaging needs nothing, weighted averaging collects
/// label counts, voting collects competency estimates from the aggregator
/// splits.
pub fn fit_static(
    ensemble: &[LocalModel],
    shards: &[ClientShard],
    kind: AggregatorKind,
    ledger: &mut CommLedger,
) -> Result<AggregatorSpec> {
    let first = ensemble.first().ok_or_else(|| invalid("empty ensemble"))?;
    let (m, c) = (ensemble.len(), first.num_classes());
    match kind {
        AggregatorKind::Average => AggregatorSpec::average(m, c),
        AggregatorKind::WeightedAverage => {
            let counts: Vec<Vec<usize>> = shards.iter().map(|s| s.label_counts.clone()).collect();
            for s in shards {
                ledger.record(s.client_id, Phase::StaticUp, c as u64 * FP32_BYTES);
            }
            AggregatorSpec::weighted_average(&counts)
        }
        AggregatorKind::Vote => {
            let mut contributions = Vec::new();
            for s in shards.iter().filter(|s| !s.agg_train.is_empty()) {
                contributions.push(estimate_competency(ensemble, &s.agg_train, COMPETENCY_EPS)?);
                ledger.record(s.client_id, Phase::StaticUp, (m * c * c) as u64 * FP32_BYTES);
            }
            AggregatorSpec::vote(aggregate_competency(&contributions)?, c)
        }
        k => Err(invalid(format!("{k} aggregator is trained, not fitted"))),
    }
}

/// Everything a FENS run produces.
#[derive(Clone, Debug)]
pub struct FensRun {
    /// Models as uploaded, before any quantization.
    pub uploaded: Vec<LocalModel>,
    pub broadcast: Broadcast,
    pub global: GlobalModel,
    /// Phase-2 trace; a single round-0 entry for static aggregators.
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
}

/// Both phases end to end. The uploaded models are fingerprinted before the
/// broadcast and checked again at the end.
pub fn run_fens(shards: &[ClientShard], cfg: &FensConfig, validation: Option<&Dataset>) -> Result<FensRun> {
    let mut ledger = CommLedger::new(shards.len());
    let uploaded = phase1(shards, cfg, &mut ledger)?;
    let prints: Vec<String> = uploaded.iter().map(|m| m.params.fingerprint()).collect();
    let broadcast = broadcast_ensemble(&uploaded, cfg.quantize, shards.len(), &mut ledger)?;
    let ship_prints: Vec<String> = broadcast.ensemble.iter().map(|m| m.params.fingerprint()).collect();

    let (aggregator, metrics) = if cfg.aggregator.is_trainable() {
        phase2(&broadcast.ensemble, shards, cfg, validation, &mut ledger)?
    } else {
        let spec = fit_static(&broadcast.ensemble, shards, cfg.aggregator, &mut ledger)?;
        let acc = match validation {
            Some(v) => EnsembleEval::new(&broadcast.ensemble, v)?.accuracy(&spec)?,
            None => 0.0,
        };
        let m0 = RoundMetrics {
            round: 0,
            val_accuracy: acc,
            cum_up_bytes: 0,
            cum_down_bytes: 0,
        };
        (spec, vec![m0])
    };

    let unchanged = uploaded.iter().zip(&prints).all(|(m, p)| &m.params.fingerprint() == p)
        && broadcast
            .ensemble
            .iter()
            .zip(&ship_prints)
            .all(|(m, p)| &m.params.fingerprint() == p);
    if !unchanged {
        return Err(Error::InvalidArgument("client models changed after upload".into()));
    }
    let global = GlobalModel::new(broadcast.ensemble.clone(), aggregator)?;
    Ok(FensRun {
        uploaded,
        broadcast,
        global,
        metrics,
        ledger,
    })
}
