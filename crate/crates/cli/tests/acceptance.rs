//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fens_cli::gradcheck::{check_component, Component, TOLERANCE};
use fens_core::data::{gen_synthetic, PartitionSpec};
use fens_core::fedalgos::{
    model_accuracy, stc_compress, FedConfig, FlAlgorithm, LocalRecipe, LocalWork, StcConfig,
};
use fens_core::fens::{
    central_train, distill, fens_closed_form, ledger_report, run_fens, run_fl_baseline, CostModel,
    DistillRecipe, EnsembleEval, FensConfig, FensRun, Scenario,
};
use fens_core::ledger::{CommLedger, Phase};
use fens_core::models::{
    agg_vote, competency_from_votes, init_mlp_params, uniform_prior, AggregatorKind, AggregatorSpec,
    CompetencyMatrix, COMPETENCY_EPS,
};
use fens_core::numerics::{ParamSet, Tensor};
use fens_core::quantize::{dequantize, payload_bytes, quantize_params, quantize_tensor};
use fens_core::rng::stream;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- shared runs

/// 10-class blobs, d=20, 500/class, separation 3, M=10, alpha=0.05.
fn heterogeneous(seed: u64) -> Scenario {
    let spec = PartitionSpec {
        alpha: 0.05,
        num_clients: 10,
        seed,
    };
    Scenario::synthetic(10, 20, 500, 200, 3.0, &spec, seed).unwrap()
}

fn fens_cfg(seed: u64, quantize: bool) -> FensConfig {
    let mut c = FensConfig {
        seed,
        quantize,
        ..FensConfig::default()
    };
    c.agg_fl.rounds = 200;
    c
}

struct SeedRuns {
    scenario: Scenario,
    fp32: FensRun,
    int8: FensRun,
}

fn shared_runs() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&s| {
            let scenario = heterogeneous(s);
            let fp32 = run_fens(&scenario.shards, &fens_cfg(s, false), Some(&scenario.validation)).unwrap();
            let int8 = run_fens(&scenario.shards, &fens_cfg(s, true), Some(&scenario.validation)).unwrap();
            SeedRuns { scenario, fp32, int8 }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criteria

fn gradient_fidelity() -> Outcome {
    let mut worst = Vec::new();
    for c in Component::ALL {
        worst.push((c, check_component(c, 20, 17).unwrap()));
    }
    let pass = worst.iter().all(|&(_, e)| e < TOLERANCE);
    let detail = worst
        .iter()
        .map(|(c, e)| format!("{c}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(pass, detail)
}

/// Expected utility by enumeration with probabilities in product form; the
/// first decision within a relative 1e-9 of the best wins.
fn brute_force_vote(votes: &[usize], comp: &[CompetencyMatrix], prior: &[f64]) -> usize {
    let c = prior.len();
    let joint: Vec<f64> = (0..c)
        .map(|r| prior[r] * votes.iter().zip(comp).map(|(&v, p)| p.get(r, v)).product::<f64>())
        .collect();
    let z: f64 = joint.iter().sum();
    let eu: Vec<f64> = (0..c)
        .map(|a| (0..c).map(|r| if a == r { joint[r] / z } else { 0.0 }).sum())
        .collect();
    let best = eu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..c).find(|&a| best - eu[a] <= 1e-9 * best.abs()).unwrap()
}

fn voting_oracle() -> Outcome {
    let mut r = stream(31, "acceptance-vote", 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = r.random_range(1..=3);
        let c = r.random_range(2..=3);
        let comp: Vec<CompetencyMatrix> = (0..m)
            .map(|_| {
                let n = r.random_range(0..15);
                let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
                let votes: Vec<usize> = labels
                    .iter()
                    .map(|&y| if r.random_bool(0.5) { y } else { r.random_range(0..c) })
                    .collect();
                competency_from_votes(&votes, &labels, c, COMPETENCY_EPS).unwrap()
            })
            .collect();
        let votes: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
        let prior = uniform_prior(c);
        if agg_vote(&votes, &comp, &prior, None).unwrap() != brute_force_vote(&votes, &comp, &prior) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/1000 mismatches"))
}

fn one_round_fedavg(sc: &Scenario, seed: u64) -> f64 {
    let arch = vec![20, 64, 10];
    let local = LocalRecipe::default();
    let cfg = FedConfig {
        rounds: 1,
        local_work: LocalWork::Epochs(local.epochs),
        batch_size: local.batch_size,
        client_lr: local.lr,
        seed,
        ..FedConfig::default()
    };
    let mut ledger = CommLedger::new(sc.num_clients());
    let out = run_fl_baseline(&sc.shards, &arch, &cfg, None, &mut ledger).unwrap();
    model_accuracy(&arch, &out.params, &sc.test).unwrap()
}

fn heterogeneity_benefit(runs: &[SeedRuns]) -> Outcome {
    let mut nn = Vec::new();
    let mut avg = Vec::new();
    let mut ofl = Vec::new();
    for (run, &seed) in runs.iter().zip(&SEEDS) {
        let sc = &run.scenario;
        nn.push(run.fp32.global.accuracy(&sc.test).unwrap());
        let spec = AggregatorSpec::average(sc.num_clients(), sc.num_classes()).unwrap();
        avg.push(EnsembleEval::new(&run.fp32.global.ensemble, &sc.test).unwrap().accuracy(&spec).unwrap());
        ofl.push(one_round_fedavg(sc, seed));
    }
    let (n, a, o) = (mean(&nn), mean(&avg), mean(&ofl));
    outcome(
        n - a >= 0.05 && n - o >= 0.10,
        format!("nn={n:.4} average={a:.4} one_round_fedavg={o:.4}"),
    )
}

fn fl_sanity() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for &seed in &SEEDS {
        let spec = PartitionSpec {
            alpha: 1e6,
            num_clients: 8,
            seed,
        };
        let sc = Scenario::synthetic(10, 20, 500, 200, 3.0, &spec, seed).unwrap();
        let arch = vec![20, 64, 10];
        let central = central_train(&sc.train, &arch, &LocalRecipe::default(), seed).unwrap();
        let target = 0.95 * model_accuracy(&arch, &central.params, &sc.validation).unwrap();
        let cfg = FedConfig {
            algorithm: FlAlgorithm::Fedavg,
            rounds: 50,
            local_work: LocalWork::Epochs(2),
            batch_size: 32,
            client_lr: 0.05,
            seed,
            ..FedConfig::default()
        };
        let mut ledger = CommLedger::new(8);
        let out = run_fl_baseline(&sc.shards, &arch, &cfg, Some(&sc.validation), &mut ledger).unwrap();
        let reached = out.metrics.iter().find(|m| m.val_accuracy >= target).map(|m| m.round);
        pass &= reached.is_some();
        details.push(format!("seed {seed}: target {target:.3} reached at round {reached:?}"));
    }
    outcome(pass, details.join("; "))
}

fn ledger_exactness() -> Outcome {
    let spec = PartitionSpec {
        alpha: 0.3,
        num_clients: 4,
        seed: 9,
    };
    let sc = Scenario::synthetic(3, 5, 40, 20, 3.0, &spec, 9).unwrap();
    let mut mismatches = 0;
    let mut checked = 0;
    for kind in AggregatorKind::ALL {
        for quantize in [false, true] {
            for rounds in [0usize, 2, 5] {
                for init_down in [false, true] {
                    let mut cfg = FensConfig {
                        local_hidden: vec![8],
                        quantize,
                        aggregator: kind,
                        nn_hidden: 8,
                        moe_hidden: 4,
                        count_init_download: init_down,
                        seed: 4,
                        ..FensConfig::default()
                    };
                    cfg.local.epochs = 2;
                    cfg.agg_fl.rounds = rounds;
                    let run = run_fens(&sc.shards, &cfg, None).unwrap();
                    // closed form from shapes alone
                    let arch = cfg.local_arch(5, 3);
                    let scalars = fens_core::models::mlp_param_count(&arch) as u64;
                    let tensors = 2 * (arch.len() as u64 - 1);
                    let up = 4 * scalars;
                    let ship = if quantize { scalars + 4 * tensors } else { 4 * scalars };
                    let m = sc.num_clients() as u64;
                    let a = if kind.is_trainable() {
                        4 * run.global.aggregator.num_params() as u64
                    } else {
                        0
                    };
                    let r = if kind.is_trainable() { rounds as u64 } else { 0 };
                    let stat = match kind {
                        AggregatorKind::WeightedAverage => 3 * 4,
                        AggregatorKind::Vote => m * 9 * 4,
                        _ => 0,
                    };
                    let expected = fens_closed_form(up, &vec![ship; m as usize], r, a, stat)
                        + if init_down { up } else { 0 };
                    for i in 0..sc.num_clients() {
                        checked += 1;
                        if run.ledger.client_total(i) != expected {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }

    // reference shapes: M=20, C=10, k=40, 500 rounds, INT8 broadcast;
    // local model size from the 18.85 MiB single-model footprint
    let t0 = Instant::now();
    let nn = AggregatorSpec::nn(20, 10, 40, &mut stream(0, "acceptance", 0)).unwrap();
    let model_bytes = (18.85 * 1024.0 * 1024.0) as u64;
    let cost = CostModel {
        model_bytes,
        shipped_bytes: model_bytes / 4,
        num_clients: 20,
        agg_bytes: 4 * nn.num_params() as u64,
        rounds: 500,
        static_bytes: 0,
    };
    let with_init = cost.ratio_with_init_download();
    let upload_only = cost.ratio_upload_only();
    let analytic = t0.elapsed().as_secs_f64();

    // the same ratio read off a ledger built at those shapes
    let mut l = CommLedger::new(20);
    for i in 0..20 {
        l.record(i, Phase::Phase1Up, model_bytes);
        l.record(i, Phase::Phase1Down, 20 * (model_bytes / 4));
        l.record(i, Phase::Phase2Up, 500 * cost.agg_bytes);
        l.record(i, Phase::Phase2Down, 500 * cost.agg_bytes);
    }
    let rep = ledger_report(&l, model_bytes, 100);
    let consistent = (rep.fens_over_ofl_with_init - with_init).abs() < 1e-12;

    outcome(
        mismatches == 0 && nn.num_params() == 8400 && (3.0..=6.0).contains(&with_init) && consistent && analytic < 1.0,
        format!(
            "{checked} client totals, {mismatches} off closed form; ratio {with_init:.3} counting the initial model download ({upload_only:.3} counting the upload alone)"
        ),
    )
}

fn quantization(runs: &[SeedRuns]) -> Outcome {
    let mut r = stream(5, "acceptance-quant", 0);
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..100u64 {
        let hidden = r.random_range(4..64usize);
        let arch = [r.random_range(2..30usize), hidden, r.random_range(2..12usize)];
        let mut p = init_mlp_params(&arch, &mut stream(5, "acceptance-model", i)).unwrap();
        let spread = r.random_range(0.01f32..10.0);
        p = p.map_values(|v| v * spread);
        let q = quantize_params(&p).unwrap();
        let back = dequantize(&q);
        for ((name, t), (_, qt)) in p.iter().zip(q.entries.iter()) {
            let d = back.get(name).unwrap();
            for (&x, &y) in t.data().iter().zip(d.data()) {
                // one f32 rounding of the product is allowed on top of scale/2
                let bound = qt.scale as f64 / 2.0 + f32::EPSILON as f64 * (x as f64).abs();
                worst_excess = worst_excess.max((x as f64 - y as f64).abs() - bound);
            }
        }
    }
    let mut ratios = Vec::new();
    for n in [1000usize, 1001, 4096, 50_000, 1_000_000] {
        let t = Tensor::vector((0..n).map(|i| (i as f32 * 0.37).sin()).collect());
        let dense = payload_bytes(&ParamSet::new().with("w", t.clone()));
        let q = quantize_tensor(&t).unwrap();
        let qs = fens_core::quantize::QuantizedParamSet {
            entries: [("w".to_string(), q)].into_iter().collect(),
        };
        ratios.push(dense as f64 / payload_bytes(&qs) as f64);
    }
    let ratio_ok = ratios.iter().all(|r| (3.9..=4.0).contains(r));
    let diffs: Vec<f64> = runs
        .iter()
        .map(|s| {
            let a = s.fp32.global.accuracy(&s.scenario.test).unwrap();
            let b = s.int8.global.accuracy(&s.scenario.test).unwrap();
            (a - b).abs()
        })
        .collect();
    let worst_diff = diffs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst_excess <= 0.0 && ratio_ok && worst_diff <= 0.02,
        format!(
            "roundtrip within scale/2: {}; payload ratios {:.3}..{:.3}; accuracy gap fp32 vs int8 max {:.4}",
            worst_excess <= 0.0,
            ratios.iter().copied().fold(f64::INFINITY, f64::min),
            ratios.iter().copied().fold(0.0, f64::max),
            worst_diff
        ),
    )
}

fn reductions(runs: &[SeedRuns]) -> Outcome {
    // FedProx(mu=0) against FedAvg
    let sc = &runs[0].scenario;
    let arch = vec![20, 64, 10];
    let base = FedConfig {
        rounds: 3,
        local_work: LocalWork::Epochs(1),
        seed: 8,
        ..FedConfig::default()
    };
    let prox = FedConfig {
        algorithm: FlAlgorithm::Fedprox,
        prox_mu: 0.0,
        ..base.clone()
    };
    let mut la = CommLedger::new(sc.num_clients());
    let mut lb = CommLedger::new(sc.num_clients());
    let a = run_fl_baseline(&sc.shards, &arch, &base, None, &mut la).unwrap();
    let b = run_fl_baseline(&sc.shards, &arch, &prox, None, &mut lb).unwrap();
    let prox_ok = a.params.fingerprint() == b.params.fingerprint() && la == lb;

    // trainable aggregators at initialization against plain averaging
    let mut init_ok = true;
    for run in runs {
        let ens = &run.fp32.global.ensemble;
        let eval = EnsembleEval::new(ens, &run.scenario.validation).unwrap();
        let (m, c) = (ens.len(), 10);
        let reference = AggregatorSpec::average(m, c).unwrap().predict(&eval.features, &eval.stacked).unwrap();
        let mut r = stream(3, "acceptance-init", 0);
        for spec in [
            AggregatorSpec::nn(m, c, 40, &mut r).unwrap(),
            AggregatorSpec::per_class(m, c).unwrap(),
            AggregatorSpec::linear(m, c).unwrap(),
        ] {
            init_ok &= spec.predict(&eval.features, &eval.stacked).unwrap() == reference;
        }
    }

    // STC wire size
    let delta = a.params.sub(&init_mlp_params(&arch, &mut stream(0, "x", 0)).unwrap()).unwrap();
    let c = stc_compress(&delta, &StcConfig::default()).unwrap();
    let stc_ratio = payload_bytes(&delta) as f64 / payload_bytes(&c) as f64;
    outcome(
        prox_ok && init_ok && stc_ratio == 4.0,
        format!("fedprox(mu=0)==fedavg: {prox_ok}; init==average: {init_ok}; stc ratio {stc_ratio}"),
    )
}

fn distillation(runs: &[SeedRuns]) -> Outcome {
    let mut gaps = Vec::new();
    for (run, &seed) in runs.iter().zip(&SEEDS) {
        // 5000 unlabeled samples from the same distribution
        let aux = gen_synthetic(10, 20, 500, 3.0, 10_000 + seed).unwrap().features;
        let recipe = DistillRecipe {
            seed,
            ..DistillRecipe::default()
        };
        let student = distill(&run.fp32.global, &aux, &[20, 64, 10], &recipe, None).unwrap();
        let teacher = run.fp32.global.accuracy(&run.scenario.test).unwrap();
        let st = model_accuracy(&student.arch, &student.params, &run.scenario.test).unwrap();
        gaps.push(teacher - st);
    }
    let worst = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(
        worst <= 0.05,
        format!("ensemble minus student per seed: {}", gaps.iter().map(|g| format!("{g:+.4}")).collect::<Vec<_>>().join(", ")),
    )
}

fn run_cli(config: &Path, out: &Path, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let status = Command::new(env!("CARGO_BIN_EXE_fens"))
        .args(["--quiet", "--threads", &threads.to_string(), "run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();
    let mut ledgers = Vec::new();
    for seed in [0, 1] {
        ledgers.extend(std::fs::read(out.join(format!("seed-{seed}/ledger.json"))).unwrap());
    }
    (metrics, ledgers)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        (
            "fens",
            "protocol = fens\nseeds = 0,1\ndata.per_class = 100\nfens.quantize = true\nagg.rounds = 20\nlocal.epochs = 5\n",
        ),
        (
            "fl",
            "protocol = fl\nseeds = 0,1\ndata.per_class = 100\nfl.rounds = 5\nfl.participation = 0.5\nfl.algorithm = fedadam\nfl.server_lr = 0.01\n",
        ),
    ];
    let mut pass = true;
    for (name, text) in configs {
        let cfg = dir.path().join(format!("{name}.txt"));
        std::fs::write(&cfg, text).unwrap();
        let runs: Vec<_> = [1, 8, 1, 8]
            .iter()
            .enumerate()
            .map(|(i, &t)| run_cli(&cfg, &dir.path().join(format!("{name}-{i}")), t))
            .collect();
        pass &= runs.windows(2).all(|w| w[0] == w[1]);
    }
    outcome(pass, "metrics.csv and ledger.json byte-identical across reruns at 1 and 8 threads")
}

fn main() {
    let names = [
        "gradient fidelity",
        "voting oracle",
        "heterogeneity benefit",
        "fl sanity",
        "communication ledger",
        "quantization",
        "reductions",
        "distillation",
        "determinism",
    ];
    let t0 = Instant::now();
    let runs = shared_runs();
    eprintln!("shared FENS runs: {:.1}s", t0.elapsed().as_secs_f64());
    let checks: Vec<Box<dyn Fn() -> Outcome + '_>> = vec![
        Box::new(gradient_fidelity),
        Box::new(voting_oracle),
        Box::new(|| heterogeneity_benefit(&runs)),
        Box::new(fl_sanity),
        Box::new(ledger_exactness),
        Box::new(|| quantization(&runs)),
        Box::new(|| reductions(&runs)),
        Box::new(|| distillation(&runs)),
        Box::new(determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in names.iter().zip(checks).enumerate() {
        let t = Instant::now();
        let o = check();
        failed += !o.pass as usize;
        println!(
            "criterion {} ({name}): {} [{:.1}s] {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("{} of {} criteria passed", names.len() - failed, names.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
