//! Running a configured experiment and writing its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fens_core::data::{gen_synthetic, load_csv, Dataset, PartitionSpec};
use fens_core::fedalgos::{model_accuracy, FedConfig, RoundMetrics};
use fens_core::fens::{
    distill, ledger_report, local_only_accuracy, phase1, run_fens, run_fl_baseline, FensConfig,
    FensRun, LedgerReport, Scenario,
};
use fens_core::ledger::{CommLedger, Phase};
use fens_core::models::io::{mlp_descriptor, save_model, write_aggregator};
use fens_core::models::LocalModel;
use fens_core::quantize::{payload_bytes, write_quantized};
use fens_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Protocol};
use crate::error::{CliError, CliResult};

pub const METRICS_VERSION: &str = "# fens-metrics v1";
pub const METRICS_HEADER: &str = "round,algorithm,alpha,seed,val_accuracy,cum_up_bytes,cum_down_bytes";

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub algorithm: String,
    pub alpha: f64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub cum_up_bytes: u64,
    pub cum_down_bytes: u64,
}

impl MetricsRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{}",
            self.round,
            self.algorithm,
            self.alpha,
            self.seed,
            self.val_accuracy,
            self.cum_up_bytes,
            self.cum_down_bytes
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_VERSION}\n{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    pub bytes_per_client: f64,
    pub up_bytes_per_client: f64,
    pub down_bytes_per_client: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub algorithm: String,
    pub alpha: f64,
    pub clients: usize,
    pub seeds: Vec<SeedResult>,
    pub accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub accuracy_std: f64,
    pub bytes_per_client: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<LedgerReport>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Data for one seed: generated or loaded, partitioned, and split.
pub fn build_scenario(cfg: &ExperimentConfig, seed: u64) -> CliResult<Scenario> {
    let spec = PartitionSpec {
        alpha: cfg.alpha,
        num_clients: cfg.clients,
        seed,
    };
    let sc = match &cfg.data {
        DataSource::Synthetic {
            classes,
            dim,
            per_class,
            holdout_per_class,
            separation,
        } => Scenario::synthetic(*classes, *dim, *per_class, *holdout_per_class, *separation, &spec, seed)?,
        DataSource::Csv { train, holdout, .. } => {
            let train = load_csv(train).map_err(|e| CliError::Runtime(format!("{}: {e}", train.display())))?;
            let hold = load_csv(holdout).map_err(|e| CliError::Runtime(format!("{}: {e}", holdout.display())))?;
            if train.num_classes != hold.num_classes || train.dim() != hold.dim() {
                return Err(CliError::Runtime("train and holdout csv disagree on shape".into()));
            }
            Scenario::from_data(train, &hold, &spec)?
        }
    };
    Ok(sc)
}

/// Unlabeled server-side features for distillation.
pub fn auxiliary_features(cfg: &ExperimentConfig, seed: u64) -> CliResult<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            dim,
            separation,
            ..
        } => Ok(gen_synthetic(
            *classes,
            *dim,
            cfg.aux_per_class,
            *separation,
            derive_seed(seed, "aux", 0),
        )?),
        DataSource::Csv { aux: Some(p), .. } => {
            load_csv(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        }
        DataSource::Csv { aux: None, .. } => Err(CliError::config("data.aux", "distillation needs an auxiliary csv")),
    }
}

fn fens_cfg(cfg: &ExperimentConfig, seed: u64) -> FensConfig {
    FensConfig {
        seed,
        ..cfg.fens.clone()
    }
}

pub fn algorithm_label(cfg: &ExperimentConfig) -> String {
    match cfg.protocol {
        Protocol::Fens => format!("fens_{}", cfg.fens.aggregator),
        Protocol::Fl => cfg.fl.algorithm.to_string(),
        Protocol::OflOneRound => format!("one_round_{}", cfg.fl.algorithm),
        Protocol::LocalOnly => "local_only".into(),
    }
}

/// What one seed produced.
pub struct SeedOutput {
    pub rows: Vec<MetricsRow>,
    pub result: SeedResult,
    pub ledger: CommLedger,
    pub report: Option<LedgerReport>,
}

fn rows_from(
    metrics: &[RoundMetrics],
    label: &str,
    alpha: f64,
    seed: u64,
    base_up: u64,
    base_down: u64,
) -> Vec<MetricsRow> {
    metrics
        .iter()
        .map(|m| MetricsRow {
            round: m.round,
            algorithm: label.to_string(),
            alpha,
            seed,
            val_accuracy: m.val_accuracy,
            cum_up_bytes: base_up + m.cum_up_bytes,
            cum_down_bytes: base_down + m.cum_down_bytes,
        })
        .collect()
}

fn seed_result(seed: u64, acc: f64, ledger: &CommLedger) -> SeedResult {
    let n = ledger.num_clients().max(1) as f64;
    SeedResult {
        seed,
        test_accuracy: acc,
        bytes_per_client: ledger.mean_client_total(),
        up_bytes_per_client: ledger.up_total() as f64 / n,
        down_bytes_per_client: ledger.down_total() as f64 / n,
    }
}

fn save_fens_artifacts(dir: &Path, run: &FensRun) -> CliResult<()> {
    for (i, m) in run.uploaded.iter().enumerate() {
        let p = dir.join("models").join(format!("client-{i}.fens"));
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        save_model(&p, m)?;
    }
    if let Some(q) = &run.broadcast.quantized {
        let p = dir.join("ensemble.fensq");
        let f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&(q.len() as u32).to_le_bytes()).map_err(|e| CliError::io(&p, e))?;
        for (m, qp) in run.uploaded.iter().zip(q) {
            write_quantized(&mut w, &mlp_descriptor(&m.arch), qp)?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))?;
    }
    let p = dir.join("aggregator.fens");
    let mut buf = Vec::new();
    write_aggregator(&mut buf, &run.global.aggregator)?;
    write_file(&p, buf)
}

/// Execute the configured protocol for one seed, writing per-seed artifacts
/// under `dir` when given.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> CliResult<SeedOutput> {
    let sc = build_scenario(cfg, seed)?;
    let label = algorithm_label(cfg);
    let arch = cfg.fens.local_arch(sc.dim(), sc.num_classes());
    let model_bytes = fens_core::models::mlp_param_count(&arch) as u64 * fens_core::quantize::FP32_BYTES;
    let (rows, acc, ledger, report) = match cfg.protocol {
        Protocol::Fens => {
            let fc = fens_cfg(cfg, seed);
            let run = run_fens(&sc.shards, &fc, Some(&sc.validation))?;
            let l = &run.ledger;
            let base_up = l.phase_total(Phase::Phase1Up) + l.phase_total(Phase::StaticUp);
            let base_down = l.phase_total(Phase::Phase1Down) + l.phase_total(Phase::InitDown);
            let rows = rows_from(&run.metrics, &label, cfg.alpha, seed, base_up, base_down);
            let acc = run.global.accuracy(&sc.test)?;
            if let Some(d) = dir {
                save_fens_artifacts(d, &run)?;
            }
            let report = ledger_report(&run.ledger, model_bytes, cfg.report_fl_rounds);
            (rows, acc, run.ledger, Some(report))
        }
        Protocol::Fl | Protocol::OflOneRound => {
            let fl = fl_cfg(cfg, seed);
            let mut ledger = CommLedger::new(sc.num_clients());
            let out = run_fl_baseline(&sc.shards, &arch, &fl, Some(&sc.validation), &mut ledger)?;
            let acc = model_accuracy(&arch, &out.params, &sc.test)?;
            if let Some(d) = dir {
                let p = d.join("global.fens");
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                }
                save_model(&p, &LocalModel::from_params(arch.clone(), out.params.clone())?)?;
            }
            (rows_from(&out.metrics, &label, cfg.alpha, seed, 0, 0), acc, ledger, None)
        }
        Protocol::LocalOnly => {
            let fc = fens_cfg(cfg, seed);
            // nothing leaves the clients, so the upload entries are discarded
            let mut scratch = CommLedger::new(sc.num_clients());
            let models = phase1(&sc.shards, &fc, &mut scratch)?;
            let val = local_only_accuracy(&models, &sc.validation)?;
            let acc = local_only_accuracy(&models, &sc.test)?;
            let row = MetricsRow {
                round: 0,
                algorithm: label,
                alpha: cfg.alpha,
                seed,
                val_accuracy: val,
                cum_up_bytes: 0,
                cum_down_bytes: 0,
            };
            (vec![row], acc, CommLedger::new(sc.num_clients()), None)
        }
    };
    if let Some(d) = dir {
        write_file(&d.join("ledger.json"), ledger.to_json())?;
    }
    Ok(SeedOutput {
        rows,
        result: seed_result(seed, acc, &ledger),
        ledger,
        report,
    })
}

fn fl_cfg(cfg: &ExperimentConfig, seed: u64) -> FedConfig {
    let base = if cfg.protocol == Protocol::OflOneRound {
        cfg.one_round_fl()
    } else {
        cfg.fl.clone()
    };
    FedConfig { seed, ..base }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Run every seed in order and write config snapshot, metrics CSV, summary
/// JSON and per-seed artifacts under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> CliResult<Summary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_file(&cfg.out.join("config.txt"), cfg.serialize())?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut report = None;
    for &seed in &cfg.seeds {
        log(&format!("{} seed {seed}", cfg.protocol.as_str()));
        let out = run_seed(cfg, seed, Some(&seed_dir(&cfg.out, seed)))?;
        log(&format!("  test accuracy {:.4}", out.result.test_accuracy));
        rows.extend(out.rows);
        results.push(out.result);
        if report.is_none() {
            report = out.report;
        }
    }
    write_file(&cfg.out.join("metrics.csv"), metrics_csv(&rows))?;
    let accs: Vec<f64> = results.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let bytes = results.iter().map(|r| r.bytes_per_client).sum::<f64>() / results.len() as f64;
    let summary = Summary {
        protocol: cfg.protocol.as_str().into(),
        algorithm: algorithm_label(cfg),
        alpha: cfg.alpha,
        clients: cfg.clients,
        seeds: results,
        accuracy_mean: mean,
        accuracy_std: std,
        bytes_per_client: bytes,
        report,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&cfg.out.join("summary.json"), json + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillResult {
    pub seed: u64,
    pub ensemble_test_accuracy: f64,
    pub student_test_accuracy: f64,
    pub ensemble_bytes: u64,
    pub student_bytes: u64,
}

/// Run FENS, then distill the global model into a single student per seed.
pub fn run_distill(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> CliResult<Vec<DistillResult>> {
    let mut cfg = cfg.clone();
    cfg.protocol = Protocol::Fens;
    cfg.validate()?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let sc = build_scenario(&cfg, seed)?;
        let run = run_fens(&sc.shards, &fens_cfg(&cfg, seed), None)?;
        let aux = auxiliary_features(&cfg, seed)?;
        let mut student_arch = vec![sc.dim()];
        student_arch.extend_from_slice(&cfg.distill_hidden);
        student_arch.push(sc.num_classes());
        let recipe = fens_core::fens::DistillRecipe {
            seed,
            ..cfg.distill.clone()
        };
        let student = distill(&run.global, &aux.features, &student_arch, &recipe, None)?;
        let r = DistillResult {
            seed,
            ensemble_test_accuracy: run.global.accuracy(&sc.test)?,
            student_test_accuracy: model_accuracy(&student.arch, &student.params, &sc.test)?,
            ensemble_bytes: run.broadcast.ensemble.iter().map(|m| payload_bytes(&m.params)).sum(),
            student_bytes: payload_bytes(&student.params),
        };
        log(&format!(
            "seed {seed}: ensemble {:.4} student {:.4}",
            r.ensemble_test_accuracy, r.student_test_accuracy
        ));
        let dir = seed_dir(&cfg.out, seed);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        save_model(dir.join("student.fens"), &student)?;
        results.push(r);
    }
    let json = serde_json::to_string_pretty(&results).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&cfg.out.join("distill.json"), json + "\n")?;
    Ok(results)
}
