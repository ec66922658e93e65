//! Flat `dotted.key = value` experiment configuration.
//!
//! Canonical form lists every key, sorted, one per line, so that
//! `parse(serialize(parse(x))) == parse(x)`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fens_core::data::PartitionSpec;
use fens_core::fedalgos::{FedConfig, FlAlgorithm, LocalRecipe, LocalWork};
use fens_core::fens::{default_agg_fl, DistillRecipe, FensConfig};
use fens_core::models::AggregatorKind;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Fens,
    Fl,
    OflOneRound,
    LocalOnly,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Self::Fens, Self::Fl, Self::OflOneRound, Self::LocalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fens => "fens",
            Self::Fl => "fl",
            Self::OflOneRound => "ofl_one_round",
            Self::LocalOnly => "local_only",
        }
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}; expected one of fens, fl, ofl_one_round, local_only"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        holdout_per_class: usize,
        separation: f64,
    },
    Csv {
        train: PathBuf,
        holdout: PathBuf,
        /// Unlabeled features for distillation; labels in the file are ignored.
        aux: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataSource,
    pub alpha: f64,
    pub clients: usize,
    pub fens: FensConfig,
    pub fl: FedConfig,
    pub distill: DistillRecipe,
    pub distill_hidden: Vec<usize>,
    /// Unlabeled samples per class for distillation.
    pub aux_per_class: usize,
    /// Rounds of iterative FL to compare FENS against in reports.
    pub report_fl_rounds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Fens,
            seeds: vec![0],
            out: PathBuf::from("runs/default"),
            data: DataSource::Synthetic {
                classes: 10,
                dim: 20,
                per_class: 500,
                holdout_per_class: 200,
                separation: 3.0,
            },
            alpha: 0.05,
            clients: 10,
            fens: FensConfig {
                agg_fl: FedConfig {
                    rounds: 200,
                    ..default_agg_fl()
                },
                ..FensConfig::default()
            },
            fl: FedConfig {
                rounds: 50,
                local_work: LocalWork::Epochs(2),
                ..FedConfig::default()
            },
            distill: DistillRecipe::default(),
            distill_hidden: vec![64],
            aux_per_class: 500,
            report_fl_rounds: 100,
        }
    }
}

fn val<T: FromStr>(key: &str, v: &str) -> CliResult<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| CliError::config(key, format!("cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| val(key, s.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Split text into `key -> value`, rejecting duplicates and malformed lines.
pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}", n + 1), "expected `key = value`"))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::config(k, "given more than once"));
        }
    }
    Ok(out)
}

fn set_fed(cfg: &mut FedConfig, key: &str, field: &str, v: &str) -> CliResult<bool> {
    match field {
        "algorithm" => cfg.algorithm = FlAlgorithm::from_str(v).map_err(|e| CliError::config(key, e.to_string()))?,
        "rounds" => cfg.rounds = val(key, v)?,
        "local_steps" => cfg.local_work = LocalWork::Steps(val(key, v)?),
        "local_epochs" => cfg.local_work = LocalWork::Epochs(val(key, v)?),
        "batch_size" => cfg.batch_size = val(key, v)?,
        "client_lr" => cfg.client_lr = val(key, v)?,
        "server_lr" => cfg.server_lr = val(key, v)?,
        "participation" => cfg.participation = val(key, v)?,
        "prox_mu" => cfg.prox_mu = val(key, v)?,
        "beta1" => cfg.beta1 = val(key, v)?,
        "beta2" => cfg.beta2 = val(key, v)?,
        "tau" => cfg.tau = val(key, v)?,
        "weighted_mean" => cfg.weighted_mean = val(key, v)?,
        "stc_sparsity" => cfg.stc.sparsity = val(key, v)?,
        "stc_bits" => cfg.stc.bits = val(key, v)?,
        "stc_strict" => cfg.stc.strict_indices = val(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn put_fed(out: &mut BTreeMap<String, String>, prefix: &str, cfg: &FedConfig) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("{prefix}.{k}"), v);
    };
    put("algorithm", cfg.algorithm.to_string());
    put("rounds", cfg.rounds.to_string());
    match cfg.local_work {
        LocalWork::Steps(k) => put("local_steps", k.to_string()),
        LocalWork::Epochs(e) => put("local_epochs", e.to_string()),
    }
    put("batch_size", cfg.batch_size.to_string());
    put("client_lr", cfg.client_lr.to_string());
    put("server_lr", cfg.server_lr.to_string());
    put("participation", cfg.participation.to_string());
    put("prox_mu", cfg.prox_mu.to_string());
    put("beta1", cfg.beta1.to_string());
    put("beta2", cfg.beta2.to_string());
    put("tau", cfg.tau.to_string());
    put("weighted_mean", cfg.weighted_mean.to_string());
    put("stc_sparsity", cfg.stc.sparsity.to_string());
    put("stc_bits", cfg.stc.bits.to_string());
    put("stc_strict", cfg.stc.strict_indices.to_string());
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", p.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> CliResult<Self> {
        let mut c = Self::default();
        // data.source decides the shape of the data section, so read it first
        let source = pairs.get("data.source").map(String::as_str).unwrap_or("synthetic");
        c.data = match source {
            "synthetic" => c.data,
            "csv" => DataSource::Csv {
                train: PathBuf::new(),
                holdout: PathBuf::new(),
                aux: None,
            },
            other => return Err(CliError::config("data.source", format!("unknown source {other:?}"))),
        };
        for (k, v) in pairs {
            let v = v.as_str();
            let handled = match k.as_str() {
                "protocol" => {
                    c.protocol = v.parse().map_err(|e: String| CliError::config(k, e))?;
                    true
                }
                "seeds" => {
                    c.seeds = list(k, v)?;
                    true
                }
                "out" => {
                    c.out = PathBuf::from(v);
                    true
                }
                "data.source" => true,
                "partition.alpha" => {
                    c.alpha = val(k, v)?;
                    true
                }
                "partition.clients" => {
                    c.clients = val(k, v)?;
                    true
                }
                "report.fl_rounds" => {
                    c.report_fl_rounds = val(k, v)?;
                    true
                }
                key if key.starts_with("data.") => c.set_data(k, &key[5..], v)?,
                key if key.starts_with("local.") => c.set_local(k, &key[6..], v)?,
                key if key.starts_with("fens.") => c.set_fens(k, &key[5..], v)?,
                key if key.starts_with("agg.") => set_fed(&mut c.fens.agg_fl, k, &key[4..], v)?,
                key if key.starts_with("fl.") => set_fed(&mut c.fl, k, &key[3..], v)?,
                key if key.starts_with("distill.") => c.set_distill(k, &key[8..], v)?,
                _ => false,
            };
            if !handled {
                return Err(CliError::config(k, "unknown key"));
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn set_data(&mut self, key: &str, field: &str, v: &str) -> CliResult<bool> {
        match &mut self.data {
            DataSource::Synthetic {
                classes,
                dim,
                per_class,
                holdout_per_class,
                separation,
            } => match field {
                "classes" => *classes = val(key, v)?,
                "dim" => *dim = val(key, v)?,
                "per_class" => *per_class = val(key, v)?,
                "holdout_per_class" => *holdout_per_class = val(key, v)?,
                "separation" => *separation = val(key, v)?,
                "train" | "holdout" | "aux" => {
                    return Err(CliError::config(key, "only valid with data.source = csv"))
                }
                _ => return Ok(false),
            },
            DataSource::Csv { train, holdout, aux } => match field {
                "train" => *train = PathBuf::from(v),
                "holdout" => *holdout = PathBuf::from(v),
                "aux" => *aux = (!v.is_empty()).then(|| PathBuf::from(v)),
                "classes" | "dim" | "per_class" | "holdout_per_class" | "separation" => {
                    return Err(CliError::config(key, "only valid with data.source = synthetic"))
                }
                _ => return Ok(false),
            },
        }
        Ok(true)
    }

    fn set_local(&mut self, key: &str, field: &str, v: &str) -> CliResult<bool> {
        let l: &mut LocalRecipe = &mut self.fens.local;
        match field {
            "hidden" => self.fens.local_hidden = list(key, v)?,
            "epochs" => l.epochs = val(key, v)?,
            "lr" => l.lr = val(key, v)?,
            "batch_size" => l.batch_size = val(key, v)?,
            "cosine" => l.cosine = val(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_fens(&mut self, key: &str, field: &str, v: &str) -> CliResult<bool> {
        let f = &mut self.fens;
        match field {
            "quantize" => f.quantize = val(key, v)?,
            "aggregator" => {
                f.aggregator = AggregatorKind::from_str(v).map_err(|e| CliError::config(key, e.to_string()))?
            }
            "nn_hidden" => f.nn_hidden = val(key, v)?,
            "moe_hidden" => f.moe_hidden = val(key, v)?,
            "count_init_download" => f.count_init_download = val(key, v)?,
            "cache_logits" => f.cache_logits = val(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_distill(&mut self, key: &str, field: &str, v: &str) -> CliResult<bool> {
        let d = &mut self.distill;
        match field {
            "epochs" => d.epochs = val(key, v)?,
            "lr" => d.lr = val(key, v)?,
            "batch_size" => d.batch_size = val(key, v)?,
            "temperature" => d.temperature = val(key, v)?,
            "cosine" => d.cosine = val(key, v)?,
            "hidden" => self.distill_hidden = list(key, v)?,
            "aux_per_class" => self.aux_per_class = val(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field, keyed as in the config file.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("protocol", self.protocol.as_str().into());
        put("seeds", join(&self.seeds));
        put("out", self.out.display().to_string());
        match &self.data {
            DataSource::Synthetic {
                classes,
                dim,
                per_class,
                holdout_per_class,
                separation,
            } => {
                put("data.source", "synthetic".into());
                put("data.classes", classes.to_string());
                put("data.dim", dim.to_string());
                put("data.per_class", per_class.to_string());
                put("data.holdout_per_class", holdout_per_class.to_string());
                put("data.separation", separation.to_string());
            }
            DataSource::Csv { train, holdout, aux } => {
                put("data.source", "csv".into());
                put("data.train", train.display().to_string());
                put("data.holdout", holdout.display().to_string());
                put("data.aux", aux.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
            }
        }
        put("partition.alpha", self.alpha.to_string());
        put("partition.clients", self.clients.to_string());
        put("report.fl_rounds", self.report_fl_rounds.to_string());
        let f = &self.fens;
        put("local.hidden", join(&f.local_hidden));
        put("local.epochs", f.local.epochs.to_string());
        put("local.lr", f.local.lr.to_string());
        put("local.batch_size", f.local.batch_size.to_string());
        put("local.cosine", f.local.cosine.to_string());
        put("fens.quantize", f.quantize.to_string());
        put("fens.aggregator", f.aggregator.to_string());
        put("fens.nn_hidden", f.nn_hidden.to_string());
        put("fens.moe_hidden", f.moe_hidden.to_string());
        put("fens.count_init_download", f.count_init_download.to_string());
        put("fens.cache_logits", f.cache_logits.to_string());
        let d = &self.distill;
        put("distill.epochs", d.epochs.to_string());
        put("distill.lr", d.lr.to_string());
        put("distill.batch_size", d.batch_size.to_string());
        put("distill.temperature", d.temperature.to_string());
        put("distill.cosine", d.cosine.to_string());
        put("distill.hidden", join(&self.distill_hidden));
        put("distill.aux_per_class", self.aux_per_class.to_string());
        put_fed(&mut m, "agg", &self.fens.agg_fl);
        put_fed(&mut m, "fl", &self.fl);
        m
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn serialize(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, e: fens_core::Error| CliError::config(field, e.to_string());
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed required"));
        }
        if let DataSource::Synthetic {
            classes,
            dim,
            per_class,
            holdout_per_class,
            separation,
        } = &self.data
        {
            if *classes < 2 {
                return Err(CliError::config("data.classes", "must be >= 2"));
            }
            if *dim == 0 {
                return Err(CliError::config("data.dim", "must be >= 1"));
            }
            if *per_class == 0 {
                return Err(CliError::config("data.per_class", "must be >= 1"));
            }
            if *holdout_per_class == 0 {
                return Err(CliError::config("data.holdout_per_class", "must be >= 1"));
            }
            if !(*separation >= 0.0) {
                return Err(CliError::config("data.separation", "must be >= 0"));
            }
        }
        if let DataSource::Csv { train, holdout, .. } = &self.data {
            if train.as_os_str().is_empty() {
                return Err(CliError::config("data.train", "path required"));
            }
            if holdout.as_os_str().is_empty() {
                return Err(CliError::config("data.holdout", "path required"));
            }
        }
        PartitionSpec {
            alpha: self.alpha,
            num_clients: self.clients,
            seed: 0,
        }
        .validate()
        .map_err(|e| bad(if self.clients == 0 { "partition.clients" } else { "partition.alpha" }, e))?;
        self.fens.local.validate().map_err(|e| bad("local", e))?;
        if self.fens.local_hidden.contains(&0) {
            return Err(CliError::config("local.hidden", "widths must be >= 1"));
        }
        match self.protocol {
            Protocol::Fens => {
                self.fens.validate().map_err(|e| bad("fens", e))?;
                self.fens.agg_fl.validate_schedule().map_err(|e| bad("agg", e))?;
                self.distill.validate().map_err(|e| bad("distill", e))?;
            }
            Protocol::Fl | Protocol::OflOneRound => {
                if self.protocol == Protocol::Fl {
                    self.fl.validate().map_err(|e| bad("fl", e))?;
                } else {
                    self.fl.validate_schedule().map_err(|e| bad("fl", e))?;
                }
            }
            Protocol::LocalOnly => {}
        }
        Ok(())
    }

    /// Recipe for the one-round baseline: a single round, everything else
    /// from the `fl` section.
    pub fn one_round_fl(&self) -> FedConfig {
        FedConfig {
            rounds: 1,
            ..self.fl.clone()
        }
    }

}
