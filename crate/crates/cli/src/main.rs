use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fens_cli::compare::compare_dirs;
use fens_cli::config::ExperimentConfig;
use fens_cli::error::{CliError, CliResult};
use fens_cli::experiment::{run_distill, run_experiment};
use fens_cli::gradcheck::{check_component, Component, TOLERANCE};
use fens_core::data::{dirichlet_partition, gen_synthetic, load_csv, write_csv, PartitionSpec};

#[derive(Parser)]
#[command(name = "fens", version, about = "Federated ensembles simulator")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "FENS_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-blob dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a CSV dataset over clients with a Dirichlet prior.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment.
    Run(ConfigArgs),
    /// Tabulate accuracy and bytes across finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run FENS and distill the global model into one network.
    Distill(ConfigArgs),
    /// Finite-difference check of every trainable component.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        component: Option<String>,
    },
}

fn load_config(a: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    let quiet = cli.quiet;
    let mut log = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::GenData {
            classes,
            dim,
            per_class,
            separation,
            seed,
            out,
        } => {
            let ds = gen_synthetic(classes, dim, per_class, separation, seed)
                .map_err(|e| CliError::config("gen-data", e.to_string()))?;
            write_csv(&ds, &out)?;
            log(&format!("wrote {} rows to {}", ds.len(), out.display()));
        }
        Command::Partition {
            data,
            alpha,
            clients,
            seed,
            out,
        } => {
            let spec = PartitionSpec {
                alpha,
                num_clients: clients,
                seed,
            };
            spec.validate()
                .map_err(|e| CliError::config("partition", e.to_string()))?;
            let ds = load_csv(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            for (i, part) in dirichlet_partition(&ds, &spec)?.iter().enumerate() {
                write_csv(part, out.join(format!("client-{i}.csv")))?;
                log(&format!("client {i}: {} samples {:?}", part.len(), part.label_counts()));
            }
        }
        Command::Run(a) => {
            let cfg = load_config(&a)?;
            let s = run_experiment(&cfg, &mut log)?;
            log(&format!(
                "accuracy {:.4} +- {:.4}, {:.0} bytes/client",
                s.accuracy_mean, s.accuracy_std, s.bytes_per_client
            ));
        }
        Command::Compare { runs, out } => {
            let table = compare_dirs(&runs)?;
            match out {
                Some(p) => std::fs::write(&p, &table).map_err(|e| CliError::io(&p, e))?,
                None => print!("{table}"),
            }
        }
        Command::Distill(a) => {
            let cfg = load_config(&a)?;
            run_distill(&cfg, &mut log)?;
        }
        Command::GradCheck {
            instances,
            seed,
            component,
        } => {
            let comps = match component {
                Some(c) => vec![c.parse::<Component>().map_err(|e| CliError::config("component", e))?],
                None => Component::ALL.to_vec(),
            };
            let mut failed = false;
            for c in comps {
                let worst = check_component(c, instances, seed)?;
                let ok = worst < TOLERANCE;
                failed |= !ok;
                println!("{c:<10} max_rel_error={worst:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            if failed {
                return Err(CliError::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
