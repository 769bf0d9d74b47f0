//! The `set-transport` command line: property verification, attention
//! benchmarks, training runs and attention export.
//!
//! Exit codes: 0 success, 1 failure (a failed property or a runtime error),
//! 2 usage (bad flags or an invalid config).

pub mod bench;
pub mod config;
pub mod export;
pub mod train;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use set_transport::model::load_checkpoint;
use set_transport::sinkhorn::{LogSinkhorn, OtSolver};
use set_transport::Error;

use crate::bench::BenchConfig;
use crate::config::RunConfig;
use crate::verify::{SignFlipSinkhorn, SuiteSizes};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "set-transport", version, about = "Self-optimal-transport attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap for batch evaluation.
    #[arg(long, global = true, env = "SET_TRANSPORT_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mutant {
    SignFlip,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the property suites and write verify_report.json.
    Verify {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Swap in a broken solver to check that the suites notice.
        #[arg(long, hide = true)]
        mutant: Option<Mutant>,
    },
    /// Time SeT and dot-product attention and write bench.csv.
    Bench {
        /// Token counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Fit, train and write the checkpoint and metrics.
    Train {
        /// Start from a named preset instead of a config file.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Write one layer's weighted transport plan for one input.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer index, counted from 0 across all stages.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Headerless numeric CSV holding one sample.
        #[arg(long, conflicts_with = "sample")]
        input: Option<PathBuf>,
        /// Index into the test split of the data described by `--config`.
        #[arg(long)]
        sample: Option<usize>,
        /// Override the Sinkhorn iteration count used for the export.
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Runtime or usage failure, kept apart so the exit code can tell them
/// apart.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn threads(cli: &Cli) -> usize {
    cli.threads.filter(|&t| t > 0).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Usage(format!("config: {}: {}: {}", path.display(), config::json_pointer(e.path()), e.inner()))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(Error::from)?;
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAIL
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<i32> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Verify { filter, mutant } => {
            let mut sizes: SuiteSizes = match &cli.config {
                Some(p) => read_json(p)?,
                None => SuiteSizes::default(),
            };
            if let Some(s) = cli.seed {
                sizes.seed = s;
            }
            let suites = verify::select(filter.as_deref());
            if suites.is_empty() {
                return Err(CliError::Usage(format!(
                    "--filter {:?} matches no suite; suites are {:?}",
                    filter.as_deref().unwrap_or(""),
                    verify::SUITES
                )));
            }
            write_json(&out.join(train::EFFECTIVE_CONFIG_FILE), &sizes)?;
            let solver: &dyn OtSolver = match mutant {
                Some(Mutant::SignFlip) => &SignFlipSinkhorn,
                None => &LogSinkhorn,
            };
            let report = verify::run(&suites, solver, &sizes);
            write_json(&out.join("verify_report.json"), &report)?;
            println!("{}", if report.passed { "all properties hold" } else { "some properties FAILED" });
            Ok(if report.passed { EXIT_OK } else { EXIT_FAIL })
        }
        Command::Bench { n, m, d, reps } => {
            let mut cfg: BenchConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => BenchConfig::default(),
            };
            if let Some(n) = n {
                cfg.n = n.clone();
            }
            if let Some(m) = m {
                cfg.m = *m;
            }
            if let Some(d) = d {
                cfg.d = *d;
            }
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if cfg.n.is_empty() || cfg.n.contains(&0) || cfg.m == 0 || cfg.d == 0 || cfg.k == 0 || cfg.reps == 0 {
                return Err(CliError::Usage("bench: n, m, d, k and reps must be >= 1".into()));
            }
            write_json(&out.join(train::EFFECTIVE_CONFIG_FILE), &cfg)?;
            let rows = bench::run(&cfg)?;
            let csv = bench::to_csv(&rows);
            fs::write(out.join("bench.csv"), &csv).map_err(Error::from)?;
            write_json(
                &out.join("bench_machine.json"),
                &serde_json::json!({ "machine": bench::MachineInfo::current() }),
            )?;
            print!("{csv}");
            Ok(EXIT_OK)
        }
        Command::Train { preset } => {
            let mut cfg = match (preset, &cli.config) {
                (Some(name), _) => config::preset(name)?,
                (None, Some(p)) => RunConfig::load(p)?,
                (None, None) => return Err(CliError::Usage("train needs --config PATH or --preset NAME".into())),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(o) = &cli.out {
                cfg.out_dir = o.clone();
            }
            let outcome = train::run(&cfg, threads(cli))?;
            match (outcome.summary.final_test_loss, outcome.summary.final_test_accuracy) {
                (Some(l), Some(a)) => println!("final test loss {l:.4} accuracy {a:.4}"),
                _ => println!("trained without a test split"),
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(EXIT_OK)
        }
        Command::ExportAttention { checkpoint, layer, head, input, sample, iterations } => {
            let mut model = load_checkpoint(checkpoint)?;
            if let Some(it) = iterations {
                if *it == 0 {
                    return Err(CliError::Usage("--iterations must be >= 1".into()));
                }
                model.config.sinkhorn.iterations = *it;
            }
            let x = match (input, sample, &cli.config) {
                (Some(p), _, _) => export::read_matrix_csv(p)?,
                (None, Some(i), Some(cfg_path)) => {
                    let mut cfg = RunConfig::load(cfg_path)?;
                    if let Some(s) = cli.seed {
                        cfg.seed = s;
                    }
                    let (_, test) = cfg.data.load(cfg.seed)?;
                    test.inputs.get(*i).cloned().ok_or_else(|| {
                        CliError::Usage(format!("--sample {i} out of range: {} test samples", test.len()))
                    })?
                }
                _ => {
                    return Err(CliError::Usage(
                        "export-attention needs --input PATH or --sample I with --config".into(),
                    ))
                }
            };
            write_json(
                &out.join(train::EFFECTIVE_CONFIG_FILE),
                &serde_json::json!({
                    "checkpoint": checkpoint,
                    "layer": layer,
                    "head": head,
                    "iterations": model.config.sinkhorn.iterations,
                    "model": model.config,
                }),
            )?;
            let s = export::export_attention(&model, &x, *layer, *head, &out)?;
            println!("layer {layer} head {head}: {}x{} plan, marginal violation {:e}", s.n, s.m, s.plan_violation);
            Ok(EXIT_OK)
        }
    }
}
