use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mplnclust::data_io::NormMethod;
use mplnclust::em::InitMethod;
use mplnclust_cli::{evaluate, normalize, parse_delimiter, run, simulate, write_error_report, ExitStatus, RunManifest, SimSource};

/// Clustering of count data with mixtures of multivariate Poisson-log normal
/// distributions.
#[derive(Debug, Parser)]
#[command(name = "mplnclust", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit mixtures over a range of component counts and select a model.
    Fit(FitArgs),
    /// Draw a synthetic data set with known labels.
    Simulate(SimulateArgs),
    /// Adjusted Rand index between two label files.
    Evaluate(EvaluateArgs),
    /// Compute per-sample normalization factors.
    Normalize(NormalizeArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Count matrix: header of sample ids, then one row per gene, id first.
    #[arg(long)]
    input: PathBuf,
    /// Field delimiter (a character or `tab`).
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    delimiter: u8,
    #[arg(long, default_value = "tmm", value_parser = parse_norm)]
    normalization: NormMethod,
    #[arg(long, default_value_t = 1)]
    g_min: usize,
    #[arg(long, default_value_t = 3)]
    g_max: usize,
    #[arg(long, default_value = "kmeans", value_parser = parse_init)]
    init: InitMethod,
    #[arg(long, default_value_t = 3)]
    init_runs: usize,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    /// Base HMC iterations per chain (half are warmup).
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 200)]
    max_em_iters: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write the final chains of the first N genes to chains_G{g}.csv.
    #[arg(long, default_value_t = 0, value_name = "N")]
    dump_chains: usize,
    /// Importance draws per gene and component for the log-likelihood behind
    /// the criteria; 0 uses the plug-in value instead.
    #[arg(long, default_value_t = 2000, value_name = "N")]
    marginal_draws: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation spec as JSON.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in design: `two-component` or `three-component`.
    #[arg(long, value_parser = ["two-component", "three-component"])]
    preset: Option<String>,
    /// Number of genes for a preset.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for counts.csv, labels.csv and spec.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference labels (gene_id, label).
    #[arg(long)]
    truth: PathBuf,
    /// Predicted labels (gene_id, label); extra columns are ignored.
    #[arg(long)]
    pred: PathBuf,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    delimiter: u8,
    #[arg(long, default_value = "tmm", value_parser = parse_norm)]
    method: NormMethod,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_norm(s: &str) -> Result<NormMethod, String> {
    s.parse().map_err(|e: mplnclust::Error| e.to_string())
}

fn parse_init(s: &str) -> Result<InitMethod, String> {
    s.parse().map_err(|e: mplnclust::Error| e.to_string())
}

fn execute(command: Command) -> anyhow::Result<ExitStatus> {
    match command {
        Command::Fit(a) => {
            let manifest = RunManifest {
                input: a.input,
                delimiter: a.delimiter,
                normalization: a.normalization,
                g_min: a.g_min,
                g_max: a.g_max,
                init: a.init,
                init_runs: a.init_runs,
                chains: a.chains,
                iters: a.iters,
                max_em_iters: a.max_em_iters,
                seed: a.seed,
                workers: a.workers,
                out: a.out.clone(),
                dump_chains: a.dump_chains,
                marginal_draws: a.marginal_draws,
            };
            match run(&manifest) {
                Ok(outcome) => {
                    for (criterion, g) in &outcome.selected {
                        println!("{criterion}\tG={g}");
                    }
                    if outcome.status == ExitStatus::NoConvergence {
                        eprintln!("no component count converged; partial results are in {}", a.out.display());
                    }
                    Ok(outcome.status)
                }
                Err(e) => {
                    if let Some(p) = write_error_report(&a.out, &e) {
                        eprintln!("error report written to {}", p.display());
                    }
                    Err(e)
                }
            }
        }
        Command::Simulate(a) => {
            let source = match (a.spec, a.preset.as_deref()) {
                (Some(path), _) => SimSource::Spec(path),
                (None, Some("three-component")) => SimSource::ThreeComponent { n: a.n, seed: a.seed },
                (None, Some(_)) => SimSource::TwoComponent { n: a.n, seed: a.seed },
                (None, None) => {
                    eprintln!("simulate needs --spec or --preset");
                    return Ok(ExitStatus::Usage);
                }
            };
            for p in simulate(&source, &a.out)? {
                println!("{}", p.display());
            }
            Ok(ExitStatus::Success)
        }
        Command::Evaluate(a) => {
            println!("{}", evaluate(&a.truth, &a.pred)?);
            Ok(ExitStatus::Success)
        }
        Command::Normalize(a) => {
            match a.out {
                Some(path) => {
                    let file = std::fs::File::create(&path)?;
                    normalize(&a.input, a.delimiter, a.method, file)?;
                }
                None => {
                    normalize(&a.input, a.delimiter, a.method, io::stdout().lock())?;
                }
            }
            Ok(ExitStatus::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            let report = serde_json::json!({
                "status": "error",
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{report}");
            ExitCode::from(ExitStatus::Error as u8)
        }
    }
}
