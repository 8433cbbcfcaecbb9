mod commands;
mod config;
mod output;
mod plotdata;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ConfigError;
use output::OutputDir;

#[derive(Parser)]
#[command(
    name = "restriction-lab",
    version,
    about = "Bilinear restriction experiments on the paraboloid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Without it the shipped default is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving CSV/JSON reports and manifest.json.
    #[arg(long, default_value = "lab-out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the numerical kernels (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the extension operator on a grid of Q_R and dump the field.
    Extend(RunArgs),
    /// Build wave packet decompositions and check their bounds.
    Decompose(RunArgs),
    /// Tube/ball incidences and the per-configuration chain report.
    Incidence(RunArgs),
    /// Scaling experiment for the configured family.
    Estimate(RunArgs),
    /// Plate family measurements and bush geometry.
    Plate(RunArgs),
    /// Full property suite; exits nonzero if any row fails.
    Verify(RunArgs),
    /// Merge estimate CSVs into one long-format table.
    Plotdata {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "lab-out")]
        out: PathBuf,
    },
}

fn run_config(name: &str, args: &RunArgs) -> Result<bool> {
    let loaded = config::load(args.config.as_deref(), args.seed)?;
    if let Some(k) = args.workers {
        if k == 0 {
            return Err(ConfigError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    let cfg = &loaded.config;
    let mut out = OutputDir::create(&args.out)?;
    out.write_json("config.json", cfg)?;
    let ok = match name {
        "extend" => commands::extend_fields(cfg, &mut out).map(|_| true),
        "decompose" => commands::decompose(cfg, &mut out).map(|_| true),
        "incidence" => commands::incidence(cfg, &mut out).map(|_| true),
        "estimate" => commands::estimate(cfg, &mut out).map(|_| true),
        "plate" => commands::plate(cfg, &mut out).map(|_| true),
        "verify" => commands::verify(cfg, &mut out),
        _ => unreachable!("subcommand table"),
    }?;
    out.finish(name, loaded.path.as_deref(), Some(cfg.seed))?;
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let (name, args) = match &cli.command {
        Command::Extend(a) => ("extend", a),
        Command::Decompose(a) => ("decompose", a),
        Command::Incidence(a) => ("incidence", a),
        Command::Estimate(a) => ("estimate", a),
        Command::Plate(a) => ("plate", a),
        Command::Verify(a) => ("verify", a),
        Command::Plotdata { reports, out } => {
            let parsed = reports
                .iter()
                .map(|p| plotdata::read_report(p))
                .collect::<Result<Vec<_>>>()?;
            let mut dir = OutputDir::create(out)?;
            dir.write_csv("plotdata.csv", &plotdata::merge(&parsed))?;
            dir.finish("plotdata", None, None)?;
            return Ok(true);
        }
    };
    run_config(name, args)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed; see verify.csv");
            ExitCode::from(1)
        }
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
