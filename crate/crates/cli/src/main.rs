//! `bdlp`: batch front end for simulations, moment solves and verification.
//!
//! Exit codes: 0 success, 1 bad arguments/configuration/I-O, 2 numerical
//! failure, 3 a verification suite failed.

mod experiments;
mod output;
mod scenario;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use experiments::Failure;
use output::OutputDir;
use scenario::{parse_scenario, Experiment, Scenario};

#[derive(Parser)]
#[command(name = "bdlp", version, about = "Spatial birth-and-death model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated exact simulation: density.csv, paircorr.csv
    Simulate(RunArgs),
    /// Closed moment hierarchy: k1.csv, q.csv, bounds.csv
    Moments(RunArgs),
    /// Parameter conditions and harmonic-analysis oracle checks
    Verify(RunArgs),
    /// Simulation against the moment solution, with z-scores
    Compare(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory, overriding the scenario's `outputs`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG line plots
    #[arg(long)]
    plots: bool,
}

const SEED_ENV: &str = "BDLP_SEED";

fn load(experiment: Experiment, args: &RunArgs) -> Result<(Scenario, &'static str), Failure> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut s = parse_scenario(&text).map_err(|e| anyhow!("{}: {e}", args.config.display()))?;
    if let Some(declared) = s.experiment {
        if declared != experiment {
            return Err(Failure::Setup(anyhow!(
                "scenario declares experiment `{declared}` but `{experiment}` was requested"
            )));
        }
    }
    s.experiment = Some(experiment);
    let mut source = if s.defaults_applied.iter().any(|f| f == "run.master_seed") {
        "default"
    } else {
        "config"
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        s.run.master_seed = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV} must be an unsigned 64-bit integer, got {v:?}"))?;
        source = SEED_ENV;
    }
    if let Some(out) = &args.out {
        s.outputs = out.clone();
        s.defaults_applied.retain(|f| f != "outputs");
    }
    Ok((s, source))
}

fn execute(experiment: Experiment, args: RunArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let (s, seed_source) = load(experiment, &args)?;
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Failure::Setup(anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut out = OutputDir::create(&s.outputs)?;
    let result = match experiment {
        Experiment::Simulate => experiments::simulate(&s, &mut out, args.plots),
        Experiment::Moments => experiments::moments(&s, &mut out, args.plots),
        Experiment::Verify => experiments::verify(&s, &mut out),
        Experiment::Compare => experiments::compare(&s, &mut out, args.plots),
    };
    let (code, status) = match &result {
        Ok(()) => (0, "ok".to_string()),
        Err(f) => (f.exit_code(), f.to_string()),
    };
    let mut files = out.files.clone();
    files.push("run.json".into());
    let meta = json!({
        "experiment": experiment,
        "exit_code": code,
        "status": status,
        "master_seed": s.run.master_seed,
        "seed_source": seed_source,
        "versions": {
            "bdlp": env!("CARGO_PKG_VERSION"),
        },
        "jobs": args.jobs.unwrap_or_else(rayon::current_num_threads),
        "started_unix_seconds": started_unix,
        "wall_seconds": started.elapsed().as_secs_f64(),
        "defaults_applied": s.defaults_applied,
        "files": files,
        "config": s,
    });
    out.write_with("run.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &meta)?;
        writeln!(w)
    })?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (experiment, args) = match cli.command {
        Command::Simulate(a) => (Experiment::Simulate, a),
        Command::Moments(a) => (Experiment::Moments, a),
        Command::Verify(a) => (Experiment::Verify, a),
        Command::Compare(a) => (Experiment::Compare, a),
    };
    match execute(experiment, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
