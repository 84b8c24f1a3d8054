use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use implicit_sampling::harness::{
    format_summary, read_records, run_experiment, Experiment, ExperimentConfig, SummaryRow, SUMMARY_FILE,
};

#[derive(Parser)]
#[command(name = "isamp", about = "Implicit sampling experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic drive logs (with landmark ids for localization, without for SLAM).
    GenData(RunArgs),
    /// Closed-loop control through the double slit, compared with the analytic solution.
    DoubleSlit(RunArgs),
    /// Two-link arm driven by path integral control.
    Arm(RunArgs),
    /// Stochastic optimization of the Himmelblau function.
    Himmelblau(RunArgs),
    /// Monte Carlo localization benchmark.
    Mcl(RunArgs),
    /// SLAM benchmark.
    Slam(RunArgs),
    /// Print the summary table of a finished experiment.
    Report {
        /// Directory holding summary.csv.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample counts, e.g. `10,50,100`.
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    /// Seeds, as a list (`0,1,2`) and/or half-open ranges (`0..50`).
    #[arg(long)]
    seeds: Option<String>,
    /// Restrict to one method.
    #[arg(long)]
    method: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall-clock time per step (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                seeds.extend(a..b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed {part:?}"))?),
        }
    }
    Ok(seeds)
}

fn build_config(experiment: Experiment, args: RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(experiment),
    };
    config.experiment = experiment;
    if let Some(s) = args.samples {
        config.samples = Some(s);
    }
    if let Some(s) = &args.seeds {
        config.seeds = Some(parse_seeds(s)?);
    }
    if let Some(m) = args.method {
        config.methods = Some(vec![m]);
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    config.timing |= args.timing;
    config.validate()?;
    Ok(config)
}

enum Outcome {
    Success,
    FailedRuns(usize),
}

fn run(experiment: Experiment, args: RunArgs) -> Result<Outcome> {
    let config = build_config(experiment, args)?;
    let out = run_experiment(&config)?;
    out.write(&config.out)?;
    std::fs::write(config.out.join("config.json"), config.to_json()).context("writing config.json")?;
    if !out.summary.is_empty() {
        print!("{}", format_summary(&out.summary));
    }
    for r in out.runs.iter().filter(|r| !r.ok()) {
        eprintln!("run failed: {} M={} seed={}: {}", r.method, r.samples, r.seed, r.status);
    }
    Ok(match out.failed() {
        0 => Outcome::Success,
        n => Outcome::FailedRuns(n),
    })
}

fn report(dir: PathBuf) -> Result<Outcome> {
    let path = dir.join(SUMMARY_FILE);
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    let summary: Vec<SummaryRow> = read_records(&path)?;
    print!("{}", format_summary(&summary));
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => run(Experiment::GenData, a),
        Command::DoubleSlit(a) => run(Experiment::DoubleSlit, a),
        Command::Arm(a) => run(Experiment::Arm, a),
        Command::Himmelblau(a) => run(Experiment::Himmelblau, a),
        Command::Mcl(a) => run(Experiment::Mcl, a),
        Command::Slam(a) => run(Experiment::Slam, a),
        Command::Report { out } => report(out),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::FailedRuns(n)) => {
            eprintln!("{n} run(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
