//! `cooprpl`: run scenarios and parameter sweeps, emit CSV, compare protocols.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cooprpl::sweep::DEFAULT_DENSITY_VALUES;
use cooprpl::trace::write_jsonl;
use cooprpl::{
    echo_config, emit_comparison, parse_scenario, run_sweep, Protocol, RoutingClass, ScenarioConfig, Simulation,
    SweepAxis,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

/// Simulator for RPL, opportunistic RPL and cooperative-relay RPL in
/// smart-meter mesh networks.
///
/// Every setting has a default (see `cooprpl config` for the full resolved
/// list); a scenario file given with --config overrides them and the sweep
/// flags override the file.
#[derive(Parser, Debug)]
#[command(name = "cooprpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a sweep and write one CSV row per (protocol, class, value, seed)
    /// plus one aggregate row per point.
    Sweep(SweepArgs),
    /// Run the configured scenario once and print its metrics as JSON.
    Run(RunArgs),
    /// Print the max-over-sweep improvement table for a sweep CSV.
    Compare {
        /// CSV written by `cooprpl sweep`.
        csv: PathBuf,
    },
    /// Print the resolved configuration in scenario-file syntax.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep axis: lsr or density.
    #[arg(long)]
    sweep: Option<SweepAxis>,
    /// Comma-separated axis values, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Comma-separated protocols: rpl, opp-rpl, coop-rpl.
    #[arg(long, value_delimiter = ',')]
    protocols: Option<Vec<Protocol>>,
    /// Comma-separated coop-rpl classes: class-a, class-b, class-c, best-effort.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<RoutingClass>>,
    /// Seeds per point [default: 20].
    #[arg(long)]
    seeds: Option<u32>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the base scenario once and write its JSON-lines trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the comparison table after the sweep.
    #[arg(long)]
    compare: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines trace of control messages, relay decisions and packets.
    #[arg(long)]
    trace: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Other(e.into())
    }
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig, Failure> {
    match path {
        Some(p) => parse_scenario(p).map_err(|e| Failure::Config(e.into())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn write_trace(sim: &Simulation, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, sim.trace(), None)?;
    w.flush()?;
    Ok(())
}

fn traced_run(config: &ScenarioConfig, trace: Option<&Path>) -> anyhow::Result<Simulation> {
    let mut sim = Simulation::new(config.clone())?;
    if trace.is_some() {
        sim.enable_trace();
    }
    sim.run_traffic()?;
    if let Some(path) = trace {
        write_trace(&sim, path)?;
    }
    Ok(sim)
}

fn sweep(args: SweepArgs) -> Result<u8, Failure> {
    let mut config = load(args.config.as_deref())?;
    let spec = &mut config.sweep;
    if let Some(axis) = args.sweep {
        spec.axis = axis;
        if args.values.is_none() && axis == SweepAxis::DensityRatio {
            spec.values = DEFAULT_DENSITY_VALUES.to_vec();
        }
    }
    if let Some(v) = args.values {
        spec.values = v;
    }
    if let Some(p) = args.protocols {
        spec.protocols = p;
    }
    if let Some(c) = args.classes {
        spec.classes = c;
    }
    if let Some(s) = args.seeds {
        spec.seeds = s;
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    config
        .validate()
        .map_err(|issue| Failure::Config(anyhow::anyhow!("invalid sweep: {issue}")))?;

    let mut stderr = io::stderr().lock();
    writeln!(stderr, "# resolved configuration")?;
    for line in echo_config(&config).lines() {
        writeln!(stderr, "# {line}")?;
    }

    let result = run_sweep(&config, &config.sweep);
    let csv = result.to_csv_string();
    match &args.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().lock().write_all(csv.as_bytes())?,
    }
    if let Some(path) = &args.trace {
        traced_run(&config, Some(path))?;
    }
    if args.compare {
        if let Err(e) = emit_comparison(&csv, io::stderr().lock()) {
            writeln!(stderr, "comparison: {e}")?;
        }
    }
    let failed = result.failed();
    if failed > 0 {
        writeln!(stderr, "{failed} of {} points failed", result.points.len())?;
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    let config = load(args.config.as_deref())?;
    let sim = traced_run(&config, args.trace.as_deref())?;
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &sim.report())?;
    writeln!(out)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(args) => sweep(args),
        Command::Run(args) => run(args),
        Command::Compare { csv } => fs::read_to_string(&csv)
            .with_context(|| format!("reading {}", csv.display()))
            .map_err(Failure::from)
            .and_then(|text| emit_comparison(&text, io::stdout().lock()).map(|_| 0).map_err(Failure::from)),
        Command::Config { config } => load(config.as_deref()).map(|c| {
            print!("{}", echo_config(&c));
            0
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
