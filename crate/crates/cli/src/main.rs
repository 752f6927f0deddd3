//! `repread`: simulation and analysis of repetitive nuclear-spin readout.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use repread_core::config::{load_config, LoadedConfig};
use repread_core::Error;
use serde_json::Map;

use commands::*;
use manifest::{now_unix, sha256_bytes, OutputDir, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "repread", version, about = "Repetitive readout of a nuclear spin qubit: forward models, simulation and inference")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "REPREAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Energy levels of the electron-nuclear spin system.
    Levels(LevelsArgs),
    /// Monte-Carlo photon-count histogram.
    SimulateHistogram(SimulateHistogramArgs),
    /// Maximum-likelihood fit of switching and emission rates.
    FitRates(FitRatesArgs),
    /// Readout fidelity and success rate over block lengths and thresholds.
    FidelityScan(FidelityScanArgs),
    /// Post-block state posterior given a count condition.
    PrepFidelity(PrepFidelityArgs),
    /// Monte-Carlo and exact signed-difference distributions of alternating readout.
    AltSimulate(AltSimulateArgs),
    /// Fidelity scan of the alternating scheme.
    AltFidelityScan(AltFidelityScanArgs),
    /// Simulated quantum-jump trajectory.
    Trajectory(TrajectoryArgs),
    /// HMM filtering and smoothing of a binned count record.
    FilterTrajectory(FilterTrajectoryArgs),
    /// Switching rates from dwell times of the recovered state path.
    DwellRates(DwellRatesArgs),
    /// Nuclear Rabi signal.
    Rabi(RabiArgs),
    /// Ramsey signal, optionally refitted.
    Ramsey(RamseyArgs),
    /// ENDOR bath spectrum and its peaks.
    Endor(EndorArgs),
    /// Species and coupling assignment of ENDOR peaks.
    MatchPeaks(MatchPeaksArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Levels(_) => "levels",
            Command::SimulateHistogram(_) => "simulate-histogram",
            Command::FitRates(_) => "fit-rates",
            Command::FidelityScan(_) => "fidelity-scan",
            Command::PrepFidelity(_) => "prep-fidelity",
            Command::AltSimulate(_) => "alt-simulate",
            Command::AltFidelityScan(_) => "alt-fidelity-scan",
            Command::Trajectory(_) => "trajectory",
            Command::FilterTrajectory(_) => "filter-trajectory",
            Command::DwellRates(_) => "dwell-rates",
            Command::Rabi(_) => "rabi",
            Command::Ramsey(_) => "ramsey",
            Command::Endor(_) => "endor",
            Command::MatchPeaks(_) => "match-peaks",
        }
    }
}

fn generated_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    nanos ^ ((std::process::id() as u64) << 32)
}

fn run(cli: Cli) -> Result<PathBuf> {
    let started = now_unix();
    let Some(config_path) = cli.config.clone() else {
        bail!(Error::Config {
            path: String::new(),
            message: "--config is required".into(),
        });
    };
    let text = std::fs::read(&config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let LoadedConfig {
        config,
        applied_defaults,
    } = load_config(&config_path)?;

    let threads = match cli.threads {
        Some(0) => bail!(Error::InvalidParameter("--threads must be at least 1".into())),
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            n
        }
        None => rayon::current_num_threads(),
    };
    let (seed, seed_source) = match (cli.seed, config.seed) {
        (Some(s), _) => (s, "flag"),
        (None, Some(s)) => (s, "config"),
        (None, None) => (generated_seed(), "generated"),
    };
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    let mut out = OutputDir::create(dir)?;
    let ctx = Ctx { config: &config, seed };

    match &cli.command {
        Command::Levels(a) => levels(&ctx, a, &mut out),
        Command::SimulateHistogram(a) => simulate_histogram(&ctx, a, &mut out),
        Command::FitRates(a) => fit_rates(&ctx, a, &mut out),
        Command::FidelityScan(a) => fidelity_scan(&ctx, a, &mut out),
        Command::PrepFidelity(a) => prep_fidelity(&ctx, a, &mut out),
        Command::AltSimulate(a) => alt_simulate(&ctx, a, &mut out),
        Command::AltFidelityScan(a) => alt_fidelity_scan(&ctx, a, &mut out),
        Command::Trajectory(a) => trajectory(&ctx, a, &mut out),
        Command::FilterTrajectory(a) => filter_trajectory(&ctx, a, &mut out),
        Command::DwellRates(a) => dwell_rates(&ctx, a, &mut out),
        Command::Rabi(a) => rabi(&ctx, a, &mut out),
        Command::Ramsey(a) => ramsey(&ctx, a, &mut out),
        Command::Endor(a) => endor(&ctx, a, &mut out),
        Command::MatchPeaks(a) => match_peaks(&ctx, a, &mut out),
    }?;

    let manifest = RunManifest {
        tool: "repread",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cli.command.name().to_string(),
        config_path: config_path.display().to_string(),
        config_sha256: sha256_bytes(&text),
        seed,
        seed_source,
        threads,
        started_unix_s: started,
        finished_unix_s: now_unix(),
        applied_defaults: applied_defaults.into_iter().collect::<Map<_, _>>(),
        outputs: out.outputs()?,
    };
    out.finish(&manifest)
}

/// 2 for invalid input, 3 for non-convergence, 4 for too little data.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidParameter(_)
                | Error::Config { .. }
                | Error::Parse { .. }
                | Error::UnknownSpecies(_)
                | Error::Labeling(_)
                | Error::EmptyConclusiveRegion(_)
                | Error::ZeroProbabilityCondition
                | Error::Json(_) => 2,
                Error::NotConverged { .. } => 3,
                Error::InsufficientStatistics { .. } | Error::InsufficientJumps(_) => 4,
                Error::Truncation { .. } | Error::Io(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
