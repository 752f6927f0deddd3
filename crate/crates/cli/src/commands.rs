use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use repread_core::alt::{
    alt_fidelity_scan as core_alt_scan, alt_pareto_front, alt_policy_grid, diff_distribution, simulate_alt,
    NuclearState,
};
use repread_core::config::ExperimentConfig;
use repread_core::dynamics::{
    endor_spectrum, find_peaks, fit_ramsey, match_peaks as core_match_peaks, poisson_sample, rabi_signal,
    ramsey_signal, ContrastMap, EndorOptions, MatchOptions, RabiConfig, RamseyConfig,
};
use repread_core::io;
use repread_core::readout::{
    fidelity_scan as core_fidelity_scan, fit_rates as core_fit_rates, pareto_front, policy_grid,
    preparation_fidelity, readout_fidelity, simulate_counts, two_point_histogram, CountCondition, FitMask,
    FitOptions, ReadoutParams, SpinState, ThresholdPolicy, TwoPointSpec,
};
use repread_core::spin::{
    build_hamiltonian, eigen_levels, electron_transition_frequencies, nuclear_transition_frequency,
    ElectronProjection, Manifold, NuclearProjection,
};
use repread_core::trajectory::{
    assign_states, dwell_time_rates, error_rate, hmm_filter, hmm_smooth, simulate_trajectory,
    DEFAULT_BIN_REPETITIONS,
};
use repread_core::Error;

use crate::manifest::OutputDir;

pub struct Ctx<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
}

fn linspace(stop: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.0; points];
    }
    (0..points).map(|i| stop * i as f64 / (points - 1) as f64).collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ManifoldArg {
    Ground,
    Excited,
}

#[derive(Args, Debug)]
pub struct LevelsArgs {
    #[arg(long, value_enum, default_value = "ground")]
    manifold: ManifoldArg,
}

#[derive(Serialize)]
struct LevelSummary {
    manifold: Manifold,
    trace_mhz: f64,
    high_field_labels: bool,
    nuclear_transitions_mhz: Vec<(f64, Option<f64>)>,
    electron_transitions_mhz: Vec<(f64, Option<[f64; 2]>)>,
}

pub fn levels(ctx: &Ctx, a: &LevelsArgs, out: &mut OutputDir) -> Result<()> {
    let spin = ctx.config.spin()?;
    let manifold = match a.manifold {
        ManifoldArg::Ground => Manifold::Ground,
        ManifoldArg::Excited => Manifold::Excited,
    };
    let h = build_hamiltonian(&spin.system(), &spin.tensor(), manifold)?;
    let levels = eigen_levels(&h);
    out.write("levels.csv", |w| io::write_levels(w, &levels))?;
    let labelled = levels.high_field_labels();
    let summary = LevelSummary {
        manifold,
        trace_mhz: levels.trace,
        high_field_labels: labelled,
        nuclear_transitions_mhz: ElectronProjection::ALL
            .iter()
            .map(|&ms| (ms.value(), labelled.then(|| nuclear_transition_frequency(&levels, ms).ok()).flatten()))
            .collect(),
        electron_transitions_mhz: NuclearProjection::ALL
            .iter()
            .map(|&mi| (mi.value(), labelled.then(|| electron_transition_frequencies(&levels, mi).ok()).flatten()))
            .collect(),
    };
    out.write_json("levels.json", &summary)
}

#[derive(Args, Debug)]
pub struct SimulateHistogramArgs {
    /// Initial hidden state.
    #[arg(long, default_value = "bright")]
    state: SpinState,
    /// Repetitions per block.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<u64>,
    /// Two-point protocol: herald this state with a first readout, histogram the second.
    #[arg(long)]
    prepare: Option<SpinState>,
}

#[derive(Serialize)]
struct HistogramSummary {
    mode: &'static str,
    initial_state: Option<SpinState>,
    prepared_state: Option<SpinState>,
    repetitions: usize,
    trials: u64,
    mean: f64,
    attempted: Option<u64>,
    accepted: Option<u64>,
    crc_rejected: Option<u64>,
}

pub fn simulate_histogram(ctx: &Ctx, a: &SimulateHistogramArgs, out: &mut OutputDir) -> Result<()> {
    let r = &ctx.config.readout;
    let mut params = ctx.config.readout_params()?;
    if let Some(n) = a.n {
        params = params.with_repetitions(n);
    }
    let trials = a.trials.unwrap_or(r.trials);
    let summary = if let Some(prepare) = a.prepare {
        let tp = &r.two_point;
        let spec = TwoPointSpec {
            n1: tp.n1,
            n2: a.n.unwrap_or(tp.n2),
            prepare,
            bright_threshold: tp.bright_threshold,
            crc_pass: tp.crc_pass,
            initial_bright_probability: tp.initial_bright_probability,
        };
        let res = two_point_histogram(&params, &spec, trials, ctx.seed)?;
        if res.accepted == 0 {
            return Err(Error::InsufficientStatistics {
                accepted: 0,
                attempted: res.attempted,
            }
            .into());
        }
        out.write("histogram.csv", |w| io::write_histogram(w, &res.histogram))?;
        HistogramSummary {
            mode: "two-point",
            initial_state: None,
            prepared_state: Some(prepare),
            repetitions: spec.n2,
            trials: res.histogram.trials(),
            mean: res.histogram.mean(),
            attempted: Some(res.attempted),
            accepted: Some(res.accepted),
            crc_rejected: Some(res.crc_rejected),
        }
    } else {
        let h = simulate_counts(&params, a.state, trials, ctx.seed)?;
        out.write("histogram.csv", |w| io::write_histogram(w, &h))?;
        HistogramSummary {
            mode: "single",
            initial_state: Some(a.state),
            prepared_state: None,
            repetitions: params.repetitions,
            trials: h.trials(),
            mean: h.mean(),
            attempted: None,
            accepted: None,
            crc_rejected: None,
        }
    };
    out.write_json("histogram.json", &summary)
}

/// `STATE:N:PATH`, e.g. `bright:300:hist_bright.csv`.
#[derive(Clone, Debug)]
pub struct HistSpec {
    state: SpinState,
    repetitions: usize,
    path: PathBuf,
}

impl std::str::FromStr for HistSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.splitn(3, ':');
        let (Some(state), Some(n), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("expected STATE:N:PATH, got `{s}`"));
        };
        Ok(Self {
            state: state.parse().map_err(|e: Error| e.to_string())?,
            repetitions: n.parse().map_err(|_| format!("bad block length `{n}`"))?,
            path: PathBuf::from(path),
        })
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FreeArg {
    All,
    Rates,
}

#[derive(Args, Debug)]
pub struct FitRatesArgs {
    /// Histogram to fit, as STATE:N:PATH. Repeatable.
    #[arg(long = "hist", required = true)]
    hists: Vec<HistSpec>,
    #[arg(long, value_enum, default_value = "all")]
    free: FreeArg,
}

pub fn fit_rates(ctx: &Ctx, a: &FitRatesArgs, out: &mut OutputDir) -> Result<()> {
    let init = ctx.config.readout_params()?;
    let mut data = Vec::with_capacity(a.hists.len());
    for spec in &a.hists {
        let mut h = io::ingest_histogram(&spec.path).with_context(|| format!("reading {}", spec.path.display()))?;
        h.repetitions = Some(spec.repetitions);
        data.push((h, spec.state));
    }
    let free = match a.free {
        FreeArg::All => FitMask::all(),
        FreeArg::Rates => FitMask::rates_only(),
    };
    let fit = core_fit_rates(&data, &init, free, &FitOptions::default())?;
    out.write_json("fit.json", &fit)
}

#[derive(Args, Debug)]
pub struct FidelityScanArgs {
    /// Block lengths; defaults to the configured scan.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Evaluate only the single threshold `n ≥ T` reads bright.
    #[arg(long)]
    threshold: Option<u64>,
    #[arg(long)]
    n_dark_max_limit: Option<u64>,
    #[arg(long)]
    n_bright_min_limit: Option<u64>,
}

pub fn fidelity_scan(ctx: &Ctx, a: &FidelityScanArgs, out: &mut OutputDir) -> Result<()> {
    let scan = &ctx.config.readout.scan;
    let params = ctx.config.readout_params()?;
    let ns = if a.n.is_empty() { scan.n_values.clone() } else { a.n.clone() };
    let policies = match a.threshold {
        Some(t) => vec![ThresholdPolicy::single(t)?],
        None => policy_grid(
            a.n_dark_max_limit.unwrap_or(scan.n_dark_max_limit),
            a.n_bright_min_limit.unwrap_or(scan.n_bright_min_limit),
        ),
    };
    let points = core_fidelity_scan(&params, &ns, &policies)?;
    let front = pareto_front(&points);
    out.write("fidelity_scan.csv", |w| io::write_fidelity_points(w, &points))?;
    out.write("pareto.csv", |w| io::write_fidelity_points(w, &front))
}

#[derive(Args, Debug)]
pub struct PrepFidelityArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Condition on exactly this count (default 0).
    #[arg(long, conflicts_with_all = ["at_most", "at_least", "between"])]
    count: Option<u64>,
    #[arg(long, conflicts_with_all = ["at_least", "between"])]
    at_most: Option<u64>,
    #[arg(long, conflicts_with = "between")]
    at_least: Option<u64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    between: Option<Vec<u64>>,
}

#[derive(Serialize)]
struct PrepReport {
    repetitions: usize,
    condition: CountCondition,
    p_bright: f64,
    p_dark: f64,
    condition_probability: f64,
}

pub fn prep_fidelity(ctx: &Ctx, a: &PrepFidelityArgs, out: &mut OutputDir) -> Result<()> {
    let mut params = ctx.config.readout_params()?;
    if let Some(n) = a.n {
        params = params.with_repetitions(n);
    }
    let condition = match (a.count, a.at_most, a.at_least, &a.between) {
        (_, Some(k), _, _) => CountCondition::AtMost(k),
        (_, _, Some(k), _) => CountCondition::AtLeast(k),
        (_, _, _, Some(v)) => {
            if v[0] > v[1] {
                bail!(Error::InvalidParameter("--between needs LO ≤ HI".into()));
            }
            CountCondition::Between(v[0], v[1])
        }
        (k, ..) => CountCondition::Exactly(k.unwrap_or(0)),
    };
    let post = preparation_fidelity(&params, condition)?;
    out.write_json(
        "prep_fidelity.json",
        &PrepReport {
            repetitions: params.repetitions,
            condition,
            p_bright: post.p_bright,
            p_dark: post.p_dark,
            condition_probability: post.condition_probability,
        },
    )
}

#[derive(Args, Debug)]
pub struct AltSimulateArgs {
    /// Initial nuclear state.
    #[arg(long, default_value = "up")]
    state: NuclearState,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    trials: Option<u64>,
}

pub fn alt_simulate(ctx: &Ctx, a: &AltSimulateArgs, out: &mut OutputDir) -> Result<()> {
    let mut params = ctx.config.alt_params()?;
    if let Some(p) = a.pairs {
        params = params.with_pairs(p);
    }
    let trials = a.trials.unwrap_or(ctx.config.alt.trials);
    let hist = simulate_alt(&params, a.state, trials, ctx.seed)?;
    let pmf = diff_distribution(&params, a.state)?;
    out.write("diff_histogram.csv", |w| io::write_diff_histogram(w, &hist))?;
    out.write("diff_pmf.csv", |w| io::write_diff_pmf(w, &pmf))
}

#[derive(Args, Debug)]
pub struct AltFidelityScanArgs {
    /// Pair counts; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<usize>,
    /// Largest |threshold| on the count difference.
    #[arg(long)]
    threshold_limit: Option<i64>,
}

pub fn alt_fidelity_scan(ctx: &Ctx, a: &AltFidelityScanArgs, out: &mut OutputDir) -> Result<()> {
    let params = ctx.config.alt_params()?;
    let pairs = if a.pairs.is_empty() { ctx.config.alt.scan_pairs.clone() } else { a.pairs.clone() };
    let policies = alt_policy_grid(a.threshold_limit.unwrap_or(ctx.config.alt.threshold_limit));
    let points = core_alt_scan(&params, &pairs, &policies)?;
    let front = alt_pareto_front(&points);
    out.write("alt_fidelity_scan.csv", |w| io::write_alt_fidelity_points(w, &points))?;
    out.write("alt_pareto.csv", |w| io::write_alt_fidelity_points(w, &front))
}

#[derive(Args, Debug)]
pub struct TrajectoryArgs {
    #[arg(long)]
    t_total: Option<f64>,
    /// Repetitions per bin.
    #[arg(long)]
    n_bin: Option<usize>,
}

#[derive(Serialize)]
struct TrajectorySummary {
    bins: usize,
    bin_duration_s: f64,
    total_photons: u64,
    true_jumps: usize,
}

pub fn trajectory(ctx: &Ctx, a: &TrajectoryArgs, out: &mut OutputDir) -> Result<()> {
    let t = &ctx.config.trajectory;
    let params = ctx.config.readout_params()?;
    let traj = simulate_trajectory(
        &params,
        a.t_total.unwrap_or(t.t_total_s),
        a.n_bin.unwrap_or(t.n_bin),
        ctx.seed,
    )?;
    let jumps = traj
        .true_states
        .as_ref()
        .map(|s| s.windows(2).filter(|w| w[0] != w[1]).count())
        .unwrap_or(0);
    out.write("trajectory.csv", |w| io::write_trajectory(w, &traj))?;
    out.write_json(
        "trajectory.json",
        &TrajectorySummary {
            bins: traj.len(),
            bin_duration_s: traj.bin_duration_s,
            total_photons: traj.total_photons(),
            true_jumps: jumps,
        },
    )
}

#[derive(Args, Debug)]
pub struct FilterTrajectoryArgs {
    /// Trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    /// Repetitions per bin of the input.
    #[arg(long)]
    n_bin: Option<usize>,
    /// Forward filter only.
    #[arg(long)]
    no_smooth: bool,
}

#[derive(Serialize)]
struct FilterSummary {
    bins: usize,
    log_evidence: f64,
    smoothed: bool,
    p_threshold: f64,
    error_rate: Option<f64>,
}

fn load_trajectory(ctx: &Ctx, input: &Path, n_bin: Option<usize>) -> Result<(repread_core::trajectory::Trajectory, ReadoutParams)> {
    let params = ctx.config.readout_params()?;
    let n_bin = n_bin.unwrap_or(if ctx.config.trajectory.n_bin > 0 {
        ctx.config.trajectory.n_bin
    } else {
        DEFAULT_BIN_REPETITIONS
    });
    let traj = io::read_trajectory(open(input)?, n_bin, params.t_rep_s)
        .with_context(|| format!("reading {}", input.display()))?;
    Ok((traj, params))
}

pub fn filter_trajectory(ctx: &Ctx, a: &FilterTrajectoryArgs, out: &mut OutputDir) -> Result<()> {
    let (traj, params) = load_trajectory(ctx, &a.input, a.n_bin)?;
    let fr = if a.no_smooth { hmm_filter(&traj, &params)? } else { hmm_smooth(&traj, &params)? };
    let threshold = ctx.config.trajectory.p_threshold;
    let path = assign_states(&fr, threshold);
    out.write("filter.csv", |w| io::write_filter(w, &fr))?;
    out.write_json(
        "filter.json",
        &FilterSummary {
            bins: traj.len(),
            log_evidence: fr.log_evidence,
            smoothed: fr.smoothed.is_some(),
            p_threshold: threshold,
            error_rate: traj.true_states.as_ref().map(|t| error_rate(&path, t)),
        },
    )
}

#[derive(Args, Debug)]
pub struct DwellRatesArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    n_bin: Option<usize>,
    /// Use the recorded true states instead of the HMM path.
    #[arg(long)]
    use_truth: bool,
}

#[derive(Serialize)]
struct DwellReport {
    source: &'static str,
    bin_duration_s: f64,
    #[serde(flatten)]
    stats: repread_core::trajectory::DwellStats,
}

pub fn dwell_rates(ctx: &Ctx, a: &DwellRatesArgs, out: &mut OutputDir) -> Result<()> {
    let (traj, params) = load_trajectory(ctx, &a.input, a.n_bin)?;
    let (path, source) = if a.use_truth {
        let Some(truth) = traj.true_states.clone() else {
            bail!(Error::InvalidParameter("input has no true_state column".into()));
        };
        (truth, "truth")
    } else {
        let fr = hmm_smooth(&traj, &params)?;
        (assign_states(&fr, ctx.config.trajectory.p_threshold), "hmm")
    };
    let stats = dwell_time_rates(&path, traj.bin_duration_s)?;
    out.write_json(
        "dwell.json",
        &DwellReport {
            source,
            bin_duration_s: traj.bin_duration_s,
            stats,
        },
    )
}

/// Uses explicit fidelities when both are given, else the single-threshold
/// readout at the configured block length.
fn contrast_map(ctx: &Ctx, f_dark: Option<f64>, f_bright: Option<f64>) -> Result<ContrastMap> {
    match (f_dark, f_bright) {
        (Some(d), Some(b)) => Ok(ContrastMap::from_fidelities(d, b)?),
        (None, None) => {
            let params = ctx.config.readout_params()?;
            let point = readout_fidelity(&params, ThresholdPolicy::single(ctx.config.readout.threshold)?)?;
            Ok(ContrastMap::from_point(&point)?)
        }
        _ => bail!(Error::Config {
            path: "dynamics".into(),
            message: "F_dark and F_bright must be given together".into(),
        }),
    }
}

fn write_signal(out: &mut OutputDir, name: &str, t: &[f64], y: &[f64]) -> Result<()> {
    out.write(name, |w| io::write_xy(w, io::SIGNAL_HEADER, t, y))
}

#[derive(Args, Debug)]
pub struct RabiArgs {}

pub fn rabi(ctx: &Ctx, _a: &RabiArgs, out: &mut OutputDir) -> Result<()> {
    let b = &ctx.config.dynamics.rabi;
    let cfg = RabiConfig {
        rabi_frequency_khz: b.rabi_frequency_khz,
        durations_s: linspace(b.t_stop_s, b.points),
        contrast: contrast_map(ctx, b.f_dark, b.f_bright)?,
    };
    let signal = rabi_signal(&cfg)?;
    write_signal(out, "rabi.csv", &cfg.durations_s, &signal)?;
    if let Some(shots) = b.shots {
        let sampled = poisson_sample(&signal, shots, ctx.seed)?;
        write_signal(out, "rabi_sampled.csv", &cfg.durations_s, &sampled)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RamseyArgs {
    /// Skip refitting the generated signal.
    #[arg(long)]
    no_fit: bool,
}

pub fn ramsey(ctx: &Ctx, a: &RamseyArgs, out: &mut OutputDir) -> Result<()> {
    let b = &ctx.config.dynamics.ramsey;
    let cfg = RamseyConfig {
        detuning_khz: b.detuning_khz,
        t2_star_s: b.t2_star_s,
        decay_exponent: b.decay_exponent,
        beat_splitting_khz: b.beat_splitting_khz,
        durations_s: linspace(b.t_stop_s, b.points),
        contrast: contrast_map(ctx, b.f_dark, b.f_bright)?,
    };
    let signal = ramsey_signal(&cfg)?;
    write_signal(out, "ramsey.csv", &cfg.durations_s, &signal)?;
    let fitted = match b.shots {
        Some(shots) => {
            let sampled = poisson_sample(&signal, shots, ctx.seed)?;
            write_signal(out, "ramsey_sampled.csv", &cfg.durations_s, &sampled)?;
            sampled
        }
        None => signal,
    };
    if !a.no_fit {
        let fit = fit_ramsey(&cfg.durations_s, &fitted, b.decay_exponent, b.beat_splitting_khz.is_some())?;
        out.write_json("ramsey_fit.json", &fit)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EndorArgs {}

pub fn endor(ctx: &Ctx, _a: &EndorArgs, out: &mut OutputDir) -> Result<()> {
    let e = &ctx.config.dynamics.endor;
    let b_t = ctx.config.endor_field()?;
    let opts = EndorOptions {
        baseline: e.baseline,
        gyromagnetic: e.gyromagnetic.clone(),
    };
    let spectrum = endor_spectrum(&e.bath, b_t, &e.grid(), &opts)?;
    let peaks = find_peaks(&spectrum.f_khz, &spectrum.contrast, e.baseline, e.peak_min_height);
    out.write("spectrum.csv", |w| io::write_xy(w, io::SPECTRUM_HEADER, &spectrum.f_khz, &spectrum.contrast))?;
    out.write("peaks.csv", |w| io::write_peaks(w, &peaks))?;
    out.write_json("lines.json", &spectrum.peaks)
}

#[derive(Args, Debug)]
pub struct MatchPeaksArgs {
    /// Peak list (`f_kHz`) or spectrum (`f_kHz,contrast`) CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tolerance_khz: Option<f64>,
}

pub fn match_peaks(ctx: &Ctx, a: &MatchPeaksArgs, out: &mut OutputDir) -> Result<()> {
    let e = &ctx.config.dynamics.endor;
    let b_t = ctx.config.endor_field()?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let header = text.lines().next().unwrap_or("").trim();
    let peaks = if header == io::SPECTRUM_HEADER.join(",") {
        let (f, c) = io::read_xy(text.as_bytes(), io::SPECTRUM_HEADER)?;
        find_peaks(&f, &c, e.baseline, e.peak_min_height)
    } else {
        io::read_peaks(text.as_bytes())?
    };
    let opts = MatchOptions {
        tolerance_khz: a.tolerance_khz.unwrap_or(e.match_tolerance_khz),
        max_azz_khz: e.max_azz_khz,
        gyromagnetic: e.gyromagnetic.clone(),
    };
    let assignments = core_match_peaks(&peaks, b_t, &opts)?;
    out.write_json("assignments.json", &assignments)
}
