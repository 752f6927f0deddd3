//! Acceptance suite. Every criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use repread_core::alt::{fit_alt_rates, simulate_alt, NuclearState, UniformSwitching};
use repread_core::config::load_config;
use repread_core::dynamics::{
    endor_spectrum, find_peaks, fit_ramsey, match_peaks, poisson_sample, ramsey_signal, ContrastMap,
    EndorOptions, MatchOptions, RamseyConfig,
};
use repread_core::io;
use repread_core::readout::{
    count_distribution, fit_rates, simulate_counts, FitMask, FitOptions, ReadoutParams, SpinState,
};
use repread_core::spin::{
    build_hamiltonian, eigen_levels, nuclear_transition_frequency, ElectronProjection, HyperfineTensor, Manifold,
};
use repread_core::trajectory::{
    assign_states, dwell_time_rates, error_rate, hmm_filter, hmm_smooth, simulate_trajectory, Trajectory,
};
use statrs::distribution::{Discrete, Poisson};

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/calibration.json")
}

fn repread(out: &Path, args: &[&str]) -> Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_repread"))
        .arg("--config")
        .arg(example_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()?;
    if !status.status.success() {
        bail!(
            "repread {} exited with {}: {}",
            args.join(" "),
            status.status,
            String::from_utf8_lossy(&status.stderr)
        );
    }
    Ok(())
}

fn calibrated_params(n: usize) -> Result<ReadoutParams> {
    let mut p = load_config(example_config())?.config.readout_params()?;
    p.repetitions = n;
    Ok(p)
}

fn rel(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn c1() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    repread(dir.path(), &["fidelity-scan", "--n", "250", "--threshold", "3"])?;
    let points = io::read_fidelity_points(std::fs::File::open(dir.path().join("fidelity_scan.csv"))?)?;
    let p = points
        .iter()
        .find(|p| p.repetitions == 250 && p.n_bright_min == 3)
        .ok_or_else(|| anyhow!("no N = 250 row"))?;
    verdict(
        (p.f_avg - 0.92).abs() <= 0.03,
        format!("F_avg(N=250, n_th=3) = {:.4}, target 0.92 ± 0.03", p.f_avg),
    )
}

fn c2() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    repread(dir.path(), &["fidelity-scan"])?;
    let front = io::read_fidelity_points(std::fs::File::open(dir.path().join("pareto.csv"))?)?;
    let in_band = front.iter().filter(|p| (0.05..=0.20).contains(&p.eta));
    let best_band = in_band.map(|p| p.f_avg).fold(f64::NAN, f64::max);
    let best = front
        .iter()
        .max_by(|a, b| a.f_avg.total_cmp(&b.f_avg))
        .ok_or_else(|| anyhow!("empty Pareto front"))?;
    let band = if best_band.is_nan() {
        "no Pareto point with η in [0.05, 0.20]".to_string()
    } else {
        format!("best F_avg with η in [0.05, 0.20] = {best_band:.4}")
    };
    verdict(
        best_band >= 0.995,
        format!(
            "{band} (target F_avg ≥ 0.995); best overall {:.4} at η = {:.3}, N = {}",
            best.f_avg, best.eta, best.repetitions
        ),
    )
}

fn c3() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    repread(dir.path(), &["prep-fidelity", "--n", "300", "--count", "0"])?;
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("prep_fidelity.json"))?)?;
    let p_dark = v["p_dark"].as_f64().ok_or_else(|| anyhow!("p_dark missing"))?;
    verdict(
        (p_dark - 0.99).abs() <= 0.01,
        format!("P(dark | n = 0, N = 300) = {p_dark:.4}, target 0.99 ± 0.01"),
    )
}

fn c4() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    repread(dir.path(), &["alt-fidelity-scan"])?;
    let table = io::read_table(
        std::fs::File::open(dir.path().join("alt_pareto.csv"))?,
        &[io::ALT_FIDELITY_HEADER],
    )?;
    let mut best_band = f64::NAN;
    let mut hit = None;
    for (_, rec) in &table.rows {
        let f_avg: f64 = rec[5].parse()?;
        let eta: f64 = rec[6].parse()?;
        if (0.05..=0.10).contains(&eta) {
            best_band = best_band.max(f_avg);
            if (f_avg - 0.98).abs() <= 0.01 && hit.is_none() {
                hit = Some((rec[0].to_string(), f_avg, eta));
            }
        }
    }

    let params = load_config(example_config())?.config.alt_params()?;
    let base = &params.base;
    let trials = 100_000;
    let data = vec![
        (simulate_alt(&params, NuclearState::Up, trials, 41)?, NuclearState::Up),
        (simulate_alt(&params, NuclearState::Down, trials, 42)?, NuclearState::Down),
    ];
    let init = UniformSwitching {
        gamma_up_hz: base.gamma_bright_hz,
        gamma_down_hz: base.gamma_dark_hz,
        lambda_bright: base.lambda_bright,
        lambda_dark: base.lambda_dark,
        t_rep_s: base.t_rep_s,
    };
    let fit = fit_alt_rates(&data, &init)?;
    let half = 0.5 * base.gamma_bright_hz;
    let (up, down) = (fit.model.gamma_up_hz, fit.model.gamma_down_hz);
    let rates_ok = rel(up, half) <= 0.20 && rel(down, half) <= 0.20;
    let band = match &hit {
        Some((pairs, f, eta)) => format!("F_avg = {f:.4} at η = {eta:.3}, N_pairs = {pairs}"),
        None => format!("no point with F_avg = 0.98 ± 0.01 in η [0.05, 0.10] (best {best_band:.4})"),
    };
    verdict(
        hit.is_some() && rates_ok,
        format!(
            "{band}; refit γ_up = {up:.2} Hz, γ_down = {down:.2} Hz vs γ_bright/2 = {half:.1} Hz (±20%)"
        ),
    )
}

fn total_variation(params: &ReadoutParams, s0: SpinState, trials: u64, seed: u64) -> Result<f64> {
    let pmf = count_distribution(params, s0)?;
    let hist = simulate_counts(params, s0, trials, seed)?;
    let n = pmf.marginal.len().max(hist.counts.len());
    let total = hist.trials() as f64;
    let tv = (0..n)
        .map(|k| {
            let emp = hist.counts.get(k).copied().unwrap_or(0) as f64 / total;
            (pmf.marginal.get(k).copied().unwrap_or(0.0) - emp).abs()
        })
        .sum::<f64>();
    Ok(0.5 * tv)
}

fn c5() -> Result<Verdict> {
    let base = calibrated_params(250)?;
    let sets = [
        ("base N=250", base.clone()),
        ("base N=100", base.with_repetitions(100)),
        (
            "no switching",
            ReadoutParams {
                gamma_bright_hz: 0.0,
                gamma_dark_hz: 0.0,
                ..base.with_repetitions(300)
            },
        ),
        (
            "fast switching",
            ReadoutParams {
                gamma_bright_hz: 400.0,
                gamma_dark_hz: 150.0,
                ..base.clone()
            },
        ),
        (
            "bright background",
            ReadoutParams {
                gamma_bright_hz: 50.0,
                gamma_dark_hz: 20.0,
                lambda_bright: 0.05,
                lambda_dark: 0.01,
                ..base.with_repetitions(120)
            },
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, (name, p)) in sets.iter().enumerate() {
        for s0 in SpinState::ALL {
            let tv = total_variation(p, s0, 1_000_000, 500 + i as u64)?;
            worst = worst.max(tv);
            parts.push(format!("{name}/{s0} {tv:.1e}"));
        }
    }
    verdict(worst < 5e-3, format!("max TV = {worst:.2e} (< 5e-3): {}", parts.join(", ")))
}

fn c6() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let bright = d.join("bright");
    let dark = d.join("dark");
    repread(&bright, &["--seed", "61", "simulate-histogram", "--state", "bright", "--trials", "100000"])?;
    repread(&dark, &["--seed", "62", "simulate-histogram", "--state", "dark", "--trials", "100000"])?;
    let spec = |s: &str, p: &Path| format!("{s}:250:{}", p.join("histogram.csv").display());
    repread(
        &d.join("fit"),
        &["fit-rates", "--hist", &spec("bright", &bright), "--hist", &spec("dark", &dark)],
    )?;
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("fit/fit.json"))?)?;
    let g1 = v["params"]["gamma_bright_hz"].as_f64().context("gamma_bright_hz")?;
    let g0 = v["params"]["gamma_dark_hz"].as_f64().context("gamma_dark_hz")?;
    verdict(
        rel(g1, 100.0) <= 0.15 && rel(g0, 8.0) <= 0.15,
        format!("γ₁ = {g1:.2} Hz (100 ± 15%), γ₀ = {g0:.3} Hz (8 ± 15%)"),
    )
}

fn c7() -> Result<Verdict> {
    let params = calibrated_params(250)?;
    let traj = simulate_trajectory(&params, 1e4, 100, 77)?;
    let fr = hmm_smooth(&traj, &params)?;
    let path = assign_states(&fr, 0.5);
    let truth = traj.true_states.as_ref().context("simulated truth")?;
    let err = error_rate(&path, truth);
    let stats = dwell_time_rates(&path, traj.bin_duration_s)?;
    let g1 = stats.bright.rate_hz;
    let g0 = stats.dark.rate_hz;

    // The histogram route on data from the same model, for the loop-closure
    // agreement check (within 25%). Reported alongside, not part of the verdict.
    let data = vec![
        (simulate_counts(&params, SpinState::Bright, 100_000, 71)?, SpinState::Bright),
        (simulate_counts(&params, SpinState::Dark, 100_000, 72)?, SpinState::Dark),
    ];
    let fit = fit_rates(&data, &params, FitMask::rates_only(), &FitOptions::default())?;
    let (h1, h0) = (fit.params.gamma_bright_hz, fit.params.gamma_dark_hz);
    let agree = rel(g1, h1) <= 0.25 && rel(g0, h0) <= 0.25;

    verdict(
        rel(g1, 100.0) <= 0.15 && rel(g0, 8.0) <= 0.25 && err < 0.02,
        format!(
            "{} bins: γ₁ = {g1:.2} Hz ({:+.1}%, tol 15%), γ₀ = {g0:.3} Hz ({:+.1}%, tol 25%), path error {:.3}% (< 2%); \
             histogram route γ₁ = {h1:.2}, γ₀ = {h0:.3} Hz, dwell/histogram agreement within 25%: {}",
            traj.len(),
            100.0 * (g1 / 100.0 - 1.0),
            100.0 * (g0 / 8.0 - 1.0),
            100.0 * err,
            if agree { "yes" } else { "no" }
        ),
    )
}

/// Sum over all hidden paths of the joint probability of path and counts.
fn brute_force_log_evidence(traj: &Trajectory, p: &ReadoutParams) -> f64 {
    let n = traj.counts.len();
    let (gb, gd) = (p.gamma_bright_hz, p.gamma_dark_hz);
    let rate = gb + gd;
    let decay = (-rate * traj.bin_duration_s).exp();
    // Two-state generator exponentiated in closed form; index 0 is bright.
    let trans = [
        [(gd + gb * decay) / rate, gb * (1.0 - decay) / rate],
        [gd * (1.0 - decay) / rate, (gb + gd * decay) / rate],
    ];
    let prior = [gd / rate, gb / rate];
    let m = traj.bin_repetitions as f64;
    let emit = [Poisson::new(m * p.lambda_bright).unwrap(), Poisson::new(m * p.lambda_dark).unwrap()];
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        let s = |t: usize| ((mask >> t) & 1) as usize;
        let mut w = prior[s(0)] * emit[s(0)].pmf(traj.counts[0]);
        for t in 1..n {
            w *= trans[s(t - 1)][s(t)] * emit[s(t)].pmf(traj.counts[t]);
        }
        total += w;
    }
    total.ln()
}

fn c8() -> Result<Verdict> {
    let mut rng = repread_core::rng::stream(88, 0);
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let p = ReadoutParams {
            gamma_bright_hz: rng.random_range(5.0..500.0),
            gamma_dark_hz: rng.random_range(1.0..100.0),
            lambda_bright: rng.random_range(0.005..0.05),
            lambda_dark: rng.random_range(0.0005..0.005),
            t_rep_s: 17e-6,
            repetitions: 250,
        };
        let n_bin = rng.random_range(20..200);
        let traj = simulate_trajectory(&p, 12.0 * n_bin as f64 * p.t_rep_s, n_bin, 800 + draw)?;
        if traj.len() != 12 {
            bail!("draw {draw} produced {} bins", traj.len());
        }
        let fast = hmm_filter(&traj, &p)?.log_evidence;
        let exact = brute_force_log_evidence(&traj, &p);
        worst = worst.max(rel(fast, exact));
    }
    verdict(worst <= 1e-9, format!("max relative log-evidence error over 20 draws = {worst:.2e} (≤ 1e-9)"))
}

fn c9() -> Result<Verdict> {
    let cfg = load_config(example_config())?.config;
    let spin = cfg.spin()?;
    let sys = spin.system();
    let tensor = spin.tensor();
    let h = build_hamiltonian(&sys, &tensor, Manifold::Ground)?;
    let asym = (h - h.transpose()).amax();
    let symmetric = asym <= f64::EPSILON * h.amax();
    let levels = eigen_levels(&h);
    let sum: f64 = levels.levels.iter().map(|l| l.energy_mhz).sum();
    let trace_err = (sum - h.trace()).abs() / h.trace().abs().max(1.0);

    let larmor = sys.gamma_n_mhz_per_t * sys.b_t;
    let secular = |ms: f64| (ms * tensor.a_par() + larmor).abs();
    let f_half = nuclear_transition_frequency(&levels, ElectronProjection::PlusHalf)?;
    let f_three = nuclear_transition_frequency(&levels, ElectronProjection::PlusThreeHalves)?;
    let dev_half = rel(f_half, secular(0.5));
    let dev_step = rel(f_three - f_half, tensor.a_par());

    let diag = HyperfineTensor::new(0.0, 0.0, tensor.a_zz);
    let diag_levels = eigen_levels(&build_hamiltonian(&sys, &diag, Manifold::Ground)?);
    let diag_err = ElectronProjection::ALL
        .iter()
        .map(|&ms| {
            nuclear_transition_frequency(&diag_levels, ms).map(|f| (f - secular(ms.value())).abs())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let f_minus = nuclear_transition_frequency(&levels, ElectronProjection::MinusHalf)?;

    verdict(
        symmetric && trace_err <= 1e-9 && dev_half <= 0.01 && dev_step <= 0.01 && diag_err <= 1e-9,
        format!(
            "max|H−Hᵀ| = {asym:.1e}, trace error {trace_err:.1e}, m_s=+1/2: {f_half:.4} MHz vs secular {:.4} ({:.2}%), \
             f(+3/2)−f(+1/2) vs A_par {:.2}%, A_perp=0 max error {diag_err:.1e} MHz; m_s=−1/2 deviation {:.2}% (informational)",
            secular(0.5),
            100.0 * dev_half,
            100.0 * dev_step,
            100.0 * rel(f_minus, secular(-0.5)),
        ),
    )
}

fn c10() -> Result<Verdict> {
    let cfg = load_config(example_config())?.config;
    let b = &cfg.dynamics.ramsey;
    let beat = b.beat_splitting_khz.context("example config has a beat splitting")?;
    let durations: Vec<f64> = (0..b.points).map(|i| b.t_stop_s * i as f64 / (b.points - 1) as f64).collect();
    let rc = RamseyConfig {
        detuning_khz: b.detuning_khz,
        t2_star_s: 7.4e-3,
        decay_exponent: b.decay_exponent,
        beat_splitting_khz: Some(beat),
        durations_s: durations.clone(),
        contrast: ContrastMap::from_fidelities(0.95, 0.9)?,
    };
    let signal = ramsey_signal(&rc)?;
    let noisy = poisson_sample(&signal, b.shots.unwrap_or(2000.0), 1010)?;
    let fit = fit_ramsey(&durations, &noisy, b.decay_exponent, true)?;
    let fb = fit.beat_splitting_khz.unwrap_or(f64::NAN);
    verdict(
        rel(fit.t2_star_s, 7.4e-3) <= 0.05 && rel(fb, beat) <= 0.02,
        format!(
            "T₂* = {:.3} ms (7.4 ± 5%), beat = {fb:.4} kHz ({beat} ± 2%)",
            1e3 * fit.t2_star_s
        ),
    )
}

fn c11() -> Result<Verdict> {
    let cfg = load_config(example_config())?.config;
    let e = &cfg.dynamics.endor;
    let b_t = cfg.endor_field()?;
    let opts = EndorOptions {
        baseline: e.baseline,
        gyromagnetic: e.gyromagnetic.clone(),
    };
    let spectrum = endor_spectrum(&e.bath, b_t, &e.grid(), &opts)?;
    let peaks = find_peaks(&spectrum.f_khz, &spectrum.contrast, e.baseline, e.peak_min_height);
    let mopts = MatchOptions {
        tolerance_khz: e.match_tolerance_khz,
        max_azz_khz: e.max_azz_khz,
        gyromagnetic: e.gyromagnetic.clone(),
    };
    let assigned = match_peaks(&peaks, b_t, &mopts)?;
    let mut missing = Vec::new();
    let mut worst: f64 = 0.0;
    for spin in &e.bath {
        let half_width = 0.5 * spin.linewidth_khz();
        let found = assigned.iter().find(|a| {
            a.species == Some(spin.species)
                && a.peaks_khz.len() == 2
                && a.azz_khz.is_some_and(|azz| (azz - spin.azz_khz.abs()).abs() <= half_width)
        });
        match found {
            Some(a) => worst = worst.max((a.azz_khz.unwrap() - spin.azz_khz.abs()).abs()),
            None => missing.push(format!("{} {} kHz", spin.species, spin.azz_khz)),
        }
    }
    let si = e.bath.iter().filter(|s| s.species.to_string() == "Si29").count();
    let extra = assigned.len() - (e.bath.len() - missing.len());
    verdict(
        missing.is_empty() && extra == 0,
        format!(
            "{} peaks ({} Si29 + {} C13 lines), {} of {} spins recovered, max |ΔA_zz| = {worst:.2} kHz, {extra} spurious{}",
            peaks.len(),
            2 * si,
            2 * (e.bath.len() - si),
            e.bath.len() - missing.len(),
            e.bath.len(),
            if missing.is_empty() { String::new() } else { format!("; missing {}", missing.join(", ")) }
        ),
    )
}

type Criterion = (&'static str, &'static str, f64, fn() -> Result<Verdict>);

const CRITERIA: &[Criterion] = &[
    ("C1", "fidelity reproduction", 10.0, c1),
    ("C2", "high-fidelity postselection", 30.0, c2),
    ("C3", "preparation by measurement", 5.0, c3),
    ("C4", "alternating scheme", 60.0, c4),
    ("C5", "count distribution vs Monte Carlo", 60.0, c5),
    ("C6", "rate-fit round trip", 120.0, c6),
    ("C7", "trajectory loop closure", 120.0, c7),
    ("C8", "small-instance HMM oracle", 10.0, c8),
    ("C9", "spin-model checks", 1.0, c9),
    ("C10", "Ramsey refit", 10.0, c10),
    ("C11", "ENDOR round trip", 5.0, c11),
];

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut ran, mut failed) = (0, 0);
    for &(id, name, budget_s, check) in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(v) => (v.pass && elapsed < budget_s, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id} {name}: {detail} [{elapsed:.2} s, budget {budget_s} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
