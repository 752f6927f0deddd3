//! Single-sided repetitive readout.
//!
//! A readout block consists of `N` repetitions. In every repetition the hidden
//! nuclear state emits `Poisson(λ_state)` photons and may then switch, with
//! probability `1 − exp(−γ_state·t_rep)`. Switching is only allowed between
//! repetitions.

mod fidelity;
mod fit;
pub(crate) mod sim;

pub use fidelity::{
    fidelity_from_pmfs, fidelity_scan, pareto_front, policy_grid, preparation_fidelity,
    readout_fidelity, CountCondition, FidelityPoint, PreparationPosterior, ThresholdPolicy,
};
pub use fit::{fit_rates, log_likelihood, FitMask, FitOptions, ParamWidths, RateFit};
pub use sim::{
    sample_block, simulate_counts, simulate_counts_chunked, two_point_histogram, TwoPointResult,
    TwoPointSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poisson;

/// Default time between the end of one laser window and the start of the next.
pub const DEFAULT_GATE_OVERHEAD_S: f64 = 2e-6;
/// Default background emission of the dark state, photons per repetition.
pub const DEFAULT_LAMBDA_DARK: f64 = 0.001;
/// Tail mass allowed to fall outside a truncated count support.
pub const TRUNCATION_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpinState {
    Bright,
    Dark,
}

impl SpinState {
    pub const ALL: [SpinState; 2] = [SpinState::Bright, SpinState::Dark];

    pub fn index(self) -> usize {
        match self {
            SpinState::Bright => 0,
            SpinState::Dark => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            SpinState::Bright => SpinState::Dark,
            SpinState::Dark => SpinState::Bright,
        }
    }
}

impl std::str::FromStr for SpinState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bright" | "1" => Ok(SpinState::Bright),
            "dark" | "0" => Ok(SpinState::Dark),
            other => Err(Error::invalid(format!("unknown spin state `{other}`"))),
        }
    }
}

impl std::fmt::Display for SpinState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpinState::Bright => "bright",
            SpinState::Dark => "dark",
        })
    }
}

/// Calibrated stochastic model of one readout block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    /// Decay rate out of the bright state, Hz.
    pub gamma_bright_hz: f64,
    /// Decay rate out of the dark state, Hz.
    pub gamma_dark_hz: f64,
    /// Mean detected photons per repetition in the bright state.
    pub lambda_bright: f64,
    /// Mean detected photons per repetition in the dark state.
    pub lambda_dark: f64,
    /// Duration of one repetition (laser window plus gate overhead), s.
    pub t_rep_s: f64,
    /// Repetitions per block.
    pub repetitions: usize,
}

impl ReadoutParams {
    /// γ₀ = 8 Hz, γ₁ = 100 Hz, λ_b = 0.02 at a 15 µs laser window plus the
    /// default gate overhead and dark background.
    pub fn calibrated(repetitions: usize) -> Self {
        Self {
            gamma_bright_hz: 100.0,
            gamma_dark_hz: 8.0,
            lambda_bright: 0.02,
            lambda_dark: DEFAULT_LAMBDA_DARK,
            t_rep_s: 15e-6 + DEFAULT_GATE_OVERHEAD_S,
            repetitions,
        }
    }

    pub fn with_repetitions(&self, repetitions: usize) -> Self {
        Self {
            repetitions,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma_bright_hz,
            self.gamma_dark_hz,
            self.lambda_bright,
            self.lambda_dark,
            self.t_rep_s,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("readout parameters must be finite"));
        }
        if self.gamma_bright_hz < 0.0 || self.gamma_dark_hz < 0.0 {
            return Err(Error::invalid("switching rates must be non-negative"));
        }
        if self.lambda_dark < 0.0 || self.lambda_bright < self.lambda_dark {
            return Err(Error::invalid(
                "emission means must satisfy lambda_bright >= lambda_dark >= 0",
            ));
        }
        if self.t_rep_s <= 0.0 {
            return Err(Error::invalid("t_rep must be positive"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("at least one repetition is required"));
        }
        Ok(())
    }

    pub fn rate(&self, state: SpinState) -> f64 {
        match state {
            SpinState::Bright => self.gamma_bright_hz,
            SpinState::Dark => self.gamma_dark_hz,
        }
    }

    pub fn emission(&self, state: SpinState) -> f64 {
        match state {
            SpinState::Bright => self.lambda_bright,
            SpinState::Dark => self.lambda_dark,
        }
    }

    /// Probability of leaving `state` between two repetitions.
    pub fn switch_probability(&self, state: SpinState) -> f64 {
        -(-self.rate(state) * self.t_rep_s).exp_m1()
    }
}

/// Row-stochastic per-repetition transition matrix indexed
/// `[from][to]` with bright = 0, dark = 1.
pub fn per_rep_transition(params: &ReadoutParams) -> [[f64; 2]; 2] {
    let out_b = params.switch_probability(SpinState::Bright);
    let out_d = params.switch_probability(SpinState::Dark);
    [[1.0 - out_b, out_b], [out_d, 1.0 - out_d]]
}

/// Distribution of the photon total over one readout block.
#[derive(Clone, Debug, PartialEq)]
pub struct CountPmf {
    pub initial: SpinState,
    pub repetitions: usize,
    /// `joint[s][n] = P(final state s, total n)`.
    pub joint: [Vec<f64>; 2],
    pub marginal: Vec<f64>,
}

impl CountPmf {
    pub fn n_max(&self) -> usize {
        self.marginal.len() - 1
    }

    pub fn prob(&self, n: u64) -> f64 {
        self.marginal.get(n as usize).copied().unwrap_or(0.0)
    }

    /// `P(n ≤ k)`.
    pub fn cdf(&self, k: u64) -> f64 {
        let end = (k as usize + 1).min(self.marginal.len());
        self.marginal[..end].iter().sum()
    }

    /// `P(n ≥ k)`.
    pub fn upper_tail(&self, k: u64) -> f64 {
        let start = (k as usize).min(self.marginal.len());
        self.marginal[start..].iter().sum()
    }
}

/// Support limit used by [`count_distribution`]: twice the `1e-9` upper
/// quantile of the photon total with no switching out of the bright state.
pub fn auto_n_max(params: &ReadoutParams) -> usize {
    let mu = params.repetitions as f64 * params.lambda_bright;
    (2 * poisson::upper_quantile(mu, TRUNCATION_EPS)).max(4)
}

/// Exact pmf of the photon total by dynamic programming over the joint
/// (hidden state, cumulative count) lattice.
pub fn count_distribution(params: &ReadoutParams, s0: SpinState) -> Result<CountPmf> {
    count_distribution_truncated(params, s0, auto_n_max(params))
}

pub fn count_distribution_truncated(
    params: &ReadoutParams,
    s0: SpinState,
    n_max: usize,
) -> Result<CountPmf> {
    params.validate()?;
    let len = n_max + 1;
    let emit = [
        poisson::pmf_table(params.lambda_bright, 1e-18),
        poisson::pmf_table(params.lambda_dark, 1e-18),
    ];
    let t = per_rep_transition(params);

    let mut cur = [vec![0.0; len], vec![0.0; len]];
    cur[s0.index()][0] = 1.0;
    let mut emitted = [vec![0.0; len], vec![0.0; len]];
    // Highest occupied count, so early repetitions stay cheap.
    let mut top = 0usize;
    for _ in 0..params.repetitions {
        let new_top = (top + emit[0].len().max(emit[1].len()) - 1).min(n_max);
        for s in 0..2 {
            convolve_truncated(&cur[s][..=top], &emit[s], &mut emitted[s][..=new_top]);
        }
        top = new_top;
        for n in 0..=top {
            let (b, d) = (emitted[0][n], emitted[1][n]);
            cur[0][n] = b * t[0][0] + d * t[1][0];
            cur[1][n] = b * t[0][1] + d * t[1][1];
        }
    }

    let total: f64 = cur.iter().flat_map(|v| v.iter()).sum();
    let lost = 1.0 - total;
    if lost > TRUNCATION_EPS {
        return Err(Error::Truncation {
            limit: n_max,
            lost_mass: lost,
        });
    }
    let scale = 1.0 / total;
    for v in cur.iter_mut() {
        v.iter_mut().for_each(|p| *p *= scale);
    }
    let marginal = cur[0].iter().zip(&cur[1]).map(|(b, d)| b + d).collect();
    Ok(CountPmf {
        initial: s0,
        repetitions: params.repetitions,
        joint: cur,
        marginal,
    })
}

/// `out[n] = Σ_j kernel[j]·src[n − j]`, dropping mass beyond `out.len()`.
fn convolve_truncated(src: &[f64], kernel: &[f64], out: &mut [f64]) {
    for (n, o) in out.iter_mut().enumerate() {
        let j_lo = n.saturating_sub(src.len() - 1);
        let j_hi = n.min(kernel.len() - 1);
        let mut acc = 0.0;
        for j in j_lo..=j_hi {
            acc += kernel[j] * src[n - j];
        }
        *o = acc;
    }
}

/// Empirical photon-count histogram.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Histogram {
    /// `counts[n]` is the number of trials with total `n`.
    pub counts: Vec<u64>,
    /// Repetitions per block behind each trial, when known.
    pub repetitions: Option<usize>,
    pub seed: Option<u64>,
    /// Free-form description of any conditioning applied.
    pub conditioning: Option<String>,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self {
            counts,
            ..Default::default()
        }
    }

    pub fn trials(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_count(&self) -> Option<usize> {
        self.counts.iter().rposition(|&c| c > 0)
    }

    pub fn record(&mut self, n: u64) {
        let n = n as usize;
        if n >= self.counts.len() {
            self.counts.resize(n + 1, 0);
        }
        self.counts[n] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn mean(&self) -> f64 {
        let trials = self.trials();
        if trials == 0 {
            return 0.0;
        }
        let s: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(n, &c)| n as f64 * c as f64)
            .sum();
        s / trials as f64
    }

    pub fn normalized(&self) -> Vec<f64> {
        let t = self.trials() as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}
