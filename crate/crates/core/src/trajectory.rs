//! Quantum-jump trajectories and hidden-state recovery.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::readout::sim::poisson_draw;
use crate::readout::{ReadoutParams, SpinState};
use crate::rng;

pub const DEFAULT_BIN_REPETITIONS: usize = 100;

const JUMP_STREAM: u64 = 0;
const PHOTON_STREAM: u64 = 1;
const INITIAL_STREAM: u64 = 2;

/// Interval `[start_s, end_s)` spent in one hidden state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub state: SpinState,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub bin_duration_s: f64,
    pub bin_repetitions: usize,
    pub counts: Vec<u64>,
    pub true_states: Option<Vec<SpinState>>,
    pub seed: Option<u64>,
}

impl Trajectory {
    /// Wraps externally measured bin counts.
    pub fn from_counts(counts: Vec<u64>, bin_repetitions: usize, t_rep_s: f64) -> Result<Self> {
        let t = Self {
            bin_duration_s: bin_repetitions as f64 * t_rep_s,
            bin_repetitions,
            counts,
            true_states: None,
            seed: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_photons(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::invalid("trajectory has no bins"));
        }
        if self.bin_repetitions == 0 || !(self.bin_duration_s > 0.0 && self.bin_duration_s.is_finite()) {
            return Err(Error::invalid("trajectory bin duration must be positive"));
        }
        if let Some(s) = &self.true_states {
            if s.len() != self.counts.len() {
                return Err(Error::invalid("true_states length differs from counts"));
            }
        }
        Ok(())
    }
}

fn stationary_bright(params: &ReadoutParams) -> f64 {
    let total = params.gamma_bright_hz + params.gamma_dark_hz;
    if total == 0.0 {
        0.5
    } else {
        params.gamma_dark_hz / total
    }
}

/// Exact telegraph process on `[0, t_total)`: dwell times are exponential at
/// the rate of the occupied state.
pub fn telegraph<R: Rng + ?Sized>(
    params: &ReadoutParams,
    t_total: f64,
    initial: SpinState,
    rng: &mut R,
) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut state = initial;
    while t < t_total {
        let rate = params.rate(state);
        let dwell = if rate > 0.0 {
            Exp::new(rate).expect("positive rate").sample(rng)
        } else {
            f64::INFINITY
        };
        let end = (t + dwell).min(t_total);
        out.push(Segment {
            start_s: t,
            end_s: end,
            state,
        });
        t = end;
        state = state.flipped();
    }
    out
}

/// Exact jump-time simulation of a binned photon record. The initial state is
/// drawn from the stationary distribution.
pub fn simulate_trajectory(params: &ReadoutParams, t_total: f64, n_bin: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, INITIAL_STREAM);
    let initial = if rng.random::<f64>() < stationary_bright(params) {
        SpinState::Bright
    } else {
        SpinState::Dark
    };
    simulate_trajectory_from(params, t_total, n_bin, initial, seed)
}

pub fn simulate_trajectory_from(
    params: &ReadoutParams,
    t_total: f64,
    n_bin: usize,
    initial: SpinState,
    seed: u64,
) -> Result<Trajectory> {
    params.validate()?;
    if n_bin == 0 {
        return Err(Error::invalid("N_bin must be at least 1"));
    }
    let bin = n_bin as f64 * params.t_rep_s;
    if !t_total.is_finite() || t_total < bin {
        return Err(Error::invalid("T_total must cover at least one bin"));
    }
    let n_bins = ((t_total / bin) * (1.0 + 1e-12)).floor() as usize;
    let segments = telegraph(params, n_bins as f64 * bin, initial, &mut rng::stream(seed, JUMP_STREAM));
    let mut photons = rng::stream(seed, PHOTON_STREAM);

    let mut counts = Vec::with_capacity(n_bins);
    let mut states = Vec::with_capacity(n_bins);
    let mut seg = 0;
    for i in 0..n_bins {
        let (lo, hi) = (i as f64 * bin, (i + 1) as f64 * bin);
        let mut occ = [0.0; 2];
        while seg < segments.len() {
            let s = &segments[seg];
            let overlap = s.end_s.min(hi) - s.start_s.max(lo);
            if overlap > 0.0 {
                occ[s.state.index()] += overlap;
            }
            if s.end_s > hi {
                break;
            }
            seg += 1;
        }
        let mean = (occ[0] * params.lambda_bright + occ[1] * params.lambda_dark) / params.t_rep_s;
        counts.push(poisson_draw(mean, &mut photons));
        states.push(if occ[0] > occ[1] { SpinState::Bright } else { SpinState::Dark });
    }
    Ok(Trajectory {
        bin_duration_s: bin,
        bin_repetitions: n_bin,
        counts,
        true_states: Some(states),
        seed: Some(seed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterResult {
    /// `P(bright | counts up to and including bin t)`.
    pub filtered: Vec<f64>,
    /// `P(bright | all counts)`; absent from forward-only runs.
    pub smoothed: Option<Vec<f64>>,
    pub log_evidence: f64,
}

struct Hmm {
    prior: [f64; 2],
    /// `trans[i][j] = P(j at t+1 | i at t)`.
    trans: [[f64; 2]; 2],
    ln_mu: [f64; 2],
    mu: [f64; 2],
}

impl Hmm {
    fn new(traj: &Trajectory, params: &ReadoutParams) -> Result<Self> {
        params.validate()?;
        traj.validate()?;
        let expected = traj.bin_repetitions as f64 * params.t_rep_s;
        if ((traj.bin_duration_s - expected) / expected).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "bin duration {} s does not match N_bin·t_rep = {} s",
                traj.bin_duration_s, expected
            )));
        }
        let (g1, g0) = (params.gamma_bright_hz, params.gamma_dark_hz);
        let total = g1 + g0;
        let (pbd, pdb) = if total > 0.0 {
            let relax = -(-total * traj.bin_duration_s).exp_m1();
            (g1 / total * relax, g0 / total * relax)
        } else {
            (0.0, 0.0)
        };
        let pb = stationary_bright(params);
        let mu = [
            traj.bin_repetitions as f64 * params.lambda_bright,
            traj.bin_repetitions as f64 * params.lambda_dark,
        ];
        Ok(Self {
            prior: [pb, 1.0 - pb],
            trans: [[1.0 - pbd, pbd], [pdb, 1.0 - pdb]],
            ln_mu: [mu[0].ln(), mu[1].ln()],
            mu,
        })
    }

    /// Emission likelihoods scaled by a common factor, and the log of that factor.
    fn emission(&self, n: u64) -> Result<([f64; 2], f64)> {
        let ln: [f64; 2] = std::array::from_fn(|s| {
            if self.mu[s] == 0.0 {
                if n == 0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                n as f64 * self.ln_mu[s] - self.mu[s]
            }
        });
        let m = ln[0].max(ln[1]);
        if m == f64::NEG_INFINITY {
            return Err(Error::ZeroProbabilityCondition);
        }
        // The n! term is shared and restored in the evidence.
        let ln_fact = statrs::function::factorial::ln_factorial(n);
        Ok(([(ln[0] - m).exp(), (ln[1] - m).exp()], m - ln_fact))
    }
}

fn forward(hmm: &Hmm, counts: &[u64]) -> Result<(Vec<f64>, f64)> {
    let mut filtered = Vec::with_capacity(counts.len());
    let mut log_evidence = 0.0;
    let mut pred = hmm.prior;
    for &n in counts {
        let (e, ln_scale) = hmm.emission(n)?;
        let a = [pred[0] * e[0], pred[1] * e[1]];
        let c = a[0] + a[1];
        if c.is_nan() || c <= 0.0 {
            return Err(Error::ZeroProbabilityCondition);
        }
        log_evidence += c.ln() + ln_scale;
        let post = [a[0] / c, a[1] / c];
        filtered.push(post[0]);
        pred = [
            post[0] * hmm.trans[0][0] + post[1] * hmm.trans[1][0],
            post[0] * hmm.trans[0][1] + post[1] * hmm.trans[1][1],
        ];
    }
    Ok((filtered, log_evidence))
}

/// Forward recursion with per-step normalization.
pub fn hmm_filter(traj: &Trajectory, params: &ReadoutParams) -> Result<FilterResult> {
    let hmm = Hmm::new(traj, params)?;
    let (filtered, log_evidence) = forward(&hmm, &traj.counts)?;
    Ok(FilterResult {
        filtered,
        smoothed: None,
        log_evidence,
    })
}

/// Forward-backward smoothing.
pub fn hmm_smooth(traj: &Trajectory, params: &ReadoutParams) -> Result<FilterResult> {
    let hmm = Hmm::new(traj, params)?;
    let (filtered, log_evidence) = forward(&hmm, &traj.counts)?;
    let t_len = traj.counts.len();
    let mut smoothed = vec![0.0; t_len];
    smoothed[t_len - 1] = filtered[t_len - 1];
    let mut beta = [1.0, 1.0];
    for t in (0..t_len - 1).rev() {
        let (e, _) = hmm.emission(traj.counts[t + 1])?;
        let w = [e[0] * beta[0], e[1] * beta[1]];
        let b = [
            hmm.trans[0][0] * w[0] + hmm.trans[0][1] * w[1],
            hmm.trans[1][0] * w[0] + hmm.trans[1][1] * w[1],
        ];
        let s = b[0] + b[1];
        beta = [b[0] / s, b[1] / s];
        let f = filtered[t];
        let num = f * beta[0];
        smoothed[t] = num / (num + (1.0 - f) * beta[1]);
    }
    Ok(FilterResult {
        filtered,
        smoothed: Some(smoothed),
        log_evidence,
    })
}

/// Thresholded MAP path from the smoothed posteriors when present, else the
/// filtered ones. A posterior exactly at the threshold reads dark.
pub fn assign_states(fr: &FilterResult, p_threshold: f64) -> Vec<SpinState> {
    let post = fr.smoothed.as_ref().unwrap_or(&fr.filtered);
    post.iter()
        .map(|&p| if p > p_threshold { SpinState::Bright } else { SpinState::Dark })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DwellEstimate {
    pub mean_dwell_s: f64,
    pub dwell_count: usize,
    pub rate_hz: f64,
    pub rate_se_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DwellStats {
    pub jumps: usize,
    pub bright: DwellEstimate,
    pub dark: DwellEstimate,
}

/// Lengths in bins of the maximal constant runs of `path`.
pub fn runs(path: &[SpinState]) -> Vec<(SpinState, usize)> {
    let mut out: Vec<(SpinState, usize)> = Vec::new();
    for &s in path {
        match out.last_mut() {
            Some((last, n)) if *last == s => *n += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Escape rates from the mean dwell in each state. The first and last runs
/// are censored and left out.
pub fn dwell_time_rates(path: &[SpinState], bin_duration_s: f64) -> Result<DwellStats> {
    if bin_duration_s.is_nan() || bin_duration_s <= 0.0 {
        return Err(Error::invalid("bin duration must be positive"));
    }
    let r = runs(path);
    let jumps = r.len().saturating_sub(1);
    if jumps < 2 {
        return Err(Error::InsufficientJumps(format!("{jumps} jumps in path")));
    }
    let interior = &r[1..r.len() - 1];
    let estimate = |state: SpinState| -> Result<DwellEstimate> {
        let dwells: Vec<usize> = interior.iter().filter(|(s, _)| *s == state).map(|(_, n)| *n).collect();
        if dwells.is_empty() {
            return Err(Error::InsufficientJumps(format!("no complete {state} dwell")));
        }
        let mean = dwells.iter().sum::<usize>() as f64 / dwells.len() as f64 * bin_duration_s;
        let rate = 1.0 / mean;
        Ok(DwellEstimate {
            mean_dwell_s: mean,
            dwell_count: dwells.len(),
            rate_hz: rate,
            rate_se_hz: rate / (dwells.len() as f64).sqrt(),
        })
    };
    Ok(DwellStats {
        jumps,
        bright: estimate(SpinState::Bright)?,
        dark: estimate(SpinState::Dark)?,
    })
}

/// Fraction of bins where `path` disagrees with `truth`.
pub fn error_rate(path: &[SpinState], truth: &[SpinState]) -> f64 {
    let wrong = path.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / path.len().min(truth.len()).max(1) as f64
}
