//! Monte-Carlo sampling of readout blocks.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use super::{Histogram, ReadoutParams, SpinState};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Stream offset for draws that must not perturb the physics streams.
const AUX_STREAM: u64 = 1 << 40;

pub(crate) fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive Poisson mean");
    d.sample(rng) as u64
}

/// Number of failures before the first success of a Bernoulli(p) sequence,
/// `None` when `p = 0`.
pub(crate) fn geometric_draw<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Option<u64> {
    if p <= 0.0 {
        return None;
    }
    if p >= 1.0 {
        return Some(0);
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    let g = (u.ln() / (-p).ln_1p()).floor();
    Some(if g >= u64::MAX as f64 { u64::MAX } else { g as u64 })
}

/// Samples the photon total of one block of `params.repetitions`
/// repetitions, advancing `state` to the state after the block.
///
/// Runs of repetitions spent in one state are drawn whole: the run length is
/// geometric and its photons are a single Poisson draw, which has the same
/// law as per-repetition sampling.
pub fn sample_block<R: Rng + ?Sized>(
    params: &ReadoutParams,
    state: &mut SpinState,
    rng: &mut R,
) -> u64 {
    let mut remaining = params.repetitions as u64;
    let mut total = 0;
    while remaining > 0 {
        let stay = geometric_draw(params.switch_probability(*state), rng).map(|g| g.saturating_add(1));
        let (run, switched) = match stay {
            Some(k) if k <= remaining => (k, true),
            _ => (remaining, false),
        };
        total += poisson_draw(params.emission(*state) * run as f64, rng);
        remaining -= run;
        if switched {
            *state = state.flipped();
        }
    }
    total
}

pub fn simulate_counts(
    params: &ReadoutParams,
    s0: SpinState,
    trials: u64,
    seed: u64,
) -> Result<Histogram> {
    simulate_counts_chunked(params, s0, trials, seed, rng::DEFAULT_CHUNK)
}

/// As [`simulate_counts`] with an explicit chunk size. Output depends only on
/// `(seed, chunk)`, never on the number of worker threads.
pub fn simulate_counts_chunked(
    params: &ReadoutParams,
    s0: SpinState,
    trials: u64,
    seed: u64,
    chunk: u64,
) -> Result<Histogram> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let parts: Vec<Histogram> = rng::chunks(trials, chunk)
        .into_par_iter()
        .map(|(stream, n)| {
            let mut rng = rng::stream(seed, stream);
            let mut h = Histogram::default();
            for _ in 0..n {
                let mut state = s0;
                h.record(sample_block(params, &mut state, &mut rng));
            }
            h
        })
        .collect();
    let mut hist = Histogram {
        repetitions: Some(params.repetitions),
        seed: Some(seed),
        conditioning: Some(format!("initial={s0}")),
        ..Default::default()
    };
    for p in &parts {
        hist.merge(p);
    }
    Ok(hist)
}

/// Two-readout protocol: R1 prepares by conditioning on its count, R2 reads
/// the continuing hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointSpec {
    pub n1: usize,
    pub n2: usize,
    pub prepare: SpinState,
    /// R1 counts `≥` this value herald the bright state.
    pub bright_threshold: u64,
    /// Probability that a trial passes the charge-resonance check.
    pub crc_pass: f64,
    /// Probability of the bright state before R1.
    pub initial_bright_probability: f64,
}

impl TwoPointSpec {
    pub fn new(n1: usize, n2: usize, prepare: SpinState) -> Self {
        Self {
            n1,
            n2,
            prepare,
            bright_threshold: 3,
            crc_pass: 1.0,
            initial_bright_probability: 0.5,
        }
    }

    fn accepts(&self, r1: u64) -> bool {
        match self.prepare {
            SpinState::Dark => r1 == 0,
            SpinState::Bright => r1 >= self.bright_threshold,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoPointResult {
    /// R2 counts of accepted trials.
    pub histogram: Histogram,
    pub attempted: u64,
    pub crc_rejected: u64,
    pub accepted: u64,
}

impl TwoPointResult {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.attempted as f64
    }
}

/// Simulates `trials` two-point sequences and returns the R2 histogram of the
/// trials whose R1 count matched the preparation condition and which passed
/// the CRC filter.
pub fn two_point_histogram(
    params: &ReadoutParams,
    spec: &TwoPointSpec,
    trials: u64,
    seed: u64,
) -> Result<TwoPointResult> {
    params.validate()?;
    if spec.n1 == 0 || spec.n2 == 0 {
        return Err(Error::invalid("N1 and N2 must be at least 1"));
    }
    if !(spec.crc_pass > 0.0 && spec.crc_pass <= 1.0) {
        return Err(Error::invalid("crc_pass must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&spec.initial_bright_probability) {
        return Err(Error::invalid("initial_bright_probability must lie in [0, 1]"));
    }
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let r1 = params.with_repetitions(spec.n1);
    let r2 = params.with_repetitions(spec.n2);

    let parts: Vec<(Histogram, u64)> = rng::chunks(trials, rng::DEFAULT_CHUNK)
        .into_par_iter()
        .map(|(stream, n)| {
            let mut rng: StreamRng = rng::stream(seed, stream);
            let mut crc_rng: StreamRng = rng::stream(seed, AUX_STREAM + stream);
            let mut h = Histogram::default();
            let mut crc_rejected = 0;
            for _ in 0..n {
                let mut state = if rng.random::<f64>() < spec.initial_bright_probability {
                    SpinState::Bright
                } else {
                    SpinState::Dark
                };
                let c1 = sample_block(&r1, &mut state, &mut rng);
                let c2 = sample_block(&r2, &mut state, &mut rng);
                let crc_ok = crc_rng.random::<f64>() < spec.crc_pass;
                if !crc_ok {
                    crc_rejected += 1;
                    continue;
                }
                if spec.accepts(c1) {
                    h.record(c2);
                }
            }
            (h, crc_rejected)
        })
        .collect();

    let mut histogram = Histogram {
        repetitions: Some(spec.n2),
        seed: Some(seed),
        conditioning: Some(format!(
            "prepare={} via R1 (N1={}), crc_pass={}",
            spec.prepare, spec.n1, spec.crc_pass
        )),
        ..Default::default()
    };
    let mut crc_rejected = 0;
    for (h, c) in &parts {
        histogram.merge(h);
        crc_rejected += c;
    }
    let accepted = histogram.trials();
    if (accepted as f64) < 1e-4 * trials as f64 || accepted == 0 {
        return Err(Error::InsufficientStatistics {
            accepted,
            attempted: trials,
        });
    }
    Ok(TwoPointResult {
        histogram,
        attempted: trials,
        crc_rejected,
        accepted,
    })
}
