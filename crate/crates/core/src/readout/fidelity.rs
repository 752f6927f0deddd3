//! Threshold policies, readout fidelity and preparation by measurement.

use serde::Serialize;

use super::{count_distribution, CountPmf, ReadoutParams, SpinState};
use crate::error::{Error, Result};

/// Two-threshold classification of a photon total: `n ≤ n_dark_max` reads
/// dark, `n ≥ n_bright_min` reads bright, anything between is inconclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ThresholdPolicy {
    pub n_dark_max: u64,
    pub n_bright_min: u64,
}

impl ThresholdPolicy {
    pub fn new(n_dark_max: u64, n_bright_min: u64) -> Result<Self> {
        if n_dark_max >= n_bright_min {
            return Err(Error::invalid(format!(
                "n_dark_max ({n_dark_max}) must be below n_bright_min ({n_bright_min})"
            )));
        }
        Ok(Self {
            n_dark_max,
            n_bright_min,
        })
    }

    /// Single threshold: `n ≥ n_th` reads bright, everything else dark.
    pub fn single(n_th: u64) -> Result<Self> {
        if n_th == 0 {
            return Err(Error::invalid("single threshold must be at least 1"));
        }
        Self::new(n_th - 1, n_th)
    }

    pub fn is_single(&self) -> bool {
        self.n_bright_min == self.n_dark_max + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FidelityPoint {
    pub repetitions: usize,
    pub n_dark_max: u64,
    pub n_bright_min: u64,
    pub f_dark: f64,
    pub f_bright: f64,
    pub f_avg: f64,
    /// Success rate: probability of a conclusive outcome, equal priors.
    pub eta: f64,
}

impl FidelityPoint {
    pub fn infidelity(&self) -> f64 {
        1.0 - self.f_avg
    }

    /// Success rate once a state-independent CRC filter with pass
    /// probability `crc_pass` is applied. Fidelities are unchanged.
    pub fn eta_with_crc(&self, crc_pass: f64) -> f64 {
        self.eta * crc_pass
    }
}

/// Fidelity against the pre-block state from precomputed bright- and
/// dark-start distributions.
pub fn fidelity_from_pmfs(
    bright: &CountPmf,
    dark: &CountPmf,
    policy: ThresholdPolicy,
) -> Result<FidelityPoint> {
    if policy.n_dark_max >= policy.n_bright_min {
        return Err(Error::invalid("n_dark_max must be below n_bright_min"));
    }
    let b_hit = bright.upper_tail(policy.n_bright_min);
    let b_miss = bright.cdf(policy.n_dark_max);
    let d_hit = dark.cdf(policy.n_dark_max);
    let d_miss = dark.upper_tail(policy.n_bright_min);
    let (b_conc, d_conc) = (b_hit + b_miss, d_hit + d_miss);
    if b_conc <= 0.0 || d_conc <= 0.0 {
        return Err(Error::EmptyConclusiveRegion(format!(
            "policy ({}, {}) at N = {}",
            policy.n_dark_max, policy.n_bright_min, bright.repetitions
        )));
    }
    let f_bright = (b_hit / b_conc).clamp(0.0, 1.0);
    let f_dark = (d_hit / d_conc).clamp(0.0, 1.0);
    let eta = if policy.is_single() {
        1.0
    } else {
        (0.5 * (b_conc + d_conc)).clamp(0.0, 1.0)
    };
    Ok(FidelityPoint {
        repetitions: bright.repetitions,
        n_dark_max: policy.n_dark_max,
        n_bright_min: policy.n_bright_min,
        f_dark,
        f_bright,
        f_avg: 0.5 * (f_dark + f_bright),
        eta,
    })
}

pub fn readout_fidelity(params: &ReadoutParams, policy: ThresholdPolicy) -> Result<FidelityPoint> {
    let bright = count_distribution(params, SpinState::Bright)?;
    let dark = count_distribution(params, SpinState::Dark)?;
    fidelity_from_pmfs(&bright, &dark, policy)
}

/// All policies with `n_dark_max ≤ max_dark` and
/// `n_dark_max < n_bright_min ≤ max_bright`.
pub fn policy_grid(max_dark: u64, max_bright: u64) -> Vec<ThresholdPolicy> {
    let mut out = Vec::new();
    for a in 0..=max_dark {
        for b in (a + 1)..=max_bright {
            out.push(ThresholdPolicy {
                n_dark_max: a,
                n_bright_min: b,
            });
        }
    }
    out
}

/// Evaluates every policy at every block length. Rows are ordered by block
/// length, then by policy order.
pub fn fidelity_scan(
    params: &ReadoutParams,
    repetitions: &[usize],
    policies: &[ThresholdPolicy],
) -> Result<Vec<FidelityPoint>> {
    if repetitions.is_empty() || policies.is_empty() {
        return Err(Error::invalid("fidelity scan needs block lengths and policies"));
    }
    let mut out = Vec::with_capacity(repetitions.len() * policies.len());
    for &n in repetitions {
        let p = params.with_repetitions(n);
        let bright = count_distribution(&p, SpinState::Bright)?;
        let dark = count_distribution(&p, SpinState::Dark)?;
        for &policy in policies {
            match fidelity_from_pmfs(&bright, &dark, policy) {
                Ok(point) => out.push(point),
                Err(Error::EmptyConclusiveRegion(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Points not dominated by any other point, where `q` dominates `p` when
/// `q.eta ≥ p.eta` and `q` has lower infidelity. Sorted by decreasing η, so
/// infidelity strictly decreases along the result.
pub fn pareto_front(points: &[FidelityPoint]) -> Vec<FidelityPoint> {
    let mut sorted: Vec<&FidelityPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        b.eta
            .total_cmp(&a.eta)
            .then(a.infidelity().total_cmp(&b.infidelity()))
    });
    let mut front: Vec<FidelityPoint> = Vec::new();
    let mut best = f64::INFINITY;
    for p in sorted {
        if p.infidelity() < best {
            best = p.infidelity();
            front.push(p.clone());
        }
    }
    front
}

/// Conditioning event on the photon total of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CountCondition {
    Exactly(u64),
    AtMost(u64),
    AtLeast(u64),
    Between(u64, u64),
}

impl CountCondition {
    pub fn contains(&self, n: u64) -> bool {
        match *self {
            CountCondition::Exactly(k) => n == k,
            CountCondition::AtMost(k) => n <= k,
            CountCondition::AtLeast(k) => n >= k,
            CountCondition::Between(lo, hi) => lo <= n && n <= hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreparationPosterior {
    /// `P(post-block state = bright | condition)`.
    pub p_bright: f64,
    pub p_dark: f64,
    /// `P(condition)` under equal priors on the pre-block state.
    pub condition_probability: f64,
}

/// Posterior of the post-block hidden state given the block's count lies in
/// `condition`, with equal priors on the pre-block state.
pub fn preparation_fidelity(
    params: &ReadoutParams,
    condition: CountCondition,
) -> Result<PreparationPosterior> {
    let mut mass = [0.0; 2];
    for s0 in SpinState::ALL {
        let pmf = count_distribution(params, s0)?;
        for (s, joint) in pmf.joint.iter().enumerate() {
            mass[s] += 0.5
                * joint
                    .iter()
                    .enumerate()
                    .filter(|(n, _)| condition.contains(*n as u64))
                    .map(|(_, p)| p)
                    .sum::<f64>();
        }
    }
    let total = mass[0] + mass[1];
    if total.is_nan() || total <= 0.0 {
        return Err(Error::ZeroProbabilityCondition);
    }
    Ok(PreparationPosterior {
        p_bright: mass[SpinState::Bright.index()] / total,
        p_dark: mass[SpinState::Dark.index()] / total,
        condition_probability: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn separable(n: usize) -> ReadoutParams {
        ReadoutParams {
            gamma_bright_hz: 0.0,
            gamma_dark_hz: 0.0,
            lambda_bright: 50.0 / n as f64,
            lambda_dark: 0.0,
            t_rep_s: 17e-6,
            repetitions: n,
        }
    }

    #[test]
    fn single_threshold_has_unit_eta() {
        let p = ReadoutParams::calibrated(250);
        let f = readout_fidelity(&p, ThresholdPolicy::single(3).unwrap()).unwrap();
        assert_eq!(f.eta, 1.0);
        assert_eq!((f.n_dark_max, f.n_bright_min), (2, 3));
        assert_relative_eq!(f.f_avg, 0.5 * (f.f_dark + f.f_bright));
    }

    #[test]
    fn dark_is_perfect_without_background() {
        let p = separable(100);
        let f = readout_fidelity(&p, ThresholdPolicy::new(0, 5).unwrap()).unwrap();
        assert_eq!(f.f_dark, 1.0);
    }

    #[test]
    fn separable_limit() {
        let p = separable(250);
        let f = readout_fidelity(&p, ThresholdPolicy::single(10).unwrap()).unwrap();
        assert!(f.f_avg > 0.9999);
        assert_eq!(f.eta, 1.0);
    }

    #[test]
    fn policy_validation() {
        assert!(ThresholdPolicy::new(3, 3).is_err());
        assert!(ThresholdPolicy::single(0).is_err());
        assert!(ThresholdPolicy::single(1).unwrap().is_single());
    }

    #[test]
    fn empty_conclusive_region() {
        // A bright total near 1000 photons is never 0 and never reaches 10^5.
        let p = ReadoutParams {
            gamma_bright_hz: 0.0,
            gamma_dark_hz: 0.0,
            lambda_bright: 100.0,
            lambda_dark: 0.0,
            t_rep_s: 1e-6,
            repetitions: 10,
        };
        let err = readout_fidelity(&p, ThresholdPolicy::new(0, 100_000).unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptyConclusiveRegion(_)));
    }

    #[test]
    fn raising_bright_threshold_trades_eta_for_fidelity() {
        let p = ReadoutParams::calibrated(300);
        let bright = count_distribution(&p, SpinState::Bright).unwrap();
        let dark = count_distribution(&p, SpinState::Dark).unwrap();
        for a in 0..3 {
            let mut prev: Option<(FidelityPoint, f64)> = None;
            for b in (a + 1)..30 {
                let f = fidelity_from_pmfs(&bright, &dark, ThresholdPolicy::new(a, b).unwrap()).unwrap();
                // Brute-force tails straight from the marginal.
                let b_hit: f64 = bright.marginal.iter().skip(b as usize).sum();
                let b_miss: f64 = bright.marginal.iter().take(a as usize + 1).sum();
                assert_relative_eq!(f.f_bright, b_hit / (b_hit + b_miss), max_relative = 1e-12);
                if let Some((prev, prev_hit)) = prev {
                    let prev: FidelityPoint = prev;
                    assert!(b_hit <= prev_hit);
                    assert!(f.f_dark >= prev.f_dark - 1e-15);
                    assert!(f.eta <= prev.eta + 1e-15);
                }
                prev = Some((f, b_hit));
            }
        }
    }

    #[test]
    fn pareto_front_is_undominated_and_monotone() {
        let p = ReadoutParams::calibrated(250);
        let points = fidelity_scan(&p, &[100, 250, 600], &policy_grid(3, 25)).unwrap();
        let front = pareto_front(&points);
        assert!(!front.is_empty());
        for w in front.windows(2) {
            assert!(w[1].eta <= w[0].eta);
            assert!(w[1].infidelity() < w[0].infidelity());
        }
        for f in &front {
            for q in &points {
                let dominates = q.eta >= f.eta && q.infidelity() < f.infidelity();
                assert!(!dominates, "front point {f:?} dominated by {q:?}");
            }
        }
    }

    #[test]
    fn preparation_closed_form_without_switching() {
        let p = ReadoutParams {
            gamma_bright_hz: 0.0,
            gamma_dark_hz: 0.0,
            lambda_bright: 0.01,
            lambda_dark: 0.0,
            t_rep_s: 17e-6,
            repetitions: 300,
        };
        let post = preparation_fidelity(&p, CountCondition::Exactly(0)).unwrap();
        let expect = 1.0 / (1.0 + (-3.0f64).exp());
        assert_relative_eq!(post.p_dark, expect, max_relative = 1e-12);
        assert_relative_eq!(post.p_dark + post.p_bright, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn high_count_heralds_bright() {
        let p = ReadoutParams::calibrated(300);
        let weak = preparation_fidelity(&p, CountCondition::AtLeast(6)).unwrap();
        let strong = preparation_fidelity(&p, CountCondition::AtLeast(18)).unwrap();
        assert!(weak.p_bright > 0.5);
        assert!(strong.p_bright > weak.p_bright, "{weak:?} {strong:?}");
    }

    #[test]
    fn impossible_condition() {
        let p = ReadoutParams::calibrated(10);
        assert!(matches!(
            preparation_fidelity(&p, CountCondition::AtLeast(10_000)),
            Err(Error::ZeroProbabilityCondition)
        ));
    }
}
