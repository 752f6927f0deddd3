//! Alternating two-sided readout.
//!
//! Repetitions come in pairs `(address-↑, address-↓)`. In the ↑ slot the ↑
//! state is the bright one, in the ↓ slot the ↓ state is. Photons from ↑ slots
//! count positive and photons from ↓ slots count negative, so the signed total
//! `k = n_↑ − n_↓` separates the two states.
//!
//! Hidden-state switching is applied after every slot with the probability of
//! the role the state plays in that slot: bright-role decay
//! `1 − exp(−γ_bright·t_rep)` while addressed, dark-role decay otherwise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::poisson;
use crate::readout::{ReadoutParams, TRUNCATION_EPS};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuclearState {
    Up,
    Down,
}

impl NuclearState {
    pub const ALL: [NuclearState; 2] = [NuclearState::Up, NuclearState::Down];

    pub fn index(self) -> usize {
        match self {
            NuclearState::Up => 0,
            NuclearState::Down => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            NuclearState::Up => NuclearState::Down,
            NuclearState::Down => NuclearState::Up,
        }
    }
}

impl std::str::FromStr for NuclearState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "up" => Ok(NuclearState::Up),
            "down" => Ok(NuclearState::Down),
            other => Err(Error::invalid(format!("unknown nuclear state `{other}`"))),
        }
    }
}

impl std::fmt::Display for NuclearState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NuclearState::Up => "up",
            NuclearState::Down => "down",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltReadoutParams {
    /// Single-sided model; its `repetitions` field is not used.
    pub base: ReadoutParams,
    pub n_pairs: usize,
}

impl AltReadoutParams {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.n_pairs == 0 {
            return Err(Error::invalid("at least one pair is required"));
        }
        Ok(())
    }

    pub fn with_pairs(&self, n_pairs: usize) -> Self {
        Self {
            n_pairs,
            ..self.clone()
        }
    }

    /// Time-averaged switching rate of either state: each spends half its
    /// slots in the bright role and half in the dark role.
    pub fn effective_rate_hz(&self) -> f64 {
        0.5 * (self.base.gamma_bright_hz + self.base.gamma_dark_hz)
    }
}

/// Emission and switching of one slot, indexed by hidden state (↑ = 0).
#[derive(Clone, Debug)]
struct Slot {
    emission: [f64; 2],
    switch: [f64; 2],
    sign: i64,
}

fn switch_prob(rate_hz: f64, t: f64) -> f64 {
    -(-rate_hz * t).exp_m1()
}

fn addressed_slots(base: &ReadoutParams) -> [Slot; 2] {
    let pb = switch_prob(base.gamma_bright_hz, base.t_rep_s);
    let pd = switch_prob(base.gamma_dark_hz, base.t_rep_s);
    [
        Slot {
            emission: [base.lambda_bright, base.lambda_dark],
            switch: [pb, pd],
            sign: 1,
        },
        Slot {
            emission: [base.lambda_dark, base.lambda_bright],
            switch: [pd, pb],
            sign: -1,
        },
    ]
}

/// Simplified switching model used for rate estimation on alternating data:
/// each state decays at one rate regardless of addressing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformSwitching {
    pub gamma_up_hz: f64,
    pub gamma_down_hz: f64,
    pub lambda_bright: f64,
    pub lambda_dark: f64,
    pub t_rep_s: f64,
}

impl UniformSwitching {
    fn slots(&self) -> [Slot; 2] {
        let pu = switch_prob(self.gamma_up_hz, self.t_rep_s);
        let pd = switch_prob(self.gamma_down_hz, self.t_rep_s);
        [
            Slot {
                emission: [self.lambda_bright, self.lambda_dark],
                switch: [pu, pd],
                sign: 1,
            },
            Slot {
                emission: [self.lambda_dark, self.lambda_bright],
                switch: [pu, pd],
                sign: -1,
            },
        ]
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.gamma_up_hz, self.gamma_down_hz, self.lambda_dark]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.lambda_bright.is_finite()
            && self.lambda_bright >= self.lambda_dark
            && self.t_rep_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("invalid uniform switching model"))
        }
    }
}

/// `P(K = k)` for `K = X₁ − X₂`, `X_i ~ Poisson(mu_i)` independent.
///
/// Evaluated as the series `Σ_j P₁(j + k)·P₂(j)` in log space.
pub fn skellam_pmf(mu1: f64, mu2: f64, k: i64) -> f64 {
    assert!(mu1 >= 0.0 && mu2 >= 0.0, "Skellam means must be non-negative");
    if mu2 == 0.0 {
        return if k >= 0 { poisson::pmf(mu1, k as u64) } else { 0.0 };
    }
    if mu1 == 0.0 {
        return if k <= 0 { poisson::pmf(mu2, (-k) as u64) } else { 0.0 };
    }
    let j0 = (-k).max(0) as u64;
    let span = mu1 + mu2;
    let j1 = j0 + (span + 40.0 * span.sqrt() + 60.0).ceil() as u64;
    let terms: Vec<f64> = (j0..=j1)
        .map(|j| poisson::ln_pmf(mu1, (j as i64 + k) as u64) + poisson::ln_pmf(mu2, j))
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>()
}

/// Distribution of the signed difference over one alternating block.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffPmf {
    pub initial: NuclearState,
    pub n_pairs: usize,
    pub k_max: usize,
    /// `probs[i]` is `P(k = i − k_max)`.
    pub probs: Vec<f64>,
    /// Joint form by post-block hidden state.
    pub joint: [Vec<f64>; 2],
}

impl DiffPmf {
    pub fn prob(&self, k: i64) -> f64 {
        let i = k + self.k_max as i64;
        if i < 0 {
            return 0.0;
        }
        self.probs.get(i as usize).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = i64> + '_ {
        let k = self.k_max as i64;
        -k..=k
    }

    /// `P(k ≥ lo)`.
    pub fn upper_tail(&self, lo: i64) -> f64 {
        self.support().filter(|&k| k >= lo).map(|k| self.prob(k)).sum()
    }

    /// `P(k ≤ hi)`.
    pub fn lower_tail(&self, hi: i64) -> f64 {
        self.support().filter(|&k| k <= hi).map(|k| self.prob(k)).sum()
    }
}

pub fn auto_k_max(n_pairs: usize, lambda_bright: f64) -> usize {
    (2 * poisson::upper_quantile(n_pairs as f64 * lambda_bright, TRUNCATION_EPS)).max(4)
}

/// Exact distribution of the signed difference under the addressed-role
/// switching model.
pub fn diff_distribution(params: &AltReadoutParams, s0: NuclearState) -> Result<DiffPmf> {
    params.validate()?;
    let k_max = auto_k_max(params.n_pairs, params.base.lambda_bright);
    diff_dp(&addressed_slots(&params.base), params.n_pairs, s0, k_max)
}

/// As [`diff_distribution`] under the uniform switching model.
pub fn diff_distribution_uniform(
    model: &UniformSwitching,
    n_pairs: usize,
    s0: NuclearState,
) -> Result<DiffPmf> {
    model.validate()?;
    if n_pairs == 0 {
        return Err(Error::invalid("at least one pair is required"));
    }
    diff_dp(&model.slots(), n_pairs, s0, auto_k_max(n_pairs, model.lambda_bright))
}

fn diff_dp(slots: &[Slot; 2], n_pairs: usize, s0: NuclearState, k_max: usize) -> Result<DiffPmf> {
    let len = 2 * k_max + 1;
    let tables: Vec<[Vec<f64>; 2]> = slots
        .iter()
        .map(|s| [poisson::pmf_table(s.emission[0], 1e-18), poisson::pmf_table(s.emission[1], 1e-18)])
        .collect();
    let mut cur = [vec![0.0; len], vec![0.0; len]];
    cur[s0.index()][k_max] = 1.0;
    let mut emitted = [vec![0.0; len], vec![0.0; len]];
    for _ in 0..n_pairs {
        for (slot, table) in slots.iter().zip(&tables) {
            for s in 0..2 {
                shift_convolve(&cur[s], &table[s], slot.sign, &mut emitted[s]);
            }
            let (pu, pd) = (slot.switch[0], slot.switch[1]);
            for i in 0..len {
                let (u, d) = (emitted[0][i], emitted[1][i]);
                cur[0][i] = u * (1.0 - pu) + d * pd;
                cur[1][i] = u * pu + d * (1.0 - pd);
            }
        }
    }
    let total: f64 = cur.iter().flat_map(|v| v.iter()).sum();
    let lost = 1.0 - total;
    if lost > TRUNCATION_EPS {
        return Err(Error::Truncation {
            limit: k_max,
            lost_mass: lost,
        });
    }
    for v in cur.iter_mut() {
        v.iter_mut().for_each(|p| *p /= total);
    }
    let probs = cur[0].iter().zip(&cur[1]).map(|(a, b)| a + b).collect();
    Ok(DiffPmf {
        initial: s0,
        n_pairs,
        k_max,
        probs,
        joint: cur,
    })
}

/// `out[i] = Σ_j kernel[j]·src[i − sign·j]`, dropping mass leaving the support.
fn shift_convolve(src: &[f64], kernel: &[f64], sign: i64, out: &mut [f64]) {
    let len = src.len() as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let from = i as i64 - sign * j as i64;
            if from < 0 || from >= len {
                continue;
            }
            acc += w * src[from as usize];
        }
        *o = acc;
    }
}

/// Signed thresholds: `k ≥ k_up_min` reads ↑, `k ≤ k_down_max` reads ↓.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AltPolicy {
    pub k_down_max: i64,
    pub k_up_min: i64,
}

impl AltPolicy {
    pub fn new(k_down_max: i64, k_up_min: i64) -> Result<Self> {
        if k_down_max >= k_up_min {
            return Err(Error::invalid("k_down_max must be below k_up_min"));
        }
        Ok(Self {
            k_down_max,
            k_up_min,
        })
    }

    /// `|k| ≥ t` conclusive, sign decides.
    pub fn symmetric(t: i64) -> Result<Self> {
        if t < 1 {
            return Err(Error::invalid("symmetric threshold must be at least 1"));
        }
        Self::new(-t, t)
    }

    pub fn is_single(&self) -> bool {
        self.k_up_min == self.k_down_max + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AltFidelityPoint {
    pub n_pairs: usize,
    pub k_down_max: i64,
    pub k_up_min: i64,
    pub f_down: f64,
    pub f_up: f64,
    pub f_avg: f64,
    pub eta: f64,
}

impl AltFidelityPoint {
    pub fn infidelity(&self) -> f64 {
        1.0 - self.f_avg
    }
}

pub fn alt_fidelity_from_pmfs(up: &DiffPmf, down: &DiffPmf, policy: AltPolicy) -> Result<AltFidelityPoint> {
    if policy.k_down_max >= policy.k_up_min {
        return Err(Error::invalid("k_down_max must be below k_up_min"));
    }
    let u_hit = up.upper_tail(policy.k_up_min);
    let u_miss = up.lower_tail(policy.k_down_max);
    let d_hit = down.lower_tail(policy.k_down_max);
    let d_miss = down.upper_tail(policy.k_up_min);
    let (u_conc, d_conc) = (u_hit + u_miss, d_hit + d_miss);
    if u_conc <= 0.0 || d_conc <= 0.0 {
        return Err(Error::EmptyConclusiveRegion(format!(
            "policy ({}, {}) at {} pairs",
            policy.k_down_max, policy.k_up_min, up.n_pairs
        )));
    }
    let f_up = (u_hit / u_conc).clamp(0.0, 1.0);
    let f_down = (d_hit / d_conc).clamp(0.0, 1.0);
    let eta = if policy.is_single() {
        1.0
    } else {
        (0.5 * (u_conc + d_conc)).clamp(0.0, 1.0)
    };
    Ok(AltFidelityPoint {
        n_pairs: up.n_pairs,
        k_down_max: policy.k_down_max,
        k_up_min: policy.k_up_min,
        f_down,
        f_up,
        f_avg: 0.5 * (f_up + f_down),
        eta,
    })
}

pub fn alt_fidelity(params: &AltReadoutParams, policy: AltPolicy) -> Result<AltFidelityPoint> {
    let up = diff_distribution(params, NuclearState::Up)?;
    let down = diff_distribution(params, NuclearState::Down)?;
    alt_fidelity_from_pmfs(&up, &down, policy)
}

/// Every policy with `−t_max ≤ k_down_max < k_up_min ≤ t_max`.
pub fn alt_policy_grid(t_max: i64) -> Vec<AltPolicy> {
    let mut out = Vec::new();
    for a in -t_max..t_max {
        for b in (a + 1)..=t_max {
            out.push(AltPolicy {
                k_down_max: a,
                k_up_min: b,
            });
        }
    }
    out
}

pub fn alt_fidelity_scan(
    params: &AltReadoutParams,
    pairs: &[usize],
    policies: &[AltPolicy],
) -> Result<Vec<AltFidelityPoint>> {
    if pairs.is_empty() || policies.is_empty() {
        return Err(Error::invalid("scan needs pair counts and policies"));
    }
    let mut out = Vec::new();
    for &n in pairs {
        let p = params.with_pairs(n);
        let up = diff_distribution(&p, NuclearState::Up)?;
        let down = diff_distribution(&p, NuclearState::Down)?;
        for &policy in policies {
            match alt_fidelity_from_pmfs(&up, &down, policy) {
                Ok(point) => out.push(point),
                Err(Error::EmptyConclusiveRegion(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Undominated points sorted by decreasing η.
pub fn alt_pareto_front(points: &[AltFidelityPoint]) -> Vec<AltFidelityPoint> {
    let mut sorted: Vec<&AltFidelityPoint> = points.iter().collect();
    sorted.sort_by(|a, b| b.eta.total_cmp(&a.eta).then(a.infidelity().total_cmp(&b.infidelity())));
    let mut best = f64::INFINITY;
    let mut front = Vec::new();
    for p in sorted {
        if p.infidelity() < best {
            best = p.infidelity();
            front.push(p.clone());
        }
    }
    front
}

/// Empirical histogram of signed differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffHistogram {
    /// Value of `k` stored at `counts[0]`.
    pub offset: i64,
    pub counts: Vec<u64>,
    pub n_pairs: Option<usize>,
    pub seed: Option<u64>,
}

impl DiffHistogram {
    pub fn record(&mut self, k: i64) {
        if self.counts.is_empty() {
            self.offset = k;
        }
        if k < self.offset {
            let grow = (self.offset - k) as usize;
            let mut v = vec![0; grow];
            v.extend_from_slice(&self.counts);
            self.counts = v;
            self.offset = k;
        }
        let i = (k - self.offset) as usize;
        if i >= self.counts.len() {
            self.counts.resize(i + 1, 0);
        }
        self.counts[i] += 1;
    }

    pub fn add(&mut self, k: i64, count: u64) {
        if count == 0 {
            return;
        }
        self.record(k);
        let i = (k - self.offset) as usize;
        self.counts[i] += count - 1;
    }

    pub fn merge(&mut self, other: &DiffHistogram) {
        for (k, c) in other.iter() {
            self.add(k, c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .map(move |(i, &c)| (self.offset + i as i64, c))
    }

    pub fn trials(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.iter().map(|(k, c)| k as f64 * c as f64).sum();
        s / self.trials() as f64
    }
}

/// Samples one alternating block, advancing `state`.
///
/// Whole pairs spent in one state are drawn at once: the number of surviving
/// pairs is geometric and each slot type contributes one Poisson draw.
fn sample_alt_block<R: Rng + ?Sized>(
    slots: &[Slot; 2],
    n_pairs: usize,
    state: &mut NuclearState,
    rng: &mut R,
) -> i64 {
    use crate::readout::sim::{geometric_draw, poisson_draw};
    let mut remaining = n_pairs as u64;
    let mut k = 0i64;
    let emit = |slot: &Slot, s: NuclearState, pairs: u64, rng: &mut R| -> i64 {
        slot.sign * poisson_draw(slot.emission[s.index()] * pairs as f64, rng) as i64
    };
    while remaining > 0 {
        let s = *state;
        let (p1, p2) = (slots[0].switch[s.index()], slots[1].switch[s.index()]);
        let q = 1.0 - (1.0 - p1) * (1.0 - p2);
        let survive = geometric_draw(q, rng);
        let full = match survive {
            Some(g) if g < remaining => g,
            _ => {
                k += emit(&slots[0], s, remaining, rng) + emit(&slots[1], s, remaining, rng);
                break;
            }
        };
        k += emit(&slots[0], s, full, rng) + emit(&slots[1], s, full, rng);
        // The pair in which the first switch happens.
        if rng.random::<f64>() * q < p1 {
            k += emit(&slots[0], s, 1, rng);
            let t = s.flipped();
            k += emit(&slots[1], t, 1, rng);
            *state = if rng.random::<f64>() < slots[1].switch[t.index()] { s } else { t };
        } else {
            k += emit(&slots[0], s, 1, rng) + emit(&slots[1], s, 1, rng);
            *state = s.flipped();
        }
        remaining -= full + 1;
    }
    k
}

fn simulate_slots(
    slots: &[Slot; 2],
    n_pairs: usize,
    s0: NuclearState,
    trials: u64,
    seed: u64,
) -> DiffHistogram {
    let parts: Vec<DiffHistogram> = rng::chunks(trials, rng::DEFAULT_CHUNK)
        .into_par_iter()
        .map(|(stream, n)| {
            let mut rng = rng::stream(seed, stream);
            let mut h = DiffHistogram::default();
            for _ in 0..n {
                let mut state = s0;
                h.record(sample_alt_block(slots, n_pairs, &mut state, &mut rng));
            }
            h
        })
        .collect();
    let mut out = DiffHistogram {
        n_pairs: Some(n_pairs),
        seed: Some(seed),
        ..Default::default()
    };
    for p in &parts {
        out.merge(p);
    }
    out
}

/// Monte-Carlo histogram of the signed difference.
pub fn simulate_alt(params: &AltReadoutParams, s0: NuclearState, trials: u64, seed: u64) -> Result<DiffHistogram> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    Ok(simulate_slots(&addressed_slots(&params.base), params.n_pairs, s0, trials, seed))
}

#[derive(Clone, Debug, Serialize)]
pub struct AltRateFit {
    pub model: UniformSwitching,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub converged: bool,
}

pub fn alt_log_likelihood(data: &[(DiffHistogram, NuclearState)], model: &UniformSwitching) -> Result<f64> {
    let mut ll = 0.0;
    for (h, s0) in data {
        let n = h
            .n_pairs
            .ok_or_else(|| Error::invalid("difference histogram is missing its pair count"))?;
        let max_abs = h.iter().filter(|(_, c)| *c > 0).map(|(k, _)| k.unsigned_abs() as usize).max().unwrap_or(0);
        let k_max = auto_k_max(n, model.lambda_bright).max(max_abs);
        model.validate()?;
        let pmf = diff_dp(&model.slots(), n, *s0, k_max)?;
        for (k, c) in h.iter() {
            if c > 0 {
                ll += c as f64 * pmf.prob(k).max(1e-300).ln();
            }
        }
    }
    Ok(ll)
}

/// Fits per-state uniform switching rates to alternating data with the
/// emission means held at `init`.
pub fn fit_alt_rates(data: &[(DiffHistogram, NuclearState)], init: &UniformSwitching) -> Result<AltRateFit> {
    init.validate()?;
    if !NuclearState::ALL.iter().all(|s| data.iter().any(|(_, s0)| s0 == s)) {
        return Err(Error::invalid("need a histogram for each initial state"));
    }
    let with = |x: &[f64]| UniformSwitching {
        gamma_up_hz: x[0].clamp(-40.0, 40.0).exp(),
        gamma_down_hz: x[1].clamp(-40.0, 40.0).exp(),
        ..init.clone()
    };
    let objective = |x: &[f64]| alt_log_likelihood(data, &with(x)).map(|v| -v).unwrap_or(f64::INFINITY);
    let initial = -objective(&[init.gamma_up_hz.max(1e-6).ln(), init.gamma_down_hz.max(1e-6).ln()]);
    // Coarse scan along the diagonal, then simplex refinement.
    let mut x0 = [init.gamma_up_hz.max(1e-6).ln(), init.gamma_down_hz.max(1e-6).ln()];
    let mut best = -initial;
    for k in 0..=25 {
        let g = (0.1f64 * 10f64.powf(k as f64 / 5.0)).ln();
        let v = objective(&[g, g]);
        if v < best {
            best = v;
            x0 = [g, g];
        }
    }
    let nm = NelderMead {
        max_iterations: 2000,
        f_tol_rel: 1e-9,
        f_tol_abs: 1e-9,
        x_tol: 1e-6,
    };
    let m = nm.minimize(objective, &x0, &[0.2, 0.2]);
    if !m.converged {
        return Err(Error::NotConverged {
            iterations: m.iterations,
            best_value: -m.value,
            best_point: m.x.iter().map(|v| v.exp()).collect(),
        });
    }
    Ok(AltRateFit {
        model: with(&m.x),
        log_likelihood: -m.value,
        initial_log_likelihood: initial,
        converged: true,
    })
}
