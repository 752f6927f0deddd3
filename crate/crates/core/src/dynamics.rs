//! Forward signal models for nuclear Rabi, Ramsey and ENDOR measurements.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::readout::sim::poisson_draw;
use crate::readout::FidelityPoint;
use crate::rng;
use crate::spin::{larmor_frequency, GyromagneticTable, Species};

/// Linear map from the probability of ending bright to the probability of
/// reading bright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastMap {
    /// Signal for a spin certainly dark (`1 − F_dark`).
    pub dark_level: f64,
    /// Signal for a spin certainly bright (`F_bright`).
    pub bright_level: f64,
}

impl ContrastMap {
    pub const IDENTITY: ContrastMap = ContrastMap {
        dark_level: 0.0,
        bright_level: 1.0,
    };

    pub fn from_fidelities(f_dark: f64, f_bright: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&f_dark) || !(0.0..=1.0).contains(&f_bright) {
            return Err(Error::invalid("fidelities must lie in [0, 1]"));
        }
        Ok(Self {
            dark_level: 1.0 - f_dark,
            bright_level: f_bright,
        })
    }

    pub fn from_point(p: &FidelityPoint) -> Result<Self> {
        Self::from_fidelities(p.f_dark, p.f_bright)
    }

    pub fn apply(&self, p_bright: f64) -> f64 {
        self.dark_level + (self.bright_level - self.dark_level) * p_bright
    }

    /// Peak-to-peak contrast.
    pub fn contrast(&self) -> f64 {
        self.bright_level - self.dark_level
    }
}

impl Default for ContrastMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn check_durations(d: &[f64]) -> Result<()> {
    if d.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("durations must be finite and non-negative"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabiConfig {
    pub rabi_frequency_khz: f64,
    pub durations_s: Vec<f64>,
    #[serde(default)]
    pub contrast: ContrastMap,
}

impl RabiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rabi_frequency_khz > 0.0 && self.rabi_frequency_khz.is_finite()) {
            return Err(Error::invalid("rabi frequency must be positive"));
        }
        check_durations(&self.durations_s)
    }
}

pub fn rabi_flip_probability(rabi_frequency_khz: f64, t_s: f64) -> f64 {
    (PI * rabi_frequency_khz * 1e3 * t_s).sin().powi(2)
}

pub fn rabi_signal(cfg: &RabiConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(cfg
        .durations_s
        .iter()
        .map(|&t| cfg.contrast.apply(rabi_flip_probability(cfg.rabi_frequency_khz, t)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyConfig {
    pub detuning_khz: f64,
    pub t2_star_s: f64,
    #[serde(default = "default_decay_exponent")]
    pub decay_exponent: f64,
    #[serde(default)]
    pub beat_splitting_khz: Option<f64>,
    pub durations_s: Vec<f64>,
    #[serde(default)]
    pub contrast: ContrastMap,
}

pub fn default_decay_exponent() -> f64 {
    2.0
}

impl RamseyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t2_star_s > 0.0 && self.t2_star_s.is_finite()) {
            return Err(Error::invalid("T2* must be positive"));
        }
        if !(1.0..=3.0).contains(&self.decay_exponent) {
            return Err(Error::invalid("decay exponent must lie in [1, 3]"));
        }
        if !self.detuning_khz.is_finite() || self.beat_splitting_khz.is_some_and(|b| !b.is_finite()) {
            return Err(Error::invalid("frequencies must be finite"));
        }
        check_durations(&self.durations_s)
    }
}

pub fn ramsey_envelope(t2_star_s: f64, k: f64, t_s: f64) -> f64 {
    (-(t_s / t2_star_s).powf(k)).exp()
}

/// Probability of ending bright after free precession of `t_s`.
pub fn ramsey_probability(detuning_khz: f64, t2_star_s: f64, k: f64, beat_khz: Option<f64>, t_s: f64) -> f64 {
    let beat = beat_khz.map_or(1.0, |b| (PI * b * 1e3 * t_s).cos());
    0.5 * (1.0 + (2.0 * PI * detuning_khz * 1e3 * t_s).cos() * beat * ramsey_envelope(t2_star_s, k, t_s))
}

pub fn ramsey_signal(cfg: &RamseyConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(cfg
        .durations_s
        .iter()
        .map(|&t| {
            cfg.contrast.apply(ramsey_probability(
                cfg.detuning_khz,
                cfg.t2_star_s,
                cfg.decay_exponent,
                cfg.beat_splitting_khz,
                t,
            ))
        })
        .collect())
}

/// Synthetic shot noise: each value becomes `Poisson(signal·scale)/scale`.
pub fn poisson_sample(signal: &[f64], scale: f64, seed: u64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("sampling scale must be positive"));
    }
    let mut rng = rng::stream(seed, 0);
    Ok(signal
        .iter()
        .map(|&s| poisson_draw(s.max(0.0) * scale, &mut rng) as f64 / scale)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RamseyFit {
    pub detuning_khz: f64,
    pub t2_star_s: f64,
    pub beat_splitting_khz: Option<f64>,
    pub decay_exponent: f64,
    pub contrast: ContrastMap,
    pub rss: f64,
    pub converged: bool,
}

/// Least-squares offset and amplitude of `y ≈ a + b·x`, with residual sum.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sx += xi;
        sy += yi;
        sxx += xi * xi;
        sxy += xi * yi;
    }
    let det = n * sxx - sx * sx;
    let (a, b) = if det.abs() < 1e-300 {
        (sy / n, 0.0)
    } else {
        ((sxx * sy - sx * sxy) / det, (n * sxy - sx * sy) / det)
    };
    let rss = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    (a, b, rss)
}

/// Fits a Ramsey trace with the decay exponent held at `decay_exponent`.
///
/// Contrast levels are solved linearly for each trial of the nonlinear
/// parameters. With `with_beat`, the beat is taken to be the slower of the two
/// modulations (`Δ_beat ≤ 2δ`), since the product of cosines is otherwise
/// symmetric under their exchange.
pub fn fit_ramsey(durations_s: &[f64], signal: &[f64], decay_exponent: f64, with_beat: bool) -> Result<RamseyFit> {
    if durations_s.len() != signal.len() || durations_s.len() < 6 {
        return Err(Error::invalid("need at least six matching samples"));
    }
    check_durations(durations_s)?;
    if !(1.0..=3.0).contains(&decay_exponent) {
        return Err(Error::invalid("decay exponent must lie in [1, 3]"));
    }
    let t_max = durations_s.iter().copied().fold(0.0, f64::max);
    let mut ts: Vec<f64> = durations_s.to_vec();
    ts.sort_by(f64::total_cmp);
    let dt_min = ts
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !(t_max > 0.0 && dt_min.is_finite()) {
        return Err(Error::invalid("durations must span a positive interval"));
    }
    let nyquist_khz = 0.5 / dt_min / 1e3;

    let rss = |delta: f64, t2: f64, beat: Option<f64>| -> (f64, f64, f64) {
        let x: Vec<f64> = durations_s
            .iter()
            .map(|&t| ramsey_probability(delta, t2, decay_exponent, beat, t))
            .collect();
        linear_fit(&x, signal)
    };

    // Coarse grid at a quarter of the frequency resolution. The residual is
    // affine invariant in the regressor, so tabulated cosines and envelopes
    // can be multiplied directly.
    let df = 0.25 / t_max / 1e3;
    let freqs: Vec<f64> = (0..).map(|i| i as f64 * df).take_while(|f| *f <= nyquist_khz).collect();
    let t2s: Vec<f64> = [0.1, 0.2, 0.4, 0.8, 1.6].iter().map(|f| f * t_max).collect();
    let table = |g: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
        freqs.iter().map(|&f| durations_s.iter().map(|&t| g(f * 1e3 * t)).collect()).collect()
    };
    let cos_d = table(&|ft| (2.0 * PI * ft).cos());
    let cos_b = if with_beat { table(&|ft| (PI * ft).cos()) } else { Vec::new() };
    let envs: Vec<Vec<f64>> = t2s
        .iter()
        .map(|&t2| durations_s.iter().map(|&t| ramsey_envelope(t2, decay_exponent, t)).collect())
        .collect();
    let mut best = (f64::INFINITY, [0.0; 3]);
    let mut carrier = vec![0.0; durations_s.len()];
    let mut x = vec![0.0; durations_s.len()];
    for (i, &d) in freqs.iter().enumerate() {
        let n_beat = if with_beat { freqs.iter().take_while(|b| **b <= 2.0 * d).count() } else { 1 };
        for j in 0..n_beat {
            if with_beat {
                for ((c, a), b) in carrier.iter_mut().zip(&cos_d[i]).zip(&cos_b[j]) {
                    *c = a * b;
                }
            } else {
                carrier.copy_from_slice(&cos_d[i]);
            }
            for (k, env) in envs.iter().enumerate() {
                for ((xi, c), e) in x.iter_mut().zip(&carrier).zip(env) {
                    *xi = c * e;
                }
                let r = linear_fit(&x, signal).2;
                if r < best.0 {
                    best = (r, [d, t2s[k], freqs[j]]);
                }
            }
        }
    }
    if !with_beat {
        best.1[2] = 0.0;
    }

    let unpack = |x: &[f64]| -> (f64, f64, Option<f64>) {
        let t2 = x[1].clamp(-50.0, 50.0).exp();
        (x[0], t2, with_beat.then(|| x[2]))
    };
    let objective = |x: &[f64]| {
        let (d, t2, b) = unpack(x);
        rss(d, t2, b).2
    };
    let [d0, t20, b0] = best.1;
    let (x0, steps) = if with_beat {
        (vec![d0, t20.ln(), b0], vec![df, 0.3, df])
    } else {
        (vec![d0, t20.ln()], vec![df, 0.3])
    };
    let nm = NelderMead {
        max_iterations: 5000,
        f_tol_rel: 1e-12,
        f_tol_abs: 1e-15,
        x_tol: 1e-10,
    };
    let m1 = nm.minimize(objective, &x0, &steps);
    let small: Vec<f64> = steps.iter().map(|s| s * 0.1).collect();
    let m = nm.minimize(objective, &m1.x, &small);
    let (d, t2, b) = unpack(&m.x);
    let (a, amp, r) = rss(d, t2, b);
    Ok(RamseyFit {
        detuning_khz: d.abs(),
        t2_star_s: t2,
        beat_splitting_khz: b.map(f64::abs),
        decay_exponent,
        contrast: ContrastMap {
            dark_level: a,
            bright_level: a + amp,
        },
        rss: r,
        converged: m.converged,
    })
}

/// Nuclear spin of the bath probed by ENDOR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSpin {
    pub species: Species,
    #[serde(rename = "Azz_kHz")]
    pub azz_khz: f64,
    pub amplitude: f64,
    #[serde(rename = "T_rf_s")]
    pub t_rf_s: f64,
}

impl BathSpin {
    /// FWHM of the line in kHz.
    pub fn linewidth_khz(&self) -> f64 {
        0.8 / self.t_rf_s / 1e3
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_rf_s > 0.0 && self.t_rf_s.is_finite()) {
            return Err(Error::invalid("RF pulse duration must be positive"));
        }
        if !self.azz_khz.is_finite() || !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::invalid("coupling and amplitude must be finite, amplitude ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinePeak {
    pub center_khz: f64,
    pub width_khz: f64,
    pub depth: f64,
    pub species: Species,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub f_khz: Vec<f64>,
    pub contrast: Vec<f64>,
    pub peaks: Vec<LinePeak>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndorOptions {
    pub baseline: f64,
    pub gyromagnetic: GyromagneticTable,
}

impl Default for EndorOptions {
    fn default() -> Self {
        Self {
            baseline: 0.05,
            gyromagnetic: GyromagneticTable::default(),
        }
    }
}

/// `sinc²` normalized to 1 at zero with FWHM `fwhm`.
fn sinc2(offset: f64, fwhm: f64) -> f64 {
    // sinc²(x) = (sin πx / πx)² has FWHM 0.885893 in x.
    const HALF_WIDTH_X: f64 = 0.885_893_2;
    let x = PI * HALF_WIDTH_X * offset / fwhm;
    if x.abs() < 1e-8 {
        1.0
    } else {
        (x.sin() / x).powi(2)
    }
}

/// Larmor frequency magnitude in kHz.
pub fn larmor_khz(species: Species, b_t: f64, table: &GyromagneticTable) -> Result<f64> {
    Ok(larmor_frequency(species, b_t, table)?.abs() * 1e3)
}

/// Each bath spin contributes lines at `f_L ± A_zz/2`.
pub fn endor_spectrum(bath: &[BathSpin], b_t: f64, f_grid_khz: &[f64], options: &EndorOptions) -> Result<Spectrum> {
    if f_grid_khz.is_empty() {
        return Err(Error::invalid("frequency grid is empty"));
    }
    if f_grid_khz.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("frequency grid must be finite"));
    }
    let mut sorted: Vec<&BathSpin> = bath.iter().collect();
    for s in &sorted {
        s.validate()?;
    }
    sorted.sort_by(|a, b| {
        (a.species as u8, a.azz_khz, a.amplitude, a.t_rf_s)
            .partial_cmp(&(b.species as u8, b.azz_khz, b.amplitude, b.t_rf_s))
            .expect("finite bath parameters")
    });
    let mut peaks = Vec::new();
    for s in &sorted {
        let fl = larmor_khz(s.species, b_t, &options.gyromagnetic)?;
        for sign in [-1.0, 1.0] {
            peaks.push(LinePeak {
                center_khz: fl + sign * 0.5 * s.azz_khz,
                width_khz: s.linewidth_khz(),
                depth: s.amplitude,
                species: s.species,
            });
        }
    }
    let contrast = f_grid_khz
        .iter()
        .map(|&f| {
            let lines: f64 = peaks.iter().map(|p| p.depth * sinc2(f - p.center_khz, p.width_khz)).sum();
            (options.baseline + lines).clamp(0.0, 1.0)
        })
        .collect();
    let (lo, hi) = f_grid_khz
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &f| (a.min(f), b.max(f)));
    peaks.retain(|p| (lo..=hi).contains(&p.center_khz));
    Ok(Spectrum {
        f_khz: f_grid_khz.to_vec(),
        contrast,
        peaks,
    })
}

/// Local maxima rising at least `min_height` above `baseline`, refined by a
/// parabola through the three highest samples.
pub fn find_peaks(f_khz: &[f64], contrast: &[f64], baseline: f64, min_height: f64) -> Vec<f64> {
    let n = f_khz.len().min(contrast.len());
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let (l, c, r) = (contrast[i - 1], contrast[i], contrast[i + 1]);
        if !(c > l && c >= r) || c - baseline < min_height {
            continue;
        }
        let denom = l - 2.0 * c + r;
        let shift = if denom < 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
        let step = if shift >= 0.0 {
            f_khz[i + 1] - f_khz[i]
        } else {
            f_khz[i] - f_khz[i - 1]
        };
        out.push(f_khz[i] + shift * step);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Low,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeakAssignment {
    pub peaks_khz: Vec<f64>,
    pub species: Option<Species>,
    pub azz_khz: Option<f64>,
    pub confidence: Option<Confidence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Allowed offset of a pair's midpoint from the Larmor frequency.
    pub tolerance_khz: f64,
    /// Couplings above this are not attributed to a species.
    pub max_azz_khz: f64,
    pub gyromagnetic: GyromagneticTable,
}

impl MatchOptions {
    pub fn new(tolerance_khz: f64) -> Self {
        Self {
            tolerance_khz,
            max_azz_khz: 200.0,
            gyromagnetic: GyromagneticTable::default(),
        }
    }
}

/// Greedy symmetric pairing of measured peaks about each species' Larmor
/// frequency. Pairs with the smallest midpoint offset are taken first; left
/// over peaks get a single-sided coupling and low confidence.
pub fn match_peaks(measured_khz: &[f64], b_t: f64, options: &MatchOptions) -> Result<Vec<PeakAssignment>> {
    if options.tolerance_khz.is_nan() || options.tolerance_khz <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let species = [Species::Si29, Species::C13];
    let larmor: Vec<f64> = species
        .iter()
        .map(|&s| larmor_khz(s, b_t, &options.gyromagnetic))
        .collect::<Result<_>>()?;
    let reach = 0.5 * options.max_azz_khz + options.tolerance_khz;
    // Nearest species within reach, per peak.
    let owner: Vec<Option<usize>> = measured_khz
        .iter()
        .map(|&f| {
            (0..species.len())
                .filter(|&k| (f - larmor[k]).abs() <= reach)
                .min_by(|&a, &b| (f - larmor[a]).abs().total_cmp(&(f - larmor[b]).abs()))
        })
        .collect();

    let mut used = vec![false; measured_khz.len()];
    let mut out = Vec::new();
    for (k, &fl) in larmor.iter().enumerate() {
        let mut pairs = Vec::new();
        for i in 0..measured_khz.len() {
            for j in 0..measured_khz.len() {
                let (lo, hi) = (measured_khz[i], measured_khz[j]);
                if owner[i] != Some(k) || owner[j] != Some(k) || !(lo < fl && fl <= hi) {
                    continue;
                }
                let offset = (0.5 * (lo + hi) - fl).abs();
                if offset <= options.tolerance_khz {
                    pairs.push((offset, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, i, j) in pairs {
            if used[i] || used[j] {
                continue;
            }
            used[i] = true;
            used[j] = true;
            out.push(PeakAssignment {
                peaks_khz: vec![measured_khz[i], measured_khz[j]],
                species: Some(species[k]),
                azz_khz: Some(measured_khz[j] - measured_khz[i]),
                confidence: Some(Confidence::High),
            });
        }
    }
    for (i, &f) in measured_khz.iter().enumerate() {
        if used[i] {
            continue;
        }
        out.push(match owner[i] {
            Some(k) => PeakAssignment {
                peaks_khz: vec![f],
                species: Some(species[k]),
                azz_khz: Some(2.0 * (f - larmor[k]).abs()),
                confidence: Some(Confidence::Low),
            },
            None => PeakAssignment {
                peaks_khz: vec![f],
                species: None,
                azz_khz: None,
                confidence: None,
            },
        });
    }
    Ok(out)
}
