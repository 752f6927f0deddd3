//! Maximum-likelihood estimation of switching and emission rates from
//! photon-count histograms.

use serde::Serialize;

use super::{auto_n_max, count_distribution_truncated, Histogram, ReadoutParams, SpinState};
use crate::error::{Error, Result};
use crate::optim::NelderMead;

/// Which fields of [`ReadoutParams`] the fit may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FitMask {
    pub gamma_bright: bool,
    pub gamma_dark: bool,
    pub lambda_bright: bool,
    pub lambda_dark: bool,
}

impl FitMask {
    pub fn all() -> Self {
        Self {
            gamma_bright: true,
            gamma_dark: true,
            lambda_bright: true,
            lambda_dark: true,
        }
    }

    pub fn rates_only() -> Self {
        Self {
            lambda_bright: false,
            lambda_dark: false,
            ..Self::all()
        }
    }

    fn flags(&self) -> [bool; 4] {
        [
            self.gamma_bright,
            self.gamma_dark,
            self.lambda_bright,
            self.lambda_dark,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub grid_points_per_decade: usize,
    pub grid_min_hz: f64,
    pub grid_max_hz: f64,
    pub optimizer: NelderMead,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid_points_per_decade: 5,
            grid_min_hz: 0.1,
            grid_max_hz: 1e4,
            optimizer: NelderMead {
                max_iterations: 4000,
                f_tol_rel: 1e-6,
                f_tol_abs: 1e-9,
                x_tol: 1e-6,
            },
        }
    }
}

/// Half-widths at `Δ log L = 0.5`; `None` for fixed fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ParamWidths {
    pub gamma_bright_hz: Option<f64>,
    pub gamma_dark_hz: Option<f64>,
    pub lambda_bright: Option<f64>,
    pub lambda_dark: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    pub params: ReadoutParams,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub half_widths: ParamWidths,
    pub converged: bool,
    pub evaluations: usize,
}

fn get(p: &ReadoutParams, i: usize) -> f64 {
    match i {
        0 => p.gamma_bright_hz,
        1 => p.gamma_dark_hz,
        2 => p.lambda_bright,
        _ => p.lambda_dark,
    }
}

fn set(p: &mut ReadoutParams, i: usize, v: f64) {
    match i {
        0 => p.gamma_bright_hz = v,
        1 => p.gamma_dark_hz = v,
        2 => p.lambda_bright = v,
        _ => p.lambda_dark = v,
    }
}

const PMF_FLOOR: f64 = 1e-300;

/// `Σ_h Σ_n counts_h(n)·log pmf_h(n)` where each histogram is evaluated at
/// its own block length.
pub fn log_likelihood(data: &[(Histogram, SpinState)], params: &ReadoutParams) -> Result<f64> {
    let mut total = 0.0;
    for (hist, s0) in data {
        let n = hist
            .repetitions
            .ok_or_else(|| Error::invalid("histogram is missing its repetition count"))?;
        let p = params.with_repetitions(n);
        let n_max = auto_n_max(&p).max(hist.counts.len());
        let pmf = count_distribution_truncated(&p, *s0, n_max)?;
        for (k, &c) in hist.counts.iter().enumerate() {
            if c > 0 {
                total += c as f64 * pmf.marginal[k].max(PMF_FLOOR).ln();
            }
        }
    }
    Ok(total)
}

/// Fits the free fields of `init` to the histograms by maximum likelihood.
///
/// Free rates are first located on a log-spaced grid, then all free fields
/// are refined by a simplex search in log coordinates. Half-widths come from
/// one-dimensional likelihood slices through the optimum.
pub fn fit_rates(
    data: &[(Histogram, SpinState)],
    init: &ReadoutParams,
    free: FitMask,
    options: &FitOptions,
) -> Result<RateFit> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no histograms to fit"));
    }
    let has = |s: SpinState| data.iter().any(|(_, s0)| *s0 == s);
    if free.gamma_bright && free.gamma_dark && !(has(SpinState::Bright) && has(SpinState::Dark)) {
        return Err(Error::invalid(
            "fitting both switching rates needs a histogram for each initial state",
        ));
    }
    let flags = free.flags();
    let free_idx: Vec<usize> = (0..4).filter(|&i| flags[i]).collect();

    let objective = |p: &ReadoutParams| -> f64 {
        if p.validate().is_err() {
            return f64::INFINITY;
        }
        match log_likelihood(data, p) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    let initial_ll = -objective(init);
    let mut evaluations = 1usize;

    // Coarse grid over the free switching rates.
    let mut start = init.clone();
    let rate_idx: Vec<usize> = free_idx.iter().copied().filter(|&i| i < 2).collect();
    if !rate_idx.is_empty() {
        let grid = log_grid(options.grid_min_hz, options.grid_max_hz, options.grid_points_per_decade);
        let mut best = (objective(init), init.clone());
        let mut idx = vec![0usize; rate_idx.len()];
        'outer: loop {
            let mut p = init.clone();
            for (k, &i) in rate_idx.iter().enumerate() {
                set(&mut p, i, grid[idx[k]]);
            }
            let v = objective(&p);
            evaluations += 1;
            if v < best.0 {
                best = (v, p);
            }
            for i in idx.iter_mut() {
                *i += 1;
                if *i < grid.len() {
                    continue 'outer;
                }
                *i = 0;
            }
            break;
        }
        start = best.1;
    }

    // Simplex refinement in log coordinates.
    let floor = |i: usize| if i < 2 { 1e-6 } else { 1e-9 };
    let to_params = |x: &[f64]| {
        let mut p = start.clone();
        for (k, &i) in free_idx.iter().enumerate() {
            set(&mut p, i, x[k].clamp(-40.0, 40.0).exp());
        }
        p
    };
    let mut x: Vec<f64> = free_idx
        .iter()
        .map(|&i| get(&start, i).max(floor(i)).ln())
        .collect();
    let steps = vec![0.3; x.len()];
    let mut converged = false;
    let mut best_value = objective(&to_params(&x));
    let mut iterations = 0;
    // A restart from the optimum guards against a prematurely collapsed simplex.
    for _ in 0..2 {
        let m = options.optimizer.minimize(|x| objective(&to_params(x)), &x, &steps);
        evaluations += m.evaluations;
        iterations += m.iterations;
        converged = m.converged;
        if m.value <= best_value {
            best_value = m.value;
            x = m.x;
        }
        if !converged {
            break;
        }
    }
    let fitted = if free_idx.is_empty() { init.clone() } else { to_params(&x) };
    let mut ll = -best_value;
    let mut fitted = fitted;
    if free_idx.is_empty() {
        ll = initial_ll;
    }
    if initial_ll > ll {
        // The simplex never returns worse than its start, but the grid may
        // have moved the start away from a better initial guess.
        fitted = init.clone();
        ll = initial_ll;
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            best_value: ll,
            best_point: (0..4).map(|i| get(&fitted, i)).collect(),
        });
    }

    let mut widths = ParamWidths::default();
    for &i in &free_idx {
        let w = slice_half_width(&fitted, i, ll, &|p| -objective(p));
        match i {
            0 => widths.gamma_bright_hz = w,
            1 => widths.gamma_dark_hz = w,
            2 => widths.lambda_bright = w,
            _ => widths.lambda_dark = w,
        }
    }

    Ok(RateFit {
        params: fitted,
        log_likelihood: ll,
        initial_log_likelihood: initial_ll,
        half_widths: widths,
        converged,
        evaluations,
    })
}

fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round() as usize;
    (0..=n)
        .map(|k| lo * 10f64.powf(k as f64 / per_decade as f64))
        .collect()
}

/// Half-width of the `Δ log L = 0.5` interval along field `i`, averaged over
/// the two sides that could be bracketed.
fn slice_half_width(
    at: &ReadoutParams,
    i: usize,
    ll_max: f64,
    ll: &dyn Fn(&ReadoutParams) -> f64,
) -> Option<f64> {
    let center = get(at, i);
    let target = ll_max - 0.5;
    let eval = |v: f64| {
        let mut p = at.clone();
        set(&mut p, i, v);
        ll(&p)
    };
    let side = |dir: f64| -> Option<f64> {
        let mut step = (center.abs() * 0.01).max(1e-6);
        let mut inner = 0.0;
        for _ in 0..60 {
            let v = center + dir * step;
            if v < 0.0 {
                return None;
            }
            if eval(v) < target {
                let (mut lo, mut hi) = (inner, step);
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if eval(center + dir * mid) < target {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            inner = step;
            step *= 2.0;
        }
        None
    };
    match (side(-1.0), side(1.0)) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (a, b) => a.or(b),
    }
}
