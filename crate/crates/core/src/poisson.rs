//! Poisson probability helpers shared by the count models.

use statrs::function::factorial::ln_factorial;

/// `P(X = k)` for `X ~ Poisson(mu)`, evaluated in log space.
pub fn pmf(mu: f64, k: u64) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    ln_pmf(mu, k).exp()
}

pub fn ln_pmf(mu: f64, k: u64) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * mu.ln() - mu - ln_factorial(k)
}

/// Pmf values `P(0), P(1), …` truncated once the remaining upper tail is
/// below `eps`. Always contains at least `P(0)`.
pub fn pmf_table(mu: f64, eps: f64) -> Vec<f64> {
    let n = upper_quantile(mu, eps) as u64;
    (0..=n).map(|k| pmf(mu, k)).collect()
}

/// Smallest `n` with `P(X > n) < eps` for `X ~ Poisson(mu)`.
pub fn upper_quantile(mu: f64, eps: f64) -> usize {
    if mu == 0.0 {
        return 0;
    }
    let top = (mu + 40.0 * mu.sqrt() + 60.0).ceil() as u64;
    // Tails summed from the top down avoid the cancellation in 1 − cdf.
    let mut tail = 0.0;
    let mut n = top;
    while n > 0 {
        let next = tail + pmf(mu, n);
        if next >= eps {
            return n as usize;
        }
        tail = next;
        n -= 1;
    }
    0
}
