//! Derivative-free minimisation (Nelder–Mead downhill simplex).

#[derive(Clone, Debug)]
pub struct NelderMead {
    pub max_iterations: usize,
    /// Converged when the spread of simplex values is below
    /// `f_tol_rel · |f_best| + f_tol_abs` ...
    pub f_tol_rel: f64,
    pub f_tol_abs: f64,
    /// ... and every vertex lies within `x_tol` of the best one (max-norm).
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            f_tol_rel: 1e-6,
            f_tol_abs: 1e-10,
            x_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl NelderMead {
    /// Minimises `f` starting from `x0` with initial simplex offsets `steps`.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], steps: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        assert_eq!(steps.len(), n);
        let mut evaluations = 0usize;
        let mut eval = |x: &[f64]| {
            evaluations += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        if n == 0 {
            let value = eval(x0);
            return Minimum {
                x: Vec::new(),
                value,
                iterations: 0,
                evaluations: 1,
                converged: true,
            };
        }

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), eval(x0)));
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += if steps[i] != 0.0 { steps[i] } else { 1e-3 };
            let v = eval(&x);
            simplex.push((x, v));
        }

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iterations {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let spread = (worst - best).abs();
            let diameter = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread <= self.f_tol_rel * best.abs() + self.f_tol_abs && diameter <= self.x_tol {
                converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let xr = along(alpha);
            let fr = eval(&xr);
            if fr < simplex[0].1 {
                let xe = along(gamma);
                let fe = eval(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(alpha * rho);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
                continue;
            }
            let x_best = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = x_best
                    .iter()
                    .zip(&vertex.0)
                    .map(|(b, v)| b + sigma * (v - b))
                    .collect();
                let v = eval(&x);
                *vertex = (x, v);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum {
            x,
            value,
            iterations,
            evaluations,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            x_tol: 1e-9,
            f_tol_rel: 0.0,
            f_tol_abs: 1e-14,
            ..Default::default()
        };
        let m = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.5, 0.5],
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn one_dimensional_and_iteration_cap() {
        let nm = NelderMead::default();
        let m = nm.minimize(|x| (x[0] - 3.0).powi(2), &[0.0], &[1.0]);
        assert!((m.x[0] - 3.0).abs() < 1e-6);
        let capped = NelderMead {
            max_iterations: 3,
            ..Default::default()
        };
        let m = capped.minimize(|x| (x[0] - 3.0).powi(2), &[0.0], &[0.1]);
        assert!(!m.converged);
        assert_eq!(m.iterations, 3);
    }
}
