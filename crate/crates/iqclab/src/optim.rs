//! Limited-memory quasi-Newton minimizer shared by the cell problems and
//! the energy-convergence experiments.
//!
//! Deterministic by construction: no randomness, no parallel reductions,
//! so a given objective and starting point always produce bitwise
//! identical iterates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("dimension mismatch: start has {0} entries, gradient buffer {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    /// Gradient dropped below the tolerance.
    GradientTol,
    /// Iteration budget exhausted.
    MaxIters,
    /// Backtracking could not find a decreasing step, even along steepest
    /// descent. The iterate is the best point seen.
    LineSearchStalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsOpts {
    pub max_iters: usize,
    pub memory: usize,
    /// Convergence test: `max|g_i| <= gradient_tol * (1 + |f|)`.
    pub gradient_tol: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOpts {
    fn default() -> Self {
        LbfgsOpts {
            max_iters: 200,
            memory: 8,
            gradient_tol: 1e-8,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f` starting from `x0`. The objective fills `grad` and
/// returns the value; it may return non-finite values away from the
/// feasible region (the line search backs off), but must be finite at
/// `x0`.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOpts) -> Result<LbfgsResult, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut val = f(&x, &mut g);
    if !val.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteStart);
    }

    // Ring buffers of displacement / gradient-change pairs.
    let mem = opts.memory.max(1);
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(mem);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(mem);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(mem);

    let mut iterations = 0;
    let mut stop = StopReason::MaxIters;

    for iter in 0..opts.max_iters {
        iterations = iter;
        if inf_norm(&g) <= opts.gradient_tol * (1.0 + val.abs()) {
            stop = StopReason::GradientTol;
            break;
        }

        // Two-loop recursion for p = -H g.
        let mut p: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &p);
            alphas[i] = a;
            for (pj, yj) in p.iter_mut().zip(&y_hist[i]) {
                *pj -= a * yj;
            }
        }
        if k > 0 {
            let last = k - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for pj in p.iter_mut() {
                *pj *= gamma;
            }
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &p);
            for (pj, sj) in p.iter_mut().zip(&s_hist[i]) {
                *pj += (alphas[i] - b) * sj;
            }
        }

        let mut descent = dot(&g, &p);
        if !(descent < 0.0) {
            // Stale curvature information; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            p = g.iter().map(|v| -v).collect();
            descent = dot(&g, &p);
            if !(descent < 0.0) {
                stop = StopReason::GradientTol; // gradient is exactly zero
                break;
            }
        }

        // Backtracking line search with the usual sufficient-decrease rule.
        let mut step = if k == 0 {
            (1.0 / inf_norm(&p).max(1e-30)).min(1.0)
        } else {
            1.0
        };
        let mut found = false;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut val_new = 0.0;
        for _ in 0..opts.max_line_search {
            for ((xn, xi), pi) in x_new.iter_mut().zip(&x).zip(&p) {
                *xn = xi + step * pi;
            }
            val_new = f(&x_new, &mut g_new);
            if val_new.is_finite() && val_new <= val + 1e-4 * step * descent {
                found = true;
                break;
            }
            step *= 0.5;
        }
        if !found {
            if k > 0 {
                // Retry this iteration from scratch as steepest descent.
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            stop = StopReason::LineSearchStalled;
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        if sy > 1e-12 * s_norm * y_norm && g_new.iter().all(|v| v.is_finite()) {
            if s_hist.len() == mem {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }

        x = x_new;
        g = g_new;
        val = val_new;
    }

    let gradient_norm = inf_norm(&g);
    let converged = matches!(stop, StopReason::GradientTol);
    Ok(LbfgsResult {
        x,
        value: val,
        gradient_norm,
        iterations,
        converged,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_an_ill_conditioned_quadratic() {
        // f(x) = 1/2 sum c_i (x_i - i)^2 with condition number 100.
        let n = 50;
        let coeff: Vec<f64> = (0..n).map(|i| 1.0 + 99.0 * (i as f64) / (n as f64 - 1.0)).collect();
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..n {
                let d = x[i] - target[i];
                v += 0.5 * coeff[i] * d * d;
                g[i] = coeff[i] * d;
            }
            v
        };
        let res = lbfgs(f, &vec![0.0; n], &LbfgsOpts::default()).unwrap();
        assert!(res.converged, "stopped with {:?}", res.stop);
        for i in 0..n {
            assert!((res.x[i] - target[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let opts = LbfgsOpts {
            max_iters: 500,
            ..LbfgsOpts::default()
        };
        let res = lbfgs(f, &[-1.2, 1.0], &opts).unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backs_off_from_non_finite_regions() {
        // Objective defined only on x > 0; minimum at x = 1.
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = f64::NAN;
                return f64::INFINITY;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let res = lbfgs(f, &[3.0], &LbfgsOpts::default()).unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_finite_start() {
        let f = |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::INFINITY
        };
        assert!(matches!(
            lbfgs(f, &[0.0], &LbfgsOpts::default()),
            Err(OptimError::NonFiniteStart)
        ));
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let run = || {
            let f = |x: &[f64], g: &mut [f64]| {
                let mut v = 0.0;
                for i in 0..x.len() {
                    let d = x[i] - (i as f64).sin();
                    v += d * d * d * d + d * d;
                    g[i] = 4.0 * d * d * d + 2.0 * d;
                }
                v
            };
            lbfgs(f, &vec![0.7; 12], &LbfgsOpts::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (x, y) in a.x.iter().zip(&b.x) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
