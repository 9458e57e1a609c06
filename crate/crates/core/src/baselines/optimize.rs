//! BFGS with Armijo backtracking for the small smooth likelihood problems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-7,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimises `f`, which returns the value and gradient. Every accepted step
/// lowers the objective, so the trace is non-increasing.
pub fn minimize(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: &[f64], opts: BfgsOptions) -> Result<Minimum> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(Error::Degenerate("objective not finite at the starting point".into()));
    }
    let mut h = identity(n);
    let mut trace = vec![fx];
    let mut stalled = 0;
    for it in 0..opts.max_iter {
        if norm_inf(&g) < opts.grad_tol {
            return Ok(Minimum { x, f: fx, iterations: it, trace });
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            // lost descent direction; restart from steepest descent
            h = identity(n);
            d = g.iter().map(|x| -x).collect();
            slope = dot(&d, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if norm_inf(&g) < opts.grad_tol.sqrt() {
                return Ok(Minimum { x, f: fx, iterations: it, trace });
            }
            return Err(Error::NoConvergence {
                iterations: it,
                grad_norm: norm_inf(&g),
            });
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            bfgs_update(&mut h, &s, &y, sy);
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        if improvement <= opts.f_tol * (1.0 + fx.abs()) {
            stalled += 1;
            if stalled >= 3 {
                return Ok(Minimum { x, f: fx, iterations: it + 1, trace });
            }
        } else {
            stalled = 0;
        }
    }
    if norm_inf(&g) < opts.grad_tol.sqrt() {
        return Ok(Minimum { x, f: fx, iterations: opts.max_iter, trace });
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: norm_inf(&g),
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Central-difference gradient.
pub fn numeric_gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + eps;
            let up = f(&xp);
            xp[i] = orig - eps;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}
