//! DCC(1,1) correlation dynamics on standardized residuals and the joint
//! GARCH + DCC filter and simulator.
//!
//! `Q_t = (1 - a - b) Qbar + a z_{t-1} z_{t-1}' + b Q_{t-1}`, `Q_1 = Qbar`,
//! and `R_t` is `Q_t` rescaled to unit diagonal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::garch::{fit_garch11, sample_variance, GarchCoeffs};
use super::optimize::{minimize, numeric_gradient, BfgsOptions};
use crate::diffcore::{sigmoid, Tensor};
use crate::error::{invalid, Error, Result};

pub const JITTER: f64 = 1e-8;

/// Lower Cholesky factor of the symmetric `m x m` matrix `a`.
pub fn cholesky(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

/// Cholesky factor, retrying once with `JITTER` added to the diagonal.
pub fn cholesky_jittered(a: &[f64], m: usize) -> Result<Vec<f64>> {
    if let Some(l) = cholesky(a, m) {
        return Ok(l);
    }
    let mut b = a.to_vec();
    for i in 0..m {
        b[i * m + i] += JITTER;
    }
    log::warn!("correlation matrix not positive definite; added {JITTER} to the diagonal");
    cholesky(&b, m).ok_or(Error::NotPositiveDefinite)
}

/// `Q` rescaled to unit diagonal.
pub fn correlation(q: &[f64], m: usize) -> Vec<f64> {
    let d: Vec<f64> = (0..m).map(|i| q[i * m + i].sqrt()).collect();
    let mut r = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            r[i * m + j] = if i == j { 1.0 } else { q[i * m + j] / (d[i] * d[j]) };
        }
    }
    r
}

fn sample_correlation(z: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mean: Vec<f64> = (0..m).map(|j| (0..n).map(|t| z[t * m + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; m * m];
    for t in 0..n {
        for i in 0..m {
            for j in 0..m {
                cov[i * m + j] += (z[t * m + i] - mean[i]) * (z[t * m + j] - mean[j]);
            }
        }
    }
    correlation(&cov, m)
}

fn dcc_step(q: &mut [f64], qbar: &[f64], z: &[f64], a: f64, b: f64, m: usize) {
    let c = 1.0 - a - b;
    for i in 0..m {
        for j in 0..m {
            q[i * m + j] = c * qbar[i * m + j] + a * z[i] * z[j] + b * q[i * m + j];
        }
    }
}

/// Mean negative correlation log-likelihood `0.5 * (ln|R_t| + z' R_t^-1 z)`.
fn dcc_nll(z: &[f64], n: usize, m: usize, qbar: &[f64], a: f64, b: f64) -> f64 {
    let mut q = qbar.to_vec();
    let mut total = 0.0;
    for t in 0..n {
        if t > 0 {
            dcc_step(&mut q, qbar, &z[(t - 1) * m..t * m], a, b, m);
        }
        let r = correlation(&q, m);
        let Some(l) = cholesky(&r, m) else { return f64::INFINITY };
        let zt = &z[t * m..(t + 1) * m];
        let mut w = vec![0.0; m];
        let mut logdet = 0.0;
        for i in 0..m {
            let mut s = zt[i];
            for k in 0..i {
                s -= l[i * m + k] * w[k];
            }
            w[i] = s / l[i * m + i];
            logdet += 2.0 * l[i * m + i].ln();
        }
        total += 0.5 * (logdet + w.iter().map(|x| x * x).sum::<f64>());
    }
    total / n as f64
}

fn to_ab(p: &[f64]) -> (f64, f64) {
    let persist = sigmoid(p[0]);
    let share = sigmoid(p[1]);
    (persist * share, persist * (1.0 - share))
}

fn from_ab(a: f64, b: f64) -> Vec<f64> {
    let persist = a + b;
    let logit = |x: f64| (x / (1.0 - x)).ln();
    vec![logit(persist), logit(a / persist)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccFit {
    pub a: f64,
    pub b: f64,
    pub qbar: Vec<f64>,
    /// Correlation log-likelihood (without the residual-norm term).
    pub loglik: f64,
    /// Log-likelihood after each accepted optimizer step of the chosen start.
    pub trace: Vec<f64>,
}

/// Two-start quasi-maximum-likelihood fit; `z` is `n x m` row-major.
pub fn fit_dcc(z: &[f64], n: usize, m: usize) -> Result<DccFit> {
    if m == 0 || z.len() != n * m {
        return Err(invalid("residual matrix does not match n x m"));
    }
    if n < 2 {
        return Err(invalid("DCC fit needs at least two observations"));
    }
    let qbar = sample_correlation(z, n, m);
    if cholesky(&qbar, m).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let nf = n as f64;
    let mut best: Option<DccFit> = None;
    let mut last_err = None;
    for (a0, b0) in [(0.01, 0.5), (0.05, 0.9)] {
        let obj = |p: &[f64]| {
            let mut g = |q: &[f64]| {
                let (a, b) = to_ab(q);
                dcc_nll(z, n, m, &qbar, a, b)
            };
            (g(p), numeric_gradient(&mut g, p, 1e-5))
        };
        let opts = BfgsOptions {
            grad_tol: 1e-6,
            f_tol: 1e-13,
            ..BfgsOptions::default()
        };
        match minimize(obj, &from_ab(a0, b0), opts) {
            Ok(min) => {
                let ll = -nf * min.f;
                if best.as_ref().is_none_or(|b| ll > b.loglik + 1e-9 * b.loglik.abs().max(1.0)) {
                    let (a, b) = to_ab(&min.x);
                    best = Some(DccFit {
                        a,
                        b,
                        qbar: qbar.clone(),
                        loglik: ll,
                        trace: min.trace.iter().map(|v| -nf * v).collect(),
                    });
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("a start ran"))
}

/// Fitted GARCH(1,1) per asset plus DCC(1,1) correlation dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub assets: Vec<GarchCoeffs>,
    pub dcc_a: f64,
    pub dcc_b: f64,
    /// Row-major `M x M` unconditional correlation.
    pub qbar: Vec<f64>,
    /// First-day variances used to start the filter.
    pub initial_variance: Vec<f64>,
}

/// Filter state after observing day `t`: the conditional variances and
/// `Q` that applied to day `t`, and that day's returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub sigma2: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl GarchParams {
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_assets();
        if m == 0 || self.qbar.len() != m * m || self.initial_variance.len() != m {
            return Err(invalid("GARCH parameter shapes are inconsistent"));
        }
        for c in &self.assets {
            c.validate()?;
        }
        if !(self.dcc_a >= 0.0 && self.dcc_b >= 0.0 && self.dcc_a + self.dcc_b < 1.0) {
            return Err(invalid(format!("DCC needs a, b >= 0, a + b < 1 (got {}, {})", self.dcc_a, self.dcc_b)));
        }
        for i in 0..m {
            if (self.qbar[i * m + i] - 1.0).abs() > 1e-9 {
                return Err(invalid("Qbar must have unit diagonal"));
            }
            for j in 0..i {
                if (self.qbar[i * m + j] - self.qbar[j * m + i]).abs() > 1e-12 {
                    return Err(invalid("Qbar must be symmetric"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    fn advance(&self, s: &FilterState, q_next: &mut [f64]) -> Vec<f64> {
        let m = self.n_assets();
        let z: Vec<f64> = (0..m).map(|j| s.r[j] / s.sigma2[j].sqrt()).collect();
        q_next.copy_from_slice(&s.q);
        dcc_step(q_next, &self.qbar, &z, self.dcc_a, self.dcc_b, m);
        (0..m).map(|j| self.assets[j].next_variance(s.sigma2[j], s.r[j])).collect()
    }

    /// Runs the filter over `returns` (`n x M`), returning the state after
    /// each day.
    pub fn filter(&self, returns: &[f64]) -> Result<Vec<FilterState>> {
        let m = self.n_assets();
        if returns.len() % m != 0 {
            return Err(invalid("returns do not divide into asset rows"));
        }
        let n = returns.len() / m;
        let mut out: Vec<FilterState> = Vec::with_capacity(n);
        for t in 0..n {
            let r = returns[t * m..(t + 1) * m].to_vec();
            let state = match out.last() {
                None => FilterState {
                    sigma2: self.initial_variance.clone(),
                    q: self.qbar.clone(),
                    r,
                },
                Some(prev) => {
                    let mut q = vec![0.0; m * m];
                    let sigma2 = self.advance(prev, &mut q);
                    FilterState { sigma2, q, r }
                }
            };
            out.push(state);
        }
        Ok(out)
    }

    /// `n` paths of `horizon` days following `state`, each an `M x T`
    /// tensor; path `k` uses latent stream `k` of `seed`.
    pub fn simulate(&self, state: &FilterState, horizon: usize, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        self.validate()?;
        let m = self.n_assets();
        if state.sigma2.len() != m || state.q.len() != m * m || state.r.len() != m {
            return Err(invalid("filter state does not match the asset count"));
        }
        let path = |k: usize| -> Result<Tensor> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut cur = state.clone();
            let mut out = vec![0.0; m * horizon];
            let mut q = vec![0.0; m * m];
            for t in 0..horizon {
                let sigma2 = self.advance(&cur, &mut q);
                let l = cholesky_jittered(&correlation(&q, m), m)?;
                let xi: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let r: Vec<f64> = (0..m)
                    .map(|i| {
                        let eps: f64 = (0..=i).map(|k| l[i * m + k] * xi[k]).sum();
                        sigma2[i].sqrt() * eps
                    })
                    .collect();
                for j in 0..m {
                    out[j * horizon + t] = r[j];
                }
                cur = FilterState {
                    sigma2,
                    q: q.clone(),
                    r,
                };
            }
            Tensor::matrix(m, horizon, out)
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(path).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n).map(path).collect()
        }
    }
}

/// Two-stage fit: GARCH(1,1) per asset, then DCC on standardized residuals.
pub fn fit_dcc_garch(returns: &[f64], m: usize) -> Result<GarchParams> {
    if m == 0 || returns.len() % m != 0 {
        return Err(invalid("returns do not divide into asset rows"));
    }
    let n = returns.len() / m;
    let columns: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|t| returns[t * m + j]).collect()).collect();
    let fit_one = |col: &Vec<f64>| fit_garch11(col);
    #[cfg(feature = "parallel")]
    let fits: Vec<_> = {
        use rayon::prelude::*;
        columns.par_iter().map(fit_one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let fits: Vec<_> = columns.iter().map(fit_one).collect::<Result<Vec<_>>>()?;
    let mut z = vec![0.0; n * m];
    for (j, f) in fits.iter().enumerate() {
        for t in 0..n {
            z[t * m + j] = columns[j][t] / f.variances[t].sqrt();
        }
    }
    let dcc = fit_dcc(&z, n, m)?;
    Ok(GarchParams {
        assets: fits.iter().map(|f| f.coeffs).collect(),
        dcc_a: dcc.a,
        dcc_b: dcc.b,
        qbar: dcc.qbar,
        initial_variance: columns.iter().map(|c| sample_variance(c)).collect(),
    })
}
