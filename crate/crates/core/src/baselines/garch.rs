//! Univariate zero-mean GARCH(1,1): `s2_t = omega + a r_{t-1}^2 + b s2_{t-1}`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::optimize::{minimize, BfgsOptions};
use crate::error::{invalid, Error, Result};

pub const MIN_SERIES_LEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchCoeffs {
    pub omega: f64,
    pub a: f64,
    pub b: f64,
}

impl GarchCoeffs {
    pub fn new(omega: f64, a: f64, b: f64) -> Self {
        Self { omega, a, b }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.omega > 0.0 && self.a >= 0.0 && self.b >= 0.0 && self.a + self.b < 1.0;
        if ok && self.omega.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!(
                "GARCH coefficients need omega > 0, a, b >= 0, a + b < 1 (got {self:?})"
            )))
        }
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.a - self.b)
    }

    pub fn next_variance(&self, s2: f64, r: f64) -> f64 {
        self.omega + self.a * r * r + self.b * s2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub coeffs: GarchCoeffs,
    /// In-sample conditional variances, `s2_1` being the sample variance.
    pub variances: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    /// Log-likelihood after each accepted optimizer step of the chosen start.
    pub trace: Vec<f64>,
}

pub fn sample_variance(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn conditional_variances(c: &GarchCoeffs, r: &[f64], s2_first: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    let mut s2 = s2_first;
    for t in 0..r.len() {
        if t > 0 {
            s2 = c.next_variance(s2, r[t - 1]);
        }
        out.push(s2);
    }
    out
}

/// Gaussian log-likelihood of `r` given conditional variances.
pub fn gaussian_loglik(r: &[f64], s2: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * r
        .iter()
        .zip(s2)
        .map(|(x, v)| ln2pi + v.ln() + x * x / v)
        .sum::<f64>()
}

fn logistic(x: f64) -> f64 {
    crate::diffcore::sigmoid(x)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained coordinates: `ln omega`, `logit(a + b)`, `logit(a / (a + b))`.
fn to_coeffs(p: &[f64]) -> GarchCoeffs {
    let persist = logistic(p[1]);
    let share = logistic(p[2]);
    GarchCoeffs::new(p[0].exp(), persist * share, persist * (1.0 - share))
}

fn from_coeffs(c: &GarchCoeffs) -> Vec<f64> {
    let persist = c.a + c.b;
    vec![c.omega.ln(), logit(persist), logit(c.a / persist)]
}

/// Mean negative log-likelihood (without the constant) and its gradient
/// in the unconstrained coordinates.
fn objective(r: &[f64], s2_first: f64, p: &[f64]) -> (f64, Vec<f64>) {
    let c = to_coeffs(p);
    let n = r.len() as f64;
    let (mut s2, mut d_om, mut d_a, mut d_b) = (s2_first, 0.0, 0.0, 0.0);
    let (mut f, mut g_om, mut g_a, mut g_b) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..r.len() {
        if t > 0 {
            let prev = s2;
            let rp = r[t - 1];
            s2 = c.next_variance(prev, rp);
            d_om = 1.0 + c.b * d_om;
            d_a = rp * rp + c.b * d_a;
            d_b = prev + c.b * d_b;
        }
        if !(s2 > 0.0) {
            return (f64::INFINITY, vec![0.0; 3]);
        }
        let x2 = r[t] * r[t];
        f += 0.5 * (s2.ln() + x2 / s2);
        let dl = 0.5 * (1.0 / s2 - x2 / (s2 * s2));
        g_om += dl * d_om;
        g_a += dl * d_a;
        g_b += dl * d_b;
    }
    let persist = logistic(p[1]);
    let share = logistic(p[2]);
    let dp = persist * (1.0 - persist);
    let dq = share * (1.0 - share);
    let grad = vec![
        g_om * c.omega,
        g_a * share * dp + g_b * (1.0 - share) * dp,
        (g_a - g_b) * persist * dq,
    ];
    (f / n, grad.into_iter().map(|x| x / n).collect())
}

const STARTS: [(f64, f64); 2] = [(0.05, 0.10), (0.08, 0.90)];

/// Gaussian quasi-maximum-likelihood fit over two starting points; the
/// first start wins ties.
pub fn fit_garch11(r: &[f64]) -> Result<GarchFit> {
    if r.len() < MIN_SERIES_LEN {
        return Err(invalid(format!(
            "GARCH fit needs at least {MIN_SERIES_LEN} observations, got {}",
            r.len()
        )));
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(invalid("GARCH input contains non-finite values"));
    }
    let var = sample_variance(r);
    let scale = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
    if !(var > 1e-12 * scale) {
        return Err(Error::Degenerate("return series has zero variance".into()));
    }
    let n = r.len() as f64;
    let ln2pi_term = -0.5 * n * (2.0 * std::f64::consts::PI).ln();
    let mut best: Option<(f64, GarchCoeffs, usize, Vec<f64>)> = None;
    let mut last_err = None;
    for (a, b) in STARTS {
        let start = GarchCoeffs::new(var * (1.0 - a - b), a, b);
        match minimize(|p| objective(r, var, p), &from_coeffs(&start), BfgsOptions::default()) {
            Ok(m) => {
                let ll = ln2pi_term - n * m.f;
                let better = best.as_ref().is_none_or(|(b_ll, ..)| ll > b_ll + 1e-9 * b_ll.abs().max(1.0));
                if better {
                    let trace = m.trace.iter().map(|f| ln2pi_term - n * f).collect();
                    best = Some((ll, to_coeffs(&m.x), m.iterations, trace));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (loglik, coeffs, iterations, trace) = match best {
        Some(b) => b,
        None => return Err(last_err.expect("at least one start ran")),
    };
    Ok(GarchFit {
        variances: conditional_variances(&coeffs, r, var),
        coeffs,
        loglik,
        iterations,
        trace,
    })
}

/// `n` returns started from the stationary variance.
pub fn simulate_garch11(c: &GarchCoeffs, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    c.validate()?;
    let mut s2 = c.unconditional_variance();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            s2 = c.next_variance(s2, out[t - 1]);
        }
        let eps: f64 = StandardNormal.sample(rng);
        out.push(s2.sqrt() * eps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = simulate_garch11(&GarchCoeffs::new(0.1, 0.2, 0.6), 300, &mut rng).unwrap();
        let var = sample_variance(&r);
        let p = from_coeffs(&GarchCoeffs::new(0.2, 0.1, 0.5));
        let (_, g) = objective(&r, var, &p);
        for i in 0..3 {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (objective(&r, var, &up).0 - objective(&r, var, &dn).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn reparameterisation_round_trip() {
        let c = GarchCoeffs::new(0.05, 0.1, 0.85);
        let back = to_coeffs(&from_coeffs(&c));
        assert!((back.omega - c.omega).abs() < 1e-15);
        assert!((back.a - c.a).abs() < 1e-15 && (back.b - c.b).abs() < 1e-15);
    }

    #[test]
    fn iid_input_has_no_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma2 = 2.0f64;
        let r: Vec<f64> = (0..3000)
            .map(|_| sigma2.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let fit = fit_garch11(&r).unwrap();
        let c = fit.coeffs;
        assert!(c.a < 0.03, "{c:?}");
        assert!(c.b < 0.5, "{c:?}");
        assert!((c.unconditional_variance() / sigma2 - 1.0).abs() < 0.1, "{c:?}");
    }

    #[test]
    fn likelihood_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = simulate_garch11(&GarchCoeffs::new(0.05, 0.1, 0.85), 1000, &mut rng).unwrap();
        let fit = fit_garch11(&r).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!((fit.trace.last().unwrap() - fit.loglik).abs() < 1e-6);
        assert!((gaussian_loglik(&r, &fit.variances) - fit.loglik).abs() < 1e-6);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(fit_garch11(&[0.01; 200]), Err(Error::Degenerate(_))));
        assert!(fit_garch11(&[0.01; 20]).is_err());
        assert!(GarchCoeffs::new(0.1, 0.5, 0.5).validate().is_err());
    }
}
