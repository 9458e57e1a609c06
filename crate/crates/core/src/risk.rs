//! Empirical plug-in risk estimators over Monte Carlo outcome samples.
//!
//! VaR is the `m`-th order statistic with `m = ceil(alpha * N)`, ES the mean
//! of the `m` smallest outcomes. The graph variants route gradients through
//! the selected samples only: one-hot for VaR, `1/m` on each tail sample for
//! ES, with ties broken by the lowest original index.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::generators::{self, GeneratorParams};
use crate::policy::{self, PolicyParams};
use crate::scoring::RiskEstimate;

/// Monte Carlo settings for generator-implied risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(invalid(format!("need at least 2 Monte Carlo samples, got {}", self.n_samples)));
        }
        Ok(())
    }
}

/// Synthetic outcome sample `l_1..l_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSample {
    pub values: Vec<f64>,
}

impl OutcomeSample {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn var(&self, alpha: f64) -> Result<f64> {
        empirical_var(&self.values, alpha)
    }

    pub fn es(&self, alpha: f64) -> Result<f64> {
        empirical_es(&self.values, alpha)
    }

    pub fn expectile(&self, tau: f64) -> Result<f64> {
        empirical_expectile(&self.values, tau)
    }
}

/// `ceil(alpha * n)` clamped to `1..=n`, robust to `alpha * n` landing a few
/// ulps above an integer.
pub fn tail_count(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    let m = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    (m as usize).clamp(1, n.max(1))
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("risk level must lie in (0,1), got {alpha}")))
    }
}

/// Indices of the sample in ascending (value, index) order.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

pub fn empirical_var(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    if values.is_empty() {
        return Err(Error::Empty("VaR sample"));
    }
    let m = tail_count(alpha, values.len());
    let mut sorted = values.to_vec();
    sorted.select_nth_unstable_by(m - 1, f64::total_cmp);
    Ok(sorted[m - 1])
}

pub fn empirical_es(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    if values.is_empty() {
        return Err(Error::Empty("ES sample"));
    }
    let m = tail_count(alpha, values.len());
    let order = ranked(values);
    let mut tail: Vec<usize> = order[..m].to_vec();
    tail.sort_unstable();
    Ok(tail.iter().map(|&i| values[i]).sum::<f64>() / m as f64)
}

/// Both plug-in estimates from one sort.
pub fn empirical_var_es(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    Ok((empirical_var(values, alpha)?, empirical_es(values, alpha)?))
}

/// Solves `tau * sum (l - m)^+ = (1 - tau) * sum (m - l)^+` by bisection on
/// the sample range, then polishes with one exact solve on the bracketing
/// linear piece.
pub fn empirical_expectile(values: &[f64], tau: f64) -> Result<f64> {
    check_level(tau)?;
    if values.is_empty() {
        return Err(Error::Empty("expectile sample"));
    }
    let residual = |m: f64| expectile_residual(values, tau, m);
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi - lo == 0.0 {
        return Ok(lo);
    }
    for _ in 0..200 {
        if hi - lo <= 1e-10 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    // On the piece containing `mid` the residual is linear in m.
    let (mut above_sum, mut above_n, mut below_sum, mut below_n) = (0.0, 0usize, 0.0, 0usize);
    for &l in values {
        if l > mid {
            above_sum += l;
            above_n += 1;
        } else if l < mid {
            below_sum += l;
            below_n += 1;
        }
    }
    let denom = tau * above_n as f64 + (1.0 - tau) * below_n as f64;
    if denom > 0.0 {
        let exact = (tau * above_sum + (1.0 - tau) * below_sum) / denom;
        if exact >= lo - 1e-10 && exact <= hi + 1e-10 && residual(exact).abs() <= residual(mid).abs() {
            return Ok(exact);
        }
    }
    Ok(mid)
}

/// `tau * sum (l - m)^+ - (1 - tau) * sum (m - l)^+`.
pub fn expectile_residual(values: &[f64], tau: f64, m: f64) -> f64 {
    let (mut up, mut down) = (0.0, 0.0);
    for &l in values {
        if l > m {
            up += l - m;
        } else {
            down += m - l;
        }
    }
    tau * up - (1.0 - tau) * down
}

/// Differentiable VaR of `samples` (a vector, or one row per context).
pub fn var_node(g: &mut Graph, samples: NodeId, n: usize, alpha: f64) -> NodeId {
    g.order_statistic(samples, tail_count(alpha, n))
}

/// Differentiable ES of `samples` (a vector, or one row per context).
pub fn es_node(g: &mut Graph, samples: NodeId, n: usize, alpha: f64) -> NodeId {
    g.tail_mean(samples, tail_count(alpha, n))
}

/// VaR and ES nodes `(batch, 1)` from outcome node `pnl` of shape
/// `(batch * n, 1)`, rows grouped by context.
pub fn grouped_var_es(g: &mut Graph, pnl: NodeId, batch: usize, n: usize, alpha: f64) -> (NodeId, NodeId) {
    let rows = g.reshape(pnl, &[batch, n]);
    (var_node(g, rows, n, alpha), es_node(g, rows, n, alpha))
}

/// Generator-implied (VaR, ES) of `pp`'s outcome at context `c`, from
/// `mc.n_samples` latent draws of stream seed `mc.seed`.
pub fn implied_risk(
    gen: &GeneratorParams,
    c: &Tensor,
    pp: &PolicyParams,
    mc: &McConfig,
    alpha: f64,
) -> Result<RiskEstimate> {
    mc.validate()?;
    check_level(alpha)?;
    let spec = gen.spec();
    if c.numel() != spec.context_len() {
        return Err(invalid(format!("context has {} entries, expected {}", c.numel(), spec.context_len())));
    }
    let ctx = Tensor::new(vec![1, spec.context_len()], c.data().to_vec())?;
    let z = generators::latents(mc.seed, mc.n_samples, spec.latent_dim);
    let ys = gen.forward_batch(&ctx, &z, mc.n_samples)?;
    let ls = policy::outcomes(pp, &ys, spec.horizon)?;
    let (v, e) = empirical_var_es(&ls, alpha)?;
    Ok(RiskEstimate::var_es(v, e))
}

/// Scenario rows evaluated per forward pass in batch estimation.
pub const ROWS_PER_PASS: usize = 16_384;

/// Implied (VaR, ES) for every context row of `contexts` and every policy,
/// indexed `[policy][context]`. Each context reuses latent streams
/// `0..n_samples`, so equal contexts get equal estimates and the result for
/// a single row equals [`implied_risk`].
pub fn implied_risk_batch(
    gen: &GeneratorParams,
    contexts: &Tensor,
    policies: &[PolicyParams],
    mc: &McConfig,
    alpha: f64,
) -> Result<Vec<Vec<RiskEstimate>>> {
    mc.validate()?;
    check_level(alpha)?;
    let spec = gen.spec();
    let (b, d) = contexts.dims2();
    if d != spec.context_len() {
        return Err(invalid(format!("contexts have {d} columns, expected {}", spec.context_len())));
    }
    let n = mc.n_samples;
    let z = generators::latents(mc.seed, n, spec.latent_dim);
    let per_pass = (ROWS_PER_PASS / n).max(1);
    let chunks: Vec<(usize, usize)> = (0..b).step_by(per_pass).map(|s| (s, (s + per_pass).min(b))).collect();
    let run = |&(lo, hi): &(usize, usize)| -> Result<Vec<Vec<RiskEstimate>>> {
        let rows = hi - lo;
        let ctx = Tensor::new(vec![rows, d], contexts.data()[lo * d..hi * d].to_vec())?;
        let zs = Tensor::new(vec![rows * n, spec.latent_dim], z.data().repeat(rows))?;
        let ys = gen.forward_batch(&ctx, &zs, n)?;
        policies
            .iter()
            .map(|pp| {
                let ls = policy::outcomes(pp, &ys, spec.horizon)?;
                ls.chunks_exact(n)
                    .map(|c| empirical_var_es(c, alpha).map(|(v, e)| RiskEstimate::var_es(v, e)))
                    .collect()
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<Vec<RiskEstimate>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<Vec<RiskEstimate>>> = chunks.iter().map(run).collect::<Result<_>>()?;
    let mut out = vec![Vec::with_capacity(b); policies.len()];
    for part in parts {
        for (k, est) in part.into_iter().enumerate() {
            out[k].extend(est);
        }
    }
    Ok(out)
}
