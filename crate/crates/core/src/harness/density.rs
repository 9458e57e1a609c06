//! Gaussian kernel densities of synthetic PnL and of tail scenarios.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::generators::{self, GeneratorParams};
use crate::policy::{self, PolicyParams};
use crate::risk::{empirical_var, McConfig};

/// Points per marginal density grid.
pub const MARGINAL_POINTS: usize = 64;

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to the standard
/// deviation when the IQR is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Empty("kernel density sample"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Degenerate("kernel density sample has no spread".into()));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Gaussian kernel density of `samples` at each grid point.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Empty("density grid"));
    }
    if samples.is_empty() {
        return Err(Error::Empty("kernel density sample"));
    }
    if !(bandwidth > 0.0) {
        return Err(invalid("bandwidth must be positive"));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let eval = |x: &f64| samples.iter().map(|s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp()).sum::<f64>() * norm;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(grid.par_iter().map(eval).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(grid.iter().map(eval).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub context: usize,
    pub policy: String,
    pub bandwidth: f64,
    /// Empirical 5% quantile of the synthetic PnL.
    pub tail_quantile: f64,
    pub density: Vec<f64>,
}

/// Density of one (asset, time) return among tail-contributing scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub context: usize,
    pub policy: String,
    pub asset: usize,
    pub time: usize,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    pub grid: Vec<f64>,
    pub rows: Vec<DensityRow>,
    pub marginals: Vec<MarginalRow>,
}

impl DensityTable {
    /// Long format `context,policy,x,density,in_tail`.
    pub fn pnl_csv(&self) -> String {
        let mut out = String::from("context,policy,x,density,in_tail\n");
        for r in &self.rows {
            for (x, d) in self.grid.iter().zip(&r.density) {
                let tail = u8::from(*x <= r.tail_quantile);
                let _ = writeln!(out, "{},{},{x:?},{d:?},{tail}", r.context, r.policy);
            }
        }
        out
    }

    /// Long format `context,policy,asset,time,x,density`.
    pub fn marginal_csv(&self) -> String {
        let mut out = String::from("context,policy,asset,time,x,density\n");
        for r in &self.marginals {
            for (x, d) in r.grid.iter().zip(&r.density) {
                let _ = writeln!(out, "{},{},{},{},{x:?},{d:?}", r.context, r.policy, r.asset, r.time);
            }
        }
        out
    }

    pub fn write(&self, pnl_path: &Path, marginal_path: &Path) -> Result<()> {
        std::fs::write(pnl_path, self.pnl_csv())?;
        std::fs::write(marginal_path, self.marginal_csv())?;
        Ok(())
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Synthetic PnL densities per (context, policy) on `grid` and marginal
/// densities of the scenarios whose PnL falls at or below the 5% quantile.
/// Every context uses the same latent draws.
pub fn export_pnl_density(
    gen: &GeneratorParams,
    contexts: &Tensor,
    policies: &[PolicyParams],
    mc: &McConfig,
    grid: &[f64],
) -> Result<DensityTable> {
    if grid.is_empty() {
        return Err(Error::Empty("density grid"));
    }
    mc.validate()?;
    let spec = gen.spec();
    let (b, d) = contexts.dims2();
    if d != spec.context_len() {
        return Err(invalid(format!("contexts have {d} columns, expected {}", spec.context_len())));
    }
    let n = mc.n_samples;
    let z = generators::latents(mc.seed, n, spec.latent_dim);
    let width = spec.scenario_len();
    let mut rows = Vec::new();
    let mut marginals = Vec::new();
    for i in 0..b {
        let c = Tensor::new(vec![1, d], contexts.row(i).to_vec())?;
        let ys = gen.forward_batch(&c, &z, n)?;
        for p in policies {
            let ls = policy::outcomes(p, &ys, spec.horizon)?;
            let q = empirical_var(&ls, 0.05)?;
            let h = silverman_bandwidth(&ls)?;
            rows.push(DensityRow {
                context: i,
                policy: p.name().into(),
                bandwidth: h,
                tail_quantile: q,
                density: kde(&ls, grid, h)?,
            });
            let tail: Vec<usize> = (0..n).filter(|&s| ls[s] <= q).collect();
            for j in 0..spec.n_assets {
                for t in 0..spec.horizon {
                    let vals: Vec<f64> = tail.iter().map(|&s| ys.data()[s * width + j * spec.horizon + t]).collect();
                    let Ok(h) = silverman_bandwidth(&vals) else { continue };
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
                    let mgrid = linspace(lo, hi, MARGINAL_POINTS);
                    marginals.push(MarginalRow {
                        context: i,
                        policy: p.name().into(),
                        asset: j,
                        time: t,
                        density: kde(&vals, &mgrid, h)?,
                        grid: mgrid,
                    });
                }
            }
        }
    }
    Ok(DensityTable {
        grid: grid.to_vec(),
        rows,
        marginals,
    })
}
