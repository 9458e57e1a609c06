//! Synthetic datasets with known conditional structure.
//!
//! The i.i.d. families lay each sample out as its own block of
//! `cond_len + horizon` panel rows, so windows never overlap. Every context
//! entry equals one scalar draw `C`, and scenarios are `X * u` where `u_t`
//! ramps linearly from 0 at the first step to 1 at the last. Under the
//! equal-weight policy with cap `kappa` the outcome is therefore `kappa * X`.

use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{make_windows, ReturnPanel, WindowDataset};
use crate::baselines::garch::{simulate_garch11, GarchCoeffs};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `X = (1 + |C|) Z`.
    HeteroScale,
    /// `X = beta C + Z`.
    LinearGaussian,
    /// Asset `j` carries `a Z1 + (-1)^j b Z2`, so equal weights see only `Z1`.
    Spread,
    /// Independent GARCH(1,1) return series, windowed with stride 1.
    Garch,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::HeteroScale => "hetero_scale",
            Family::LinearGaussian => "linear_gaussian",
            Family::Spread => "spread",
            Family::Garch => "garch",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "hetero_scale" => Ok(Family::HeteroScale),
            "linear_gaussian" => Ok(Family::LinearGaussian),
            "spread" => Ok(Family::Spread),
            "garch" => Ok(Family::Garch),
            _ => Err(invalid(format!("unknown synthetic family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub family: Family,
    pub n_samples: usize,
    pub n_assets: usize,
    pub cond_len: usize,
    pub horizon: usize,
    pub seed: u64,
    pub beta: f64,
    pub spread: (f64, f64),
    pub garch: GarchCoeffs,
}

impl SynthConfig {
    pub fn new(family: Family, n_samples: usize) -> Self {
        Self {
            family,
            n_samples,
            n_assets: 2,
            cond_len: 5,
            horizon: 10,
            seed: 0,
            beta: 0.5,
            spread: (0.2, 1.0),
            garch: GarchCoeffs::new(0.05, 0.10, 0.85),
        }
    }

    pub fn with_dims(mut self, n_assets: usize, cond_len: usize, horizon: usize) -> Self {
        self.n_assets = n_assets;
        self.cond_len = cond_len;
        self.horizon = horizon;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Ramp weight `u_t`, `t` zero-based.
    pub fn ramp(&self, t: usize) -> f64 {
        t as f64 / (self.horizon - 1) as f64
    }

    /// Mean and scale of `X` given context value `c`, for the Gaussian families.
    pub fn outcome_law(&self, c: f64) -> Option<(f64, f64)> {
        match self.family {
            Family::HeteroScale => Some((0.0, 1.0 + c.abs())),
            Family::LinearGaussian => Some((self.beta * c, 1.0)),
            Family::Spread => Some((0.0, self.spread.0)),
            Family::Garch => None,
        }
    }
}

fn day(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date") + Days::new(i as u64)
}

pub fn synthetic(cfg: &SynthConfig) -> Result<WindowDataset> {
    if cfg.n_samples == 0 || cfg.n_assets == 0 || cfg.cond_len == 0 || cfg.horizon < 2 {
        return Err(invalid("synthetic data needs samples, assets, context and a horizon of at least 2"));
    }
    let m = cfg.n_assets;
    let assets: Vec<String> = (0..m).map(|j| format!("S{j}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    if cfg.family == Family::Garch {
        let n = cfg.n_samples + cfg.cond_len + cfg.horizon - 1;
        let mut returns = vec![0.0; n * m];
        for j in 0..m {
            let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed);
            stream.set_stream(j as u64 + 1);
            let series = simulate_garch11(&cfg.garch, n, &mut stream)?;
            for (i, r) in series.iter().enumerate() {
                returns[i * m + j] = *r;
            }
        }
        let panel = ReturnPanel::new((0..n).map(day).collect(), assets, returns)?;
        return make_windows(&panel, cfg.cond_len, cfg.horizon, 1);
    }
    let block = cfg.cond_len + cfg.horizon;
    let rows = cfg.n_samples * block;
    let mut returns = vec![0.0; rows * m];
    for i in 0..cfg.n_samples {
        let c: f64 = normal();
        let z1: f64 = normal();
        let z2: f64 = if cfg.family == Family::Spread { normal() } else { 0.0 };
        let base = i * block;
        for t in 0..cfg.cond_len {
            returns[(base + t) * m..(base + t + 1) * m].fill(c);
        }
        for t in 0..cfg.horizon {
            let u = cfg.ramp(t);
            for j in 0..m {
                let x = match cfg.family {
                    Family::HeteroScale => (1.0 + c.abs()) * z1,
                    Family::LinearGaussian => cfg.beta * c + z1,
                    Family::Spread => {
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        cfg.spread.0 * z1 + sign * cfg.spread.1 * z2
                    }
                    Family::Garch => unreachable!(),
                };
                returns[(base + cfg.cond_len + t) * m + j] = x * u;
            }
        }
    }
    let panel = ReturnPanel::new((0..rows).map(day).collect(), assets, returns)?;
    make_windows(&panel, cfg.cond_len, cfg.horizon, block)
}
