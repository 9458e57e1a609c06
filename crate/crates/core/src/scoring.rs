//! Strictly consistent scoring functions.
//!
//! Lower-tail convention: VaR and ES are the lower quantile and lower tail
//! mean of PnL, so `e <= v` for a well-ordered forecast. The joint score uses
//! `H1(v) = v` and `H2(e) = s * exp(e / s)`.
//!
//! Every score has a plain `f64` evaluation and a graph builder that applies
//! the same formula elementwise to tensor nodes. With `smooth = true` the
//! indicator `1{l <= v}` is replaced by the logistic `sigma_k(v - l)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Graph, NodeId};
use crate::error::{invalid, Error, Result};

/// Largest `e / s` accepted before `exp` is considered overflowing.
pub const MAX_EXP_RATIO: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFamily {
    Quantile,
    Expectile,
    JointVarEs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub family: ScoreFamily,
    /// Risk level `alpha` (or `tau` for expectiles).
    pub alpha: f64,
    /// Scale `s` of `H2(e) = s exp(e/s)`.
    pub h2_scale: f64,
    /// Sharpness `k` of the logistic indicator surrogate.
    pub sharpness: f64,
    pub smooth: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            family: ScoreFamily::JointVarEs,
            alpha: 0.05,
            h2_scale: 2.0,
            sharpness: 10.0,
            smooth: false,
        }
    }
}

impl ScoreConfig {
    pub fn joint(alpha: f64, h2_scale: f64) -> Self {
        Self {
            alpha,
            h2_scale,
            ..Self::default()
        }
    }

    pub fn quantile(alpha: f64) -> Self {
        Self {
            family: ScoreFamily::Quantile,
            alpha,
            ..Self::default()
        }
    }

    pub fn expectile(tau: f64) -> Self {
        Self {
            family: ScoreFamily::Expectile,
            alpha: tau,
            ..Self::default()
        }
    }

    pub fn smoothed(mut self, sharpness: f64) -> Self {
        self.smooth = true;
        self.sharpness = sharpness;
        self
    }

    pub fn hard(mut self) -> Self {
        self.smooth = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.h2_scale > 0.0) {
            return Err(invalid(format!("h2_scale must be positive, got {}", self.h2_scale)));
        }
        if !(self.sharpness > 0.0) {
            return Err(invalid(format!("sharpness must be positive, got {}", self.sharpness)));
        }
        Ok(())
    }

    /// `1{ell <= a}` or its logistic surrogate.
    fn indicator(&self, a: f64, ell: f64) -> f64 {
        if self.smooth {
            smooth_indicator(a - ell, self.sharpness)
        } else if ell <= a {
            1.0
        } else {
            0.0
        }
    }
}

/// A point forecast `v`, optionally paired with an expected shortfall `e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub v: f64,
    pub e: Option<f64>,
}

impl RiskEstimate {
    pub fn point(v: f64) -> Self {
        Self { v, e: None }
    }

    pub fn var_es(v: f64, e: f64) -> Self {
        Self { v, e: Some(e) }
    }

    /// Returns false (and logs a warning) when ES lies above VaR.
    pub fn check_order(&self) -> bool {
        match self.e {
            Some(e) if e > self.v => {
                log::warn!("expected shortfall {e} above VaR {}", self.v);
                false
            }
            _ => true,
        }
    }
}

pub fn smooth_indicator(x: f64, k: f64) -> f64 {
    sigmoid(k * x)
}

/// `|alpha - 1{ell <= a}| * |ell - a|`.
pub fn quantile_score(a: f64, ell: f64, cfg: &ScoreConfig) -> f64 {
    (cfg.alpha - cfg.indicator(a, ell)).abs() * (ell - a).abs()
}

/// `|tau - 1{ell <= a}| * (ell - a)^2`.
pub fn expectile_score(a: f64, ell: f64, cfg: &ScoreConfig) -> f64 {
    let d = ell - a;
    (cfg.alpha - cfg.indicator(a, ell)).abs() * d * d
}

pub fn joint_var_es_score(est: &RiskEstimate, ell: f64, cfg: &ScoreConfig) -> Result<f64> {
    let e = est
        .e
        .ok_or_else(|| invalid("joint score needs an expected shortfall"))?;
    let v = est.v;
    let s = cfg.h2_scale;
    let ratio = e / s;
    if ratio > MAX_EXP_RATIO {
        return Err(Error::Overflow { ratio });
    }
    let ind = cfg.indicator(v, ell);
    let g = ratio.exp();
    Ok((ind - cfg.alpha) * (v - ell) + g * ind * (v - ell) / cfg.alpha + g * (e - v) - s * g)
}

/// Dispatches on the configured family.
pub fn score(est: &RiskEstimate, ell: f64, cfg: &ScoreConfig) -> Result<f64> {
    match cfg.family {
        ScoreFamily::Quantile => Ok(quantile_score(est.v, ell, cfg)),
        ScoreFamily::Expectile => Ok(expectile_score(est.v, ell, cfg)),
        ScoreFamily::JointVarEs => joint_var_es_score(est, ell, cfg),
    }
}

/// Mean joint score when every forecast equals its realization, which is
/// `-(s/N) * sum exp(l_i / s)`.
pub fn oracle_bound(outcomes: &[f64], cfg: &ScoreConfig) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("oracle bound outcomes"));
    }
    let s = cfg.h2_scale;
    let total: f64 = outcomes.iter().map(|l| (l / s).exp()).sum();
    Ok(-s * total / outcomes.len() as f64)
}

// ---- graph builders -------------------------------------------------------

fn indicator_node(g: &mut Graph, a: NodeId, ell: NodeId, cfg: &ScoreConfig) -> NodeId {
    let d = g.sub(a, ell);
    if cfg.smooth {
        let kd = g.scale(d, cfg.sharpness);
        g.sigmoid(kd)
    } else {
        g.step(d)
    }
}

/// Elementwise joint (VaR, ES) score over same-shaped nodes `v`, `e`, `ell`.
pub fn joint_score_node(g: &mut Graph, v: NodeId, e: NodeId, ell: NodeId, cfg: &ScoreConfig) -> NodeId {
    let s = cfg.h2_scale;
    let ind = indicator_node(g, v, ell, cfg);
    let v_minus_l = g.sub(v, ell);
    let ind_minus_alpha = g.add_scalar(ind, -cfg.alpha);
    let t1 = g.mul(ind_minus_alpha, v_minus_l);
    let e_over_s = g.scale(e, 1.0 / s);
    let h2p = g.exp(e_over_s);
    let ind_gap = g.mul(ind, v_minus_l);
    let t2 = g.mul(h2p, ind_gap);
    let t2 = g.scale(t2, 1.0 / cfg.alpha);
    let e_minus_v = g.sub(e, v);
    let t3 = g.mul(h2p, e_minus_v);
    let t4 = g.scale(h2p, -s);
    let a = g.add(t1, t2);
    let b = g.add(t3, t4);
    g.add(a, b)
}

pub fn quantile_score_node(g: &mut Graph, a: NodeId, ell: NodeId, cfg: &ScoreConfig) -> NodeId {
    let ind = indicator_node(g, a, ell, cfg);
    let w = g.add_scalar(ind, -cfg.alpha);
    let w = g.abs(w);
    let d = g.sub(ell, a);
    let d = g.abs(d);
    g.mul(w, d)
}

pub fn expectile_score_node(g: &mut Graph, a: NodeId, ell: NodeId, cfg: &ScoreConfig) -> NodeId {
    let ind = indicator_node(g, a, ell, cfg);
    let w = g.add_scalar(ind, -cfg.alpha);
    let w = g.abs(w);
    let d = g.sub(ell, a);
    let d2 = g.mul(d, d);
    g.mul(w, d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradient, Tensor, Tensors};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn quantile_examples() {
        let cfg = ScoreConfig::quantile(0.05);
        assert_eq!(quantile_score(1.0, 1.0, &cfg), 0.0);
        close(quantile_score(0.0, 1.0, &cfg), 0.05, 1e-15);
        close(quantile_score(1.0, 0.0, &cfg), 0.95, 1e-15);
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_score(0.3, 0.3, &ScoreConfig::expectile(0.2)), 0.0);
        close(expectile_score(0.0, 2.0, &ScoreConfig::expectile(0.5)), 2.0, 1e-15);
        close(expectile_score(2.0, 0.0, &ScoreConfig::expectile(0.25)), 3.0, 1e-15);
    }

    #[test]
    fn joint_examples() {
        let cfg = ScoreConfig::joint(0.05, 2.0);
        close(joint_var_es_score(&RiskEstimate::var_es(0.0, 0.0), 0.0, &cfg).unwrap(), -2.0, 1e-15);
        close(
            joint_var_es_score(&RiskEstimate::var_es(1.0, 1.0), 1.0, &cfg).unwrap(),
            -2.0 * 0.5f64.exp(),
            1e-14,
        );
        close(-2.0 * 0.5f64.exp(), -3.2974, 1e-4);
        let s = joint_var_es_score(&RiskEstimate::var_es(0.0, -1.0), 1.0, &cfg).unwrap();
        close(s, 0.05 - 3.0 * (-0.5f64).exp(), 1e-14);
        close(s, -1.7696, 1e-4);
    }

    #[test]
    fn joint_overflow_and_missing_es() {
        let cfg = ScoreConfig::joint(0.05, 2.0);
        assert!(matches!(
            joint_var_es_score(&RiskEstimate::var_es(0.0, 1402.0), 0.0, &cfg),
            Err(Error::Overflow { .. })
        ));
        assert!(joint_var_es_score(&RiskEstimate::point(0.0), 0.0, &cfg).is_err());
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(smooth_indicator(0.0, 3.7), 0.5);
        assert_eq!(smooth_indicator(1e6, 1.0), 1.0);
        close(smooth_indicator(0.1, 10.0), 1.0 / (1.0 + (-1.0f64).exp()), 1e-15);
        close(smooth_indicator(0.1, 10.0), 0.7311, 1e-4);
    }

    #[test]
    fn oracle_examples() {
        let cfg = ScoreConfig::joint(0.05, 2.0);
        assert_eq!(oracle_bound(&[0.0], &cfg).unwrap(), -2.0);
        assert_eq!(oracle_bound(&[0.0, 0.0], &cfg).unwrap(), -2.0);
        close(oracle_bound(&[2.0], &cfg).unwrap(), -2.0 * std::f64::consts::E, 1e-14);
        close(oracle_bound(&[2.0], &cfg).unwrap(), -5.4366, 1e-4);
        assert!(oracle_bound(&[], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ScoreConfig::joint(0.0, 2.0).validate().is_err());
        assert!(ScoreConfig::joint(0.05, -1.0).validate().is_err());
        assert!(ScoreConfig::default().smoothed(0.0).validate().is_err());
        assert!(ScoreConfig::default().validate().is_ok());
    }

    #[test]
    fn surrogate_gap_shrinks_with_sharpness() {
        let points = [(0.3, -0.2, 0.1), (-1.0, -1.5, -0.5), (0.0, -0.4, 0.01), (0.5, 0.2, 0.49)];
        for (v, e, ell) in points {
            let est = RiskEstimate::var_es(v, e);
            let hard_cfg = ScoreConfig::joint(0.05, 2.0);
            let hard = joint_var_es_score(&est, ell, &hard_cfg).unwrap();
            let mut prev = f64::INFINITY;
            for k in [1.0, 10.0, 100.0, 1e3, 1e4] {
                let gap = (joint_var_es_score(&est, ell, &hard_cfg.smoothed(k)).unwrap() - hard).abs();
                assert!(gap <= prev, "gap must shrink: {gap} > {prev}");
                prev = gap;
            }
            assert!(prev <= 1e-3, "gap at k=1e4 is {prev}");
        }
    }

    #[test]
    fn expectile_half_is_half_squared_error() {
        let cfg = ScoreConfig::expectile(0.5);
        for (a, l) in [(0.1, 2.0), (-3.0, 1.0), (2.5, 2.4)] {
            close(expectile_score(a, l, &cfg), 0.5 * (l - a) * (l - a), 1e-15);
        }
    }

    #[test]
    fn graph_matches_scalar_formulas() {
        let vs = [0.3, -1.2, 0.5, -0.1];
        let es = [-0.5, -1.9, 0.2, -0.3];
        let ls = [0.1, -2.0, 0.6, 0.4];
        for cfg in [ScoreConfig::joint(0.05, 2.0), ScoreConfig::joint(0.1, 1.5).smoothed(10.0)] {
            let mut g = Graph::new();
            let v = g.constant(Tensor::vector(vs.to_vec()));
            let e = g.constant(Tensor::vector(es.to_vec()));
            let l = g.constant(Tensor::vector(ls.to_vec()));
            let s = joint_score_node(&mut g, v, e, l, &cfg);
            let q = quantile_score_node(&mut g, v, l, &cfg);
            let x = expectile_score_node(&mut g, v, l, &cfg);
            g.forward().unwrap();
            for i in 0..4 {
                let est = RiskEstimate::var_es(vs[i], es[i]);
                close(g.value(s).unwrap().data()[i], joint_var_es_score(&est, ls[i], &cfg).unwrap(), 1e-13);
                close(g.value(q).unwrap().data()[i], quantile_score(vs[i], ls[i], &cfg), 1e-13);
                close(g.value(x).unwrap().data()[i], expectile_score(vs[i], ls[i], &cfg), 1e-13);
            }
        }
    }

    #[test]
    fn smooth_joint_gradient_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = ScoreConfig::joint(0.05, 2.0).smoothed(10.0);
        for _ in 0..20 {
            let mut g = Graph::new();
            let v = g.input("v", true);
            let e = g.input("e", true);
            let l = g.constant(Tensor::vector((0..3).map(|_| rng.random_range(-2.0..2.0)).collect()));
            let s = joint_score_node(&mut g, v, e, l, &cfg);
            let out = g.mean(s);
            let mut inputs = Tensors::new();
            inputs.insert("v".into(), Tensor::vector((0..3).map(|_| rng.random_range(-2.0..1.0)).collect()));
            inputs.insert("e".into(), Tensor::vector((0..3).map(|_| rng.random_range(-3.0..0.0)).collect()));
            let err = check_gradient(&mut g, out, &inputs, 1e-5).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }
}
