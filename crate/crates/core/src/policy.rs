//! Trading policies and the PnL aggregator.
//!
//! A policy maps a scenario `y` (`M x T`) to weights `w_1..w_{T-1}`, each an
//! `M`-vector depending on `y_{.,1..t}` only, normalised to gross exposure
//! `kappa`. The outcome is `sum_t w_t . (y_{.,t+1} - y_{.,t})`.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::params::{ParamNodes, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    AdversarialGru,
    MeanReversion,
    TrendFollowing,
    IdentitySum,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AdversarialGru => "adversarial_gru",
            PolicyKind::MeanReversion => "mean_reversion",
            PolicyKind::TrendFollowing => "trend_following",
            PolicyKind::IdentitySum => "identity_sum",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "adversarial_gru" | "gru" => Ok(PolicyKind::AdversarialGru),
            "mean_reversion" => Ok(PolicyKind::MeanReversion),
            "trend_following" => Ok(PolicyKind::TrendFollowing),
            "identity_sum" => Ok(PolicyKind::IdentitySum),
            _ => Err(invalid(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub kind: PolicyKind,
    pub n_assets: usize,
    pub kappa: f64,
    /// GRU depth; ignored by the fixed strategies.
    pub layers: usize,
    #[serde(skip)]
    pub gru: Option<ParamStore>,
}

impl PolicyParams {
    fn fixed(kind: PolicyKind, n_assets: usize, kappa: f64) -> Self {
        Self {
            kind,
            n_assets,
            kappa,
            layers: 0,
            gru: None,
        }
    }

    pub fn identity_sum(n_assets: usize, kappa: f64) -> Self {
        Self::fixed(PolicyKind::IdentitySum, n_assets, kappa)
    }

    pub fn mean_reversion(n_assets: usize, kappa: f64) -> Self {
        Self::fixed(PolicyKind::MeanReversion, n_assets, kappa)
    }

    pub fn trend_following(n_assets: usize, kappa: f64) -> Self {
        Self::fixed(PolicyKind::TrendFollowing, n_assets, kappa)
    }

    /// GRU policy with hidden width `n_assets`, seeded fan-in weights and zero biases.
    pub fn adversarial(n_assets: usize, layers: usize, kappa: f64, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::init_gru(&mut store, &mut rng, "gru", n_assets, n_assets, layers);
        Self {
            kind: PolicyKind::AdversarialGru,
            n_assets,
            kappa,
            layers,
            gru: Some(store),
        }
    }

    pub fn from_kind(kind: PolicyKind, n_assets: usize, kappa: f64, layers: usize, seed: u64) -> Self {
        match kind {
            PolicyKind::AdversarialGru => Self::adversarial(n_assets, layers, kappa, seed),
            k => Self::fixed(k, n_assets, kappa),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_assets == 0 {
            return Err(invalid("policy needs at least one asset"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid(format!("exposure cap must be positive, got {}", self.kappa)));
        }
        if self.kind == PolicyKind::AdversarialGru {
            let store = self.gru.as_ref().ok_or_else(|| invalid("GRU policy without parameters"))?;
            let expect = Self::adversarial(self.n_assets, self.layers, self.kappa, 0);
            if self.layers == 0 || !store.same_layout(expect.gru.as_ref().expect("gru")) {
                return Err(invalid("GRU parameters must have hidden width equal to the asset count"));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Option<&ParamStore> {
        self.gru.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        self.gru.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.gru.as_ref().map_or(0, ParamStore::numel)
    }

    pub fn checksum(&self) -> u64 {
        self.gru.as_ref().map_or(0, ParamStore::checksum)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "policy", "policy": self});
        let entries = self.gru.as_ref().map(|s| checkpoint::entries("pol.", s)).unwrap_or_default();
        checkpoint::write(path, &meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path)?;
        Self::from_checkpoint(&meta, &tensors)
    }

    pub fn from_checkpoint(meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut pp: PolicyParams = serde_json::from_value(
            meta.get("policy").cloned().ok_or_else(|| Error::Format("checkpoint lacks a policy".into()))?,
        )?;
        if pp.kind == PolicyKind::AdversarialGru {
            pp.gru = Some(checkpoint::collect("pol.", tensors));
        }
        pp.validate()?;
        Ok(pp)
    }
}

/// Normalised action nodes `w_1..w_{T-1}`, each `(rows, M)`. `y` is
/// `(rows, M*T)`; `p` must be the declared GRU parameters for that kind.
pub fn build_actions(
    g: &mut Graph,
    pp: &PolicyParams,
    p: Option<&ParamNodes>,
    y: NodeId,
    rows: usize,
    horizon: usize,
) -> Vec<NodeId> {
    let m = pp.n_assets;
    let steps = horizon.saturating_sub(1);
    let col = |t: usize| (0..m).map(|j| j * horizon + t).collect::<Vec<_>>();
    match pp.kind {
        PolicyKind::IdentitySum => {
            let w = g.constant(Tensor::full(&[rows, m], pp.kappa / m as f64));
            vec![w; steps]
        }
        PolicyKind::MeanReversion | PolicyKind::TrendFollowing => (0..steps)
            .map(|t| {
                let yt = g.select_cols(y, &col(t));
                let raw = if pp.kind == PolicyKind::MeanReversion { g.neg(yt) } else { yt };
                g.l1_normalize(raw, pp.kappa)
            })
            .collect(),
        PolicyKind::AdversarialGru => {
            let p = p.expect("GRU policy needs declared parameters");
            let xs: Vec<NodeId> = (0..steps).map(|t| g.select_cols(y, &col(t))).collect();
            let hs = nn::gru(g, p, "gru", pp.layers, rows, m, &xs);
            hs.into_iter().map(|h| g.l1_normalize(h, pp.kappa)).collect()
        }
    }
}

/// Outcome node `(rows, 1)` for scenarios `y` of shape `(rows, M*T)`.
pub fn build_pnl(
    g: &mut Graph,
    pp: &PolicyParams,
    p: Option<&ParamNodes>,
    y: NodeId,
    rows: usize,
    horizon: usize,
) -> NodeId {
    let actions = build_actions(g, pp, p, y, rows, horizon);
    let m = pp.n_assets;
    let col = |t: usize| (0..m).map(|j| j * horizon + t).collect::<Vec<_>>();
    let mut total: Option<NodeId> = None;
    for (t, w) in actions.into_iter().enumerate() {
        let now = g.select_cols(y, &col(t));
        let next = g.select_cols(y, &col(t + 1));
        let dy = g.sub(next, now);
        let prod = g.mul(w, dy);
        let term = g.sum_axis(prod, 1);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    total.unwrap_or_else(|| g.constant(Tensor::zeros(&[rows, 1])))
}

fn check_scenario(pp: &PolicyParams, y: &Tensor) -> Result<usize> {
    if y.rank() != 2 || y.shape()[0] != pp.n_assets {
        return Err(invalid(format!(
            "scenario shape {:?} does not match {} assets",
            y.shape(),
            pp.n_assets
        )));
    }
    let t = y.shape()[1];
    if t < 2 {
        return Err(invalid("scenario needs at least two time steps"));
    }
    Ok(t)
}

/// Weights as a `(T-1) x M` matrix, row `t` being `w(y_{1:t})`.
pub fn policy_actions(pp: &PolicyParams, y: &Tensor) -> Result<Tensor> {
    pp.validate()?;
    let t = check_scenario(pp, y)?;
    let mut g = Graph::new();
    let p = pp.gru.as_ref().map(|s| s.declare(&mut g, "", false));
    let yn = g.input("y", false);
    let actions = build_actions(&mut g, pp, p.as_ref(), yn, 1, t);
    let stacked = g.concat(&actions, 0);
    g.mark_output("w", stacked);
    let mut inputs = pp.gru.as_ref().map(|s| s.to_inputs("")).unwrap_or_default();
    inputs.insert("y".into(), Tensor::new(vec![1, y.numel()], y.data().to_vec())?);
    Ok(g.evaluate(&inputs)?.remove("w").expect("marked output"))
}

/// `sum_t sum_j w[t, j] * (y[j, t+1] - y[j, t])`.
pub fn aggregate_pnl(y: &Tensor, a: &Tensor) -> Result<f64> {
    if y.rank() != 2 || a.rank() != 2 {
        return Err(invalid("aggregate_pnl expects matrices"));
    }
    let (m, t) = (y.shape()[0], y.shape()[1]);
    if a.shape() != [t.saturating_sub(1), m] {
        return Err(invalid(format!(
            "action shape {:?} does not match scenario {:?}",
            a.shape(),
            y.shape()
        )));
    }
    let yd = y.data();
    let mut total = 0.0;
    for s in 0..t - 1 {
        for j in 0..m {
            total += a.data()[s * m + j] * (yd[j * t + s + 1] - yd[j * t + s]);
        }
    }
    Ok(total)
}

/// The scalar outcome of running `pp` on `y`.
pub fn policy_functional(pp: &PolicyParams, y: &Tensor) -> Result<f64> {
    aggregate_pnl(y, &policy_actions(pp, y)?)
}

/// Outcomes for a batch of flattened scenarios `(rows, M*T)`.
pub fn outcomes(pp: &PolicyParams, scenarios: &Tensor, horizon: usize) -> Result<Vec<f64>> {
    pp.validate()?;
    let (rows, cols) = scenarios.dims2();
    if cols != pp.n_assets * horizon {
        return Err(invalid(format!(
            "scenario rows have {cols} entries, expected {} x {horizon}",
            pp.n_assets
        )));
    }
    if matches!(pp.kind, PolicyKind::IdentitySum) {
        // telescoped: (kappa/M) * sum_j (y_{j,T} - y_{j,1})
        let k = pp.kappa / pp.n_assets as f64;
        return Ok((0..rows)
            .map(|r| {
                let row = scenarios.row(r);
                let mut acc = 0.0;
                for j in 0..pp.n_assets {
                    let mut s = 0.0;
                    for t in 0..horizon - 1 {
                        s += row[j * horizon + t + 1] - row[j * horizon + t];
                    }
                    acc += k * s;
                }
                acc
            })
            .collect());
    }
    let mut g = Graph::new();
    let p = pp.gru.as_ref().map(|s| s.declare(&mut g, "", false));
    let yn = g.input("y", false);
    let pnl = build_pnl(&mut g, pp, p.as_ref(), yn, rows, horizon);
    g.mark_output("pnl", pnl);
    let mut inputs = pp.gru.as_ref().map(|s| s.to_inputs("")).unwrap_or_default();
    inputs.insert("y".into(), Tensor::new(vec![rows, cols], scenarios.data().to_vec())?);
    Ok(g.evaluate(&inputs)?.remove("pnl").expect("marked output").into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradient;
    use proptest::prelude::*;
    use rand::Rng;

    fn scenario(m: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(m, t, (0..m * t).map(|_| rng.random_range(-0.05..0.05)).collect()).unwrap()
    }

    fn all_kinds(m: usize) -> Vec<PolicyParams> {
        vec![
            PolicyParams::identity_sum(m, 1.0),
            PolicyParams::mean_reversion(m, 1.0),
            PolicyParams::trend_following(m, 1.0),
            PolicyParams::adversarial(m, 3, 1.0, 5),
        ]
    }

    #[test]
    fn identity_sum_rows_are_equal_weight() {
        let a = policy_actions(&PolicyParams::identity_sum(2, 1.0), &scenario(2, 4, 0)).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert!(a.data().iter().all(|w| *w == 0.5));
    }

    #[test]
    fn mean_reversion_hand_example() {
        let y = Tensor::matrix(2, 2, vec![0.02, 0.0, -0.01, 0.0]).unwrap();
        let a = policy_actions(&PolicyParams::mean_reversion(2, 1.0), &y).unwrap();
        assert!((a.data()[0] + 2.0 / 3.0).abs() < 1e-15);
        assert!((a.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let b = policy_actions(&PolicyParams::trend_following(2, 1.0), &y).unwrap();
        assert!((b.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_signal_falls_back_to_equal_weights() {
        let y = Tensor::zeros(&[3, 3]);
        let a = policy_actions(&PolicyParams::mean_reversion(3, 2.0), &y).unwrap();
        assert!(a.data().iter().all(|w| (*w - 2.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn aggregate_examples() {
        let y = Tensor::matrix(1, 2, vec![0.0, 0.03]).unwrap();
        let w = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(aggregate_pnl(&y, &w).unwrap(), 0.03);
        let flat = Tensor::full(&[3, 5], 0.7);
        for pp in all_kinds(3) {
            assert_eq!(policy_functional(&pp, &flat).unwrap(), 0.0);
        }
        let y = scenario(3, 6, 4);
        let telescoped: f64 = (0..3).map(|j| y.data()[j * 6 + 5] - y.data()[j * 6]).sum::<f64>() * 0.5 / 3.0;
        let v = policy_functional(&PolicyParams::identity_sum(3, 0.5), &y).unwrap();
        assert!((v - telescoped).abs() < 1e-15);
        assert!(aggregate_pnl(&y, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn batch_outcomes_match_single() {
        let (m, t) = (3, 5);
        let ys: Vec<Tensor> = (0..4).map(|s| scenario(m, t, s)).collect();
        let flat: Vec<f64> = ys.iter().flat_map(|y| y.data().to_vec()).collect();
        let batch = Tensor::matrix(4, m * t, flat).unwrap();
        for pp in all_kinds(m) {
            let out = outcomes(&pp, &batch, t).unwrap();
            for (y, o) in ys.iter().zip(&out) {
                assert!((policy_functional(&pp, y).unwrap() - o).abs() < 1e-15, "{}", pp.name());
            }
        }
    }

    #[test]
    fn gru_policy_gradients() {
        let pp = PolicyParams::adversarial(3, 3, 1.0, 2);
        let store = pp.gru.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for point in 0..20 {
            let mut g = Graph::new();
            let p = store.declare(&mut g, "", true);
            let yn = g.input("y", false);
            let pnl = build_pnl(&mut g, &pp, Some(&p), yn, 4, 5);
            let out = g.mean(pnl);
            let mut inputs = store.to_inputs("");
            for (_, t) in inputs.iter_mut() {
                t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
            }
            let ys: Vec<f64> = (0..4 * 15).map(|_| rng.random_range(-1.0..1.0)).collect();
            inputs.insert("y".into(), Tensor::matrix(4, 15, ys).unwrap());
            let err = check_gradient(&mut g, out, &inputs, 1e-5).unwrap();
            assert!(err <= 1e-4, "point {point}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for pp in all_kinds(2) {
            let path = dir.path().join(format!("{}.ckpt", pp.name()));
            pp.save(&path).unwrap();
            assert_eq!(PolicyParams::load(&path).unwrap(), pp);
        }
    }

    #[test]
    fn validation() {
        assert!(PolicyParams::identity_sum(2, 0.0).validate().is_err());
        let mut pp = PolicyParams::adversarial(2, 1, 1.0, 0);
        pp.n_assets = 3;
        assert!(pp.validate().is_err());
        assert!(policy_actions(&PolicyParams::identity_sum(2, 1.0), &Tensor::zeros(&[2, 1])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exposure_and_causality(seed in 0u64..10_000, m in 1usize..5, t in 2usize..8, kappa in 0.1f64..3.0) {
            let y = scenario(m, t, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let cut = rng.random_range(1..t);
            let mut z = y.clone();
            for j in 0..m {
                for s in cut..t {
                    z.data_mut()[j * t + s] += rng.random_range(-1.0..1.0);
                }
            }
            let kinds = [
                PolicyParams::identity_sum(m, kappa),
                PolicyParams::mean_reversion(m, kappa),
                PolicyParams::trend_following(m, kappa),
                PolicyParams::adversarial(m, 2, kappa, seed),
            ];
            for pp in &kinds {
                let a = policy_actions(pp, &y).unwrap();
                for r in 0..t - 1 {
                    let l1: f64 = a.row(r).iter().map(|w| w.abs()).sum();
                    prop_assert!((l1 - kappa).abs() <= 1e-12 * kappa);
                }
                let b = policy_actions(pp, &z).unwrap();
                // rows 0..cut see only columns before `cut`
                for r in 0..cut {
                    prop_assert_eq!(a.row(r), b.row(r));
                }
                let dmax: f64 = (0..t - 1)
                    .map(|s| (0..m).map(|j| (y.data()[j * t + s + 1] - y.data()[j * t + s]).abs()).fold(0.0, f64::max))
                    .sum();
                prop_assert!(aggregate_pnl(&y, &a).unwrap().abs() <= kappa * dmax + 1e-15);
            }
        }
    }
}
