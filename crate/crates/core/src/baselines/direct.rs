//! Direct linear (VaR, ES) regression on the flattened context, fitted by
//! minimising the mean joint score.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::optim::{Adam, AdamConfig, Direction};
use crate::params::ParamStore;
use crate::risk::empirical_var_es;
use crate::scoring::{joint_score_node, RiskEstimate, ScoreConfig, ScoreFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Start the intercepts at the pooled plug-in estimates.
    pub warm_start: bool,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            warm_start: true,
        }
    }
}

/// `v(c) = c W_var + b_var`, `e(c) = c W_es + b_es`, one column per policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectLinearModel {
    pub params: ParamStore,
    pub n_features: usize,
    pub n_outputs: usize,
}

impl DirectLinearModel {
    pub fn zeros(n_features: usize, n_outputs: usize) -> Self {
        let mut params = ParamStore::new();
        params.insert("w_var", Tensor::zeros(&[n_features, n_outputs]));
        params.insert("w_es", Tensor::zeros(&[n_features, n_outputs]));
        params.insert("b_var", Tensor::zeros(&[1, n_outputs]));
        params.insert("b_es", Tensor::zeros(&[1, n_outputs]));
        Self {
            params,
            n_features,
            n_outputs,
        }
    }

    fn affine(&self, c: &[f64], w: &str, b: &str, k: usize) -> f64 {
        let w = self.params.get(w).expect("weights");
        let b = self.params.get(b).expect("bias");
        b.data()[k] + c.iter().enumerate().map(|(d, x)| x * w.data()[d * self.n_outputs + k]).sum::<f64>()
    }

    /// One estimate per output column.
    pub fn predict(&self, c: &[f64]) -> Result<Vec<RiskEstimate>> {
        if c.len() != self.n_features {
            return Err(invalid(format!("context has {} features, model expects {}", c.len(), self.n_features)));
        }
        Ok((0..self.n_outputs)
            .map(|k| RiskEstimate::var_es(self.affine(c, "w_var", "b_var", k), self.affine(c, "w_es", "b_es", k)))
            .collect())
    }
}

/// Fits on contexts `(n, D)` and outcomes `outcomes[k][i]` of policy `k`.
pub fn fit_direct_linear(
    contexts: &Tensor,
    outcomes: &[Vec<f64>],
    score: &ScoreConfig,
    cfg: &DirectConfig,
) -> Result<DirectLinearModel> {
    if score.family != ScoreFamily::JointVarEs {
        return Err(invalid("direct linear model is fitted under the joint score"));
    }
    score.validate()?;
    let (n, d) = contexts.dims2();
    let k = outcomes.len();
    if n == 0 || k == 0 {
        return Err(Error::Empty("direct linear training data"));
    }
    if outcomes.iter().any(|o| o.len() != n) {
        return Err(invalid("every policy needs one outcome per context"));
    }
    let mut model = DirectLinearModel::zeros(d, k);
    if cfg.warm_start {
        for (j, o) in outcomes.iter().enumerate() {
            let (v, e) = empirical_var_es(o, score.alpha)?;
            model.params.get_mut("b_var").expect("bias").data_mut()[j] = v;
            model.params.get_mut("b_es").expect("bias").data_mut()[j] = e;
        }
    }
    let mut ell = vec![0.0; n * k];
    for (j, o) in outcomes.iter().enumerate() {
        for (i, l) in o.iter().enumerate() {
            ell[i * k + j] = *l;
        }
    }
    let smooth = ScoreConfig { smooth: true, ..*score };
    let mut g = Graph::new();
    let p = model.params.declare(&mut g, "", true);
    let c = g.input("c", false);
    let l = g.input("l", false);
    let cv = g.matmul(c, p.get("w_var"));
    let v = g.add(cv, p.get("b_var"));
    let ce = g.matmul(c, p.get("w_es"));
    let e = g.add(ce, p.get("b_es"));
    let s = joint_score_node(&mut g, v, e, l, &smooth);
    let loss = g.mean(s);
    g.bind("c", Tensor::new(vec![n, d], contexts.data().to_vec())?)?;
    g.bind("l", Tensor::matrix(n, k, ell)?)?;
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    for it in 0..cfg.iterations {
        model.params.bind(&mut g, "")?;
        g.forward()?;
        let value = g.value(loss).expect("evaluated").item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: it,
                batch: 0,
                term: "direct linear score".into(),
            });
        }
        let grads = g.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate("", &grads)?;
        adam.step(&mut model.params, cfg.lr, Direction::Descent)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constants_recover_plug_in_on_iid_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let ls: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let contexts = Tensor::zeros(&[n, 3]);
        let score = ScoreConfig::default().smoothed(100.0);
        let cfg = DirectConfig {
            iterations: 3000,
            lr: 0.02,
            warm_start: false,
        };
        let m = fit_direct_linear(&contexts, std::slice::from_ref(&ls), &score, &cfg).unwrap();
        let est = m.predict(&[0.0; 3]).unwrap()[0];
        let (v, e) = empirical_var_es(&ls, 0.05).unwrap();
        assert!((est.v - v).abs() < 0.08, "{est:?} vs {v}");
        assert!((est.e.unwrap() - e).abs() < 0.08, "{est:?} vs {e}");
    }

    #[test]
    fn predictions_are_affine_with_one_column_per_policy() {
        let mut m = DirectLinearModel::zeros(2, 2);
        m.params.insert("w_var", Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        m.params.insert("b_es", Tensor::matrix(1, 2, vec![-1.0, -2.0]).unwrap());
        let (c1, c2, lam) = ([0.3, -1.0], [2.0, 0.5], 0.3);
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let p = m.predict(&mix).unwrap();
        assert_eq!(p.len(), 2);
        for k in 0..2 {
            let want = lam * m.predict(&c1).unwrap()[k].v + (1.0 - lam) * m.predict(&c2).unwrap()[k].v;
            assert!((p[k].v - want).abs() < 1e-12);
        }
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn duplicate_features_split_weight_freely() {
        let mut a = DirectLinearModel::zeros(2, 1);
        let mut b = a.clone();
        a.params.insert("w_var", Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        b.params.insert("w_var", Tensor::matrix(2, 1, vec![0.25, 0.75]).unwrap());
        let c = [0.7, 0.7];
        assert!((a.predict(&c).unwrap()[0].v - b.predict(&c).unwrap()[0].v).abs() < 1e-15);
    }

    #[test]
    fn learns_a_linear_scale() {
        // l = c + Z, so VaR(c) = c - 1.645 and ES(c) = c - 2.063
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4000;
        let cs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ls: Vec<f64> = cs.iter().map(|c| c + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let contexts = Tensor::matrix(n, 1, cs).unwrap();
        let score = ScoreConfig::default().smoothed(50.0);
        let m = fit_direct_linear(&contexts, &[ls], &score, &DirectConfig { iterations: 4000, ..Default::default() }).unwrap();
        let w = m.params.get("w_var").unwrap().item();
        assert!((w - 1.0).abs() < 0.15, "{w}");
    }
}
