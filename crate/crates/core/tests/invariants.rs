use chrono::NaiveDate;
use gar_core::baselines::{fit_direct_linear, DirectConfig};
use gar_core::datapipe::{make_windows, synthetic, Family, ReturnPanel, Split, SynthConfig};
use gar_core::diffcore::{Graph, Tensor};
use gar_core::risk::{empirical_es, empirical_var, tail_count};
use gar_core::scoring::{joint_score_node, joint_var_es_score, oracle_bound, RiskEstimate, ScoreConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn panel(rows: usize, m: usize, seed: u64) -> ReturnPanel {
    let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    let dates = (0..rows).map(|i| start + chrono::Days::new(i as u64)).collect();
    let assets = (0..m).map(|j| format!("a{j}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns = (0..rows * m).map(|_| rng.random_range(-0.05..0.05)).collect();
    ReturnPanel::new(dates, assets, returns).unwrap()
}

/// Full-batch gradient descent on a free (v, e) pair under the smoothed
/// joint score.
#[test]
fn direct_pair_descent_is_monotone() {
    let ls = normals(2000, 3);
    let cfg = ScoreConfig::default();
    let n = ls.len();
    let mut g = Graph::new();
    let v = g.input("v", true);
    let e = g.input("e", true);
    let l = g.input("l", false);
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let vb = g.matmul(ones, v);
    let eb = g.matmul(ones, e);
    let s = joint_score_node(&mut g, vb, eb, l, &cfg);
    let loss = g.mean(s);
    g.bind("l", Tensor::new(vec![n, 1], ls.clone()).unwrap()).unwrap();

    let bound = oracle_bound(&ls, &cfg).unwrap();
    let (mut pv, mut pe) = (0.0, -0.5);
    let lr = 0.05;
    let mut prev = f64::INFINITY;
    for it in 0..400 {
        g.bind("v", Tensor::full(&[1, 1], pv)).unwrap();
        g.bind("e", Tensor::full(&[1, 1], pe)).unwrap();
        g.forward().unwrap();
        let cur = g.value(loss).unwrap().item();
        assert!(cur >= bound - 1e-12);
        if cur - bound < 1e-6 {
            break;
        }
        assert!(cur <= prev + 1e-12, "iteration {it}: {cur} after {prev}");
        prev = cur;
        let grads = g.backward(loss).unwrap();
        pv -= lr * grads["v"].item();
        pe -= lr * grads["e"].item();
    }
    // the pair has moved into the lower tail
    assert!(pv < -1.0 && pe < pv, "v={pv} e={pe}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sign_flip_mirrors_var(seed in 0u64..1000, n in 20usize..400, alpha in 0.01f64..0.49) {
        prop_assume!(tail_count(alpha, n) + tail_count(1.0 - alpha, n) == n + 1);
        let xs = normals(n, seed);
        let flipped: Vec<f64> = xs.iter().map(|x| -x).collect();
        let a = empirical_var(&xs, alpha).unwrap();
        let b = empirical_var(&flipped, 1.0 - alpha).unwrap();
        prop_assert_eq!(a, -b);
    }

    #[test]
    fn es_is_below_var(seed in 0u64..1000, n in 1usize..300, alpha in 0.01f64..0.99) {
        let xs = normals(n, seed);
        prop_assert!(empirical_es(&xs, alpha).unwrap() <= empirical_var(&xs, alpha).unwrap());
    }

    #[test]
    fn perfect_forecast_is_pointwise_best(v in -5.0f64..5.0, gap in 0.0f64..5.0, ell in -5.0f64..5.0) {
        let cfg = ScoreConfig::default();
        let est = RiskEstimate::var_es(v, v - gap);
        let s = joint_var_es_score(&est, ell, &cfg).unwrap();
        prop_assert!(s >= oracle_bound(&[ell], &cfg).unwrap() - 1e-12);
    }

    #[test]
    fn windows_are_panel_slices(seed in 0u64..1000, m in 1usize..4, cond in 1usize..5, horizon in 2usize..6, extra in 0usize..20) {
        let rows = cond + horizon + extra;
        let p = panel(rows, m, seed);
        let w = make_windows(&p, cond, horizon, 1).unwrap();
        prop_assert_eq!(w.len(), extra + 1);
        for i in 0..w.len() {
            let (c, y) = (w.context(i), w.scenario(i));
            for j in 0..m {
                for t in 0..cond {
                    prop_assert_eq!(c[j * cond + t], p.row(i + t)[j]);
                }
                for t in 0..horizon {
                    prop_assert_eq!(y[j * horizon + t], p.row(i + cond + t)[j]);
                }
            }
        }
    }

    #[test]
    fn splits_do_not_leak(seed in 0u64..1000, samples in 30usize..200, cond in 1usize..4, horizon in 2usize..5) {
        let cfg = SynthConfig::new(Family::Garch, samples).with_dims(2, cond, horizon).with_seed(seed);
        let data = synthetic(&cfg).unwrap().split([0.6, 0.2, 0.2]).unwrap();
        prop_assert!(data.check_leakage().is_ok());
        let total = data.count(Split::Train) + data.count(Split::Val) + data.count(Split::Test) + data.purged();
        prop_assert_eq!(total, data.len());
    }

    #[test]
    fn direct_predictions_are_affine(seed in 0u64..1000, lambda in -2.0f64..2.0) {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..n).map(|i| ctx[i * 3] + rng.random_range(-1.0..1.0)).collect();
        let cfg = DirectConfig { iterations: 30, lr: 0.05, warm_start: true };
        let model = fit_direct_linear(&Tensor::matrix(n, 3, ctx).unwrap(), &[ls], &ScoreConfig::default(), &cfg).unwrap();
        let c1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
        let (p1, p2, pm) = (model.predict(&c1).unwrap()[0], model.predict(&c2).unwrap()[0], model.predict(&mix).unwrap()[0]);
        prop_assert!((pm.v - (lambda * p1.v + (1.0 - lambda) * p2.v)).abs() < 1e-10);
        let (e1, e2, em) = (p1.e.unwrap(), p2.e.unwrap(), pm.e.unwrap());
        prop_assert!((em - (lambda * e1 + (1.0 - lambda) * e2)).abs() < 1e-10);
    }
}
