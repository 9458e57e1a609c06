//! Browser bindings for a few small, self-contained demonstrations.

use gar_core::baselines::garch::{conditional_variances, simulate_garch11, GarchCoeffs};
use gar_core::diffcore::Tensor;
use gar_core::generators::{init_generator, Arch, GeneratorParams, GeneratorSpec, Layers};
use gar_core::harness::{kde, silverman_bandwidth};
use gar_core::policy::{outcomes, PolicyKind, PolicyParams};
use gar_core::risk::{empirical_var_es, implied_risk, McConfig};
use gar_core::scoring::{joint_var_es_score, RiskEstimate, ScoreConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64).collect()
}

/// Mean hard joint score of `(v, e)` over `n` standard normal draws on a
/// `steps x steps` grid, row-major in `e` then `v`. The result is followed by
/// the grid argmin `(v, e)` and the plug-in `(VaR, ES)` of the sample.
#[wasm_bindgen]
pub fn score_surface(alpha: f64, scale: f64, n: usize, seed: u64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let cfg = ScoreConfig::joint(alpha, scale);
    cfg.validate().map_err(js)?;
    if n == 0 || steps < 2 || !(hi > lo) {
        return Err(JsError::new("need samples, at least two steps and hi > lo"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let axis = linspace(lo, hi, steps);
    let mut out = Vec::with_capacity(steps * steps + 4);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &e in &axis {
        for &v in &axis {
            let est = RiskEstimate::var_es(v, e);
            let mut total = 0.0;
            for &l in &xs {
                total += joint_var_es_score(&est, l, &cfg).map_err(js)?;
            }
            let s = total / n as f64;
            if s < best.0 {
                best = (s, v, e);
            }
            out.push(s);
        }
    }
    let (pv, pe) = empirical_var_es(&xs, alpha).map_err(js)?;
    out.extend([best.1, best.2, pv, pe]);
    Ok(out)
}

/// Two-asset generator whose scenarios are `(beta * c + z) * u_t` with `c`
/// the first context entry and `u_t` a linear ramp.
fn linear_gaussian(beta: f64, cond_len: usize, horizon: usize) -> GeneratorParams {
    let m = 2;
    let mut spec = GeneratorSpec::new(Arch::EncoderLinear, m, cond_len, horizon);
    spec.layers = Layers { encoder: 1, decoder: 1 };
    spec.latent_dim = 1;
    spec.hidden_dim = 1;
    let mut gen = init_generator(&spec, 0).expect("valid spec");
    gen.params.set_all(0.0);
    let mut enc = vec![0.0; m * cond_len];
    enc[0] = 1.0;
    gen.params.insert("enc.0.w", Tensor::matrix(m * cond_len, 1, enc).expect("shape"));
    let width = m * horizon;
    let mut dec = vec![0.0; 2 * width];
    for j in 0..m {
        for t in 0..horizon {
            let u = t as f64 / (horizon - 1) as f64;
            dec[j * horizon + t] = beta * u;
            // opposite signs across assets so trading the spread matters
            dec[width + j * horizon + t] = if j == 0 { u } else { -0.5 * u };
        }
    }
    gen.params.insert("dec.0.w", Tensor::matrix(2, width, dec).expect("shape"));
    gen
}

/// PnL density of a benchmark policy on generated scenarios at context `c`.
/// Returns `[VaR, ES, bandwidth, density...]` over `points` grid values.
#[wasm_bindgen]
pub fn pnl_density(
    beta: f64,
    c: f64,
    policy: &str,
    n: usize,
    seed: u64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    let kind: PolicyKind = policy.parse().map_err(js)?;
    if kind == PolicyKind::AdversarialGru {
        return Err(JsError::new("choose a benchmark policy"));
    }
    let (cond, horizon) = (3, 5);
    let gen = linear_gaussian(beta, cond, horizon);
    let pp = PolicyParams::from_kind(kind, 2, 1.0, 1, seed);
    let ctx = Tensor::full(&[1, 2 * cond], c);
    let mc = McConfig::new(n, seed);
    let risk = implied_risk(&gen, &ctx, &pp, &mc, 0.05).map_err(js)?;
    let z = gar_core::generators::latents(seed, n, 1);
    let ys = gen.forward_batch(&ctx, &z, n).map_err(js)?;
    let ls = outcomes(&pp, &ys, horizon).map_err(js)?;
    let h = silverman_bandwidth(&ls).map_err(js)?;
    let dens = kde(&ls, &linspace(lo, hi, points), h).map_err(js)?;
    let mut out = vec![risk.v, risk.e.unwrap_or(f64::NAN), h];
    out.extend(dens);
    Ok(out)
}

/// `paths` GARCH(1,1) return paths of length `steps`, path-major, followed
/// by the conditional standard deviations of the first path.
#[wasm_bindgen]
pub fn garch_paths(omega: f64, a: f64, b: f64, steps: usize, paths: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let c = GarchCoeffs::new(omega, a, b);
    c.validate().map_err(js)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity((paths + 1) * steps);
    let mut first = Vec::new();
    for p in 0..paths {
        let r = simulate_garch11(&c, steps, &mut rng).map_err(js)?;
        if p == 0 {
            first = r.clone();
        }
        out.extend(r);
    }
    if !first.is_empty() {
        let s2 = conditional_variances(&c, &first, c.unconditional_variance());
        out.extend(s2.into_iter().map(f64::sqrt));
    }
    Ok(out)
}
