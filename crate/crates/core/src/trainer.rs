//! Fixed-policy training and alternating adversarial min-max training.
//!
//! Every minibatch objective is one graph per chunk of contexts: the
//! generator maps `(z, c)` to `N` scenarios per context, each policy turns
//! synthetic and real scenarios into outcomes, the plug-in VaR/ES of the
//! synthetic outcomes is scored against the real outcome, and the loss is
//! the mean over policies and contexts. Chunks may run in parallel; their
//! gradients are always reduced in chunk order.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Batch, Split, WindowDataset};
use crate::diffcore::{Graph, NodeId, Tensor, Tensors};
use crate::error::{invalid, Error, Result};
use crate::generators::{self, init_generator, Arch, GeneratorParams, GeneratorSpec, Layers};
use crate::optim::{Adam, AdamConfig, Direction};
use crate::params::{ParamNodes, ParamStore};
use crate::policy::{self, PolicyParams};
use crate::risk::{grouped_var_es, implied_risk_batch, var_node, McConfig};
use crate::scoring::{joint_score_node, quantile_score_node, score, ScoreConfig, ScoreFamily, MAX_EXP_RATIO};

pub const ONE_CYCLE_WARMUP: f64 = 0.3;
pub const ONE_CYCLE_FINAL_DIV: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    OneCycle { initial_lr: f64, max_lr: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::OneCycle {
            initial_lr: 1e-10,
            max_lr: 1e-3,
        }
    }
}

impl LrSchedule {
    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::OneCycle { max_lr, .. } => max_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::OneCycle { initial_lr, max_lr } => {
                initial_lr > 0.0 && max_lr >= initial_lr && max_lr.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("bad learning-rate schedule {self:?}")))
        }
    }
}

fn cos_interp(from: f64, to: f64, frac: f64) -> f64 {
    from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
}

/// Learning rate at `step` of `total_steps`. The one-cycle schedule ramps
/// from `initial_lr` to `max_lr` over the first 30% of steps and anneals to
/// `initial_lr / 25` over the rest, both by cosine.
pub fn lr_at(step: usize, total_steps: usize, schedule: &LrSchedule) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::IndexOutOfRange {
            index: step,
            len: total_steps,
        });
    }
    match *schedule {
        LrSchedule::Constant { lr } => Ok(lr),
        LrSchedule::OneCycle { initial_lr, max_lr } => {
            let peak = ONE_CYCLE_WARMUP * total_steps as f64;
            let s = step as f64;
            if s <= peak {
                Ok(cos_interp(initial_lr, max_lr, s / peak))
            } else {
                let rest = total_steps as f64 - peak;
                Ok(cos_interp(max_lr, initial_lr / ONE_CYCLE_FINAL_DIV, (s - peak) / rest))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[serde(alias = "fixed")]
    FixedPolicy,
    Adversarial,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::FixedPolicy => "fixed",
            TrainMode::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_policy" => Ok(TrainMode::FixedPolicy),
            "adversarial" | "gar" => Ok(TrainMode::Adversarial),
            _ => Err(invalid(format!("unknown training mode `{s}` (fixed, adversarial)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Architecture default when `None`.
    pub layers: Option<Layers>,
    pub conditional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak generator learning rate; the schedule is rescaled to it.
    pub lr_theta: f64,
    /// Peak adversary learning rate.
    pub lr_phi: f64,
    pub lr_schedule: LrSchedule,
    pub mc_samples: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Policies of the fixed-mode objective, and the validation benchmark set
    /// in both modes.
    pub fixed_policies: Vec<PolicyParams>,
    pub adam: AdamConfig,
    /// Training score; the smooth flag is forced on for gradients.
    pub score: ScoreConfig,
    pub kappa: f64,
    pub adversary_layers: usize,
    pub adversary_steps: usize,
    pub deterministic: bool,
    pub grad_clip: Option<f64>,
    pub max_rows_per_graph: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::EncoderLinear,
            latent_dim: 4,
            hidden_dim: 4,
            layers: None,
            conditional: true,
            epochs: 50,
            batch_size: 128,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            lr_schedule: LrSchedule::default(),
            mc_samples: 2000,
            seed: 0,
            mode: TrainMode::FixedPolicy,
            fixed_policies: Vec::new(),
            adam: AdamConfig::default(),
            score: ScoreConfig::default().smoothed(10.0),
            kappa: 1.0,
            adversary_layers: 3,
            adversary_steps: 1,
            deterministic: true,
            grad_clip: None,
            max_rows_per_graph: 16_384,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        McConfig::new(self.mc_samples, self.seed).validate()?;
        if self.mode == TrainMode::FixedPolicy && self.fixed_policies.is_empty() {
            return Err(invalid("fixed-policy training needs at least one policy"));
        }
        for lr in [self.lr_theta, self.lr_phi] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(format!("learning rates must be positive, got {lr}")));
            }
        }
        self.lr_schedule.validate()?;
        self.score.validate()?;
        if self.score.family == ScoreFamily::Expectile {
            return Err(invalid("training supports the joint and quantile scores"));
        }
        if !(self.kappa > 0.0) {
            return Err(invalid("kappa must be positive"));
        }
        if self.adversary_layers == 0 || self.adversary_steps == 0 {
            return Err(invalid("adversary needs at least one layer and one step"));
        }
        if self.max_rows_per_graph == 0 {
            return Err(invalid("max_rows_per_graph must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        for p in &self.fixed_policies {
            p.validate()?;
        }
        Ok(())
    }

    pub fn generator_spec(&self, n_assets: usize, cond_len: usize, horizon: usize) -> GeneratorSpec {
        let mut spec = GeneratorSpec::new(self.arch, n_assets, cond_len, horizon);
        spec.latent_dim = self.latent_dim;
        spec.hidden_dim = self.hidden_dim;
        if let Some(l) = self.layers {
            spec.layers = l;
        }
        spec.conditional = self.conditional;
        spec
    }

    /// Benchmark set used for validation.
    pub fn benchmark(&self, n_assets: usize) -> Vec<PolicyParams> {
        if self.fixed_policies.is_empty() {
            vec![
                PolicyParams::mean_reversion(n_assets, self.kappa),
                PolicyParams::trend_following(n_assets, self.kappa),
            ]
        } else {
            self.fixed_policies.clone()
        }
    }

    fn train_score(&self) -> ScoreConfig {
        ScoreConfig { smooth: true, ..self.score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_score: f64,
    pub val_score: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_score: f64,
    pub generator: GeneratorParams,
    pub adversary: Option<PolicyParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: GeneratorParams,
    pub adversary: Option<PolicyParams>,
    pub step: usize,
    /// Schedule length; zero means the peak rates apply throughout.
    pub total_steps: usize,
    pub gen_adam: Adam,
    pub adv_adam: Option<Adam>,
    pub history: Vec<EpochRecord>,
    pub best: Option<Snapshot>,
}

impl TrainState {
    pub fn new(generator: GeneratorParams, adversary: Option<PolicyParams>, adam: AdamConfig) -> Self {
        let gen_adam = Adam::new(adam, &generator.params);
        let adv_adam = adversary.as_ref().and_then(|a| a.params()).map(|p| Adam::new(adam, p));
        Self {
            generator,
            adversary,
            step: 0,
            total_steps: 0,
            gen_adam,
            adv_adam,
            history: Vec::new(),
            best: None,
        }
    }

    /// Seeded initial generator, plus a GRU adversary in adversarial mode.
    pub fn init(dataset: &WindowDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.generator_spec(dataset.n_assets(), dataset.cond_len, dataset.horizon);
        let generator = init_generator(&spec, cfg.seed)?;
        let adversary = (cfg.mode == TrainMode::Adversarial).then(|| {
            PolicyParams::adversarial(dataset.n_assets(), cfg.adversary_layers, cfg.kappa, derive_seed(cfg.seed, 1, 0))
        });
        Ok(Self::new(generator, adversary, cfg.adam))
    }

    pub fn best_generator(&self) -> &GeneratorParams {
        self.best.as_ref().map_or(&self.generator, |b| &b.generator)
    }

    pub fn best_adversary(&self) -> Option<&PolicyParams> {
        match &self.best {
            Some(b) => b.adversary.as_ref(),
            None => self.adversary.as_ref(),
        }
    }

    fn lr_factor(&self, cfg: &TrainConfig) -> Result<f64> {
        if self.total_steps == 0 {
            return Ok(1.0);
        }
        let step = self.step.min(self.total_steps - 1);
        Ok(lr_at(step, self.total_steps, &cfg.lr_schedule)? / cfg.lr_schedule.peak())
    }

    pub fn lr_theta(&self, cfg: &TrainConfig) -> Result<f64> {
        Ok(cfg.lr_theta * self.lr_factor(cfg)?)
    }

    pub fn lr_phi(&self, cfg: &TrainConfig) -> Result<f64> {
        Ok(cfg.lr_phi * self.lr_factor(cfg)?)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `(a, b)` sub-stream of `seed`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Generator,
    Adversary,
    Nothing,
}

/// Minibatch objective value and gradients.
#[derive(Debug, Clone)]
pub struct LossEval {
    /// Mean smooth score, the quantity being optimized.
    pub loss: f64,
    /// Mean hard-indicator score on the same draws.
    pub hard: f64,
    /// Graph gradients per chunk, names prefixed `gen.` and `pol{k}.`.
    chunks: Vec<Tensors>,
}

impl LossEval {
    /// Gradients summed over chunks in order, prefix stripped.
    pub fn gradients(&self, prefix: &str, layout: &ParamStore) -> Result<ParamStore> {
        let mut out = layout.clone();
        out.zero_grads();
        for g in &self.chunks {
            out.accumulate(prefix, g)?;
        }
        Ok(out)
    }
}

struct ChunkOut {
    smooth: f64,
    hard: f64,
    grads: Tensors,
}

struct Diagnostic {
    policy: String,
    nodes: Vec<(&'static str, NodeId)>,
}

fn first_bad(g: &Graph, diags: &[Diagnostic], cfg: &ScoreConfig) -> String {
    for d in diags {
        for (what, id) in &d.nodes {
            if let Some(v) = g.value(*id) {
                if *what == "ES estimate" && cfg.family == ScoreFamily::JointVarEs {
                    if let Some(r) = v.data().iter().map(|e| e / cfg.h2_scale).find(|r| *r > MAX_EXP_RATIO) {
                        return format!("policy {}: exp(e/s) overflow, e/s = {r}", d.policy);
                    }
                }
                if !v.is_finite() {
                    return format!("policy {}: {what}", d.policy);
                }
            }
        }
    }
    "score".into()
}

fn add_all(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    terms[1..].iter().fold(terms[0], |acc, t| g.add(acc, *t))
}

#[allow(clippy::too_many_arguments)]
fn chunk_objective(
    gen: &GeneratorParams,
    policies: &[&PolicyParams],
    contexts: &[f64],
    scenarios: &[f64],
    z: &[f64],
    rows: usize,
    n: usize,
    scale: f64,
    cfg: &ScoreConfig,
    target: Target,
    step: usize,
    batch_index: usize,
) -> Result<ChunkOut> {
    let spec = gen.spec();
    let mut g = Graph::new();
    let gp = gen.params.declare(&mut g, "gen.", target == Target::Generator);
    let pols: Vec<Option<ParamNodes>> = policies
        .iter()
        .enumerate()
        .map(|(k, pp)| pp.params().map(|s| s.declare(&mut g, &format!("pol{k}."), target == Target::Adversary)))
        .collect();
    let zn = g.input("z", false);
    let cn = g.input("c", false);
    let yn = g.input("y", false);
    let yhat = generators::build(&mut g, spec, &gp, zn, cn, rows, n);
    let smooth = ScoreConfig { smooth: true, ..*cfg };
    let hard = cfg.hard();
    let mut smooth_terms = Vec::new();
    let mut hard_terms = Vec::new();
    let mut diags = Vec::new();
    for (k, pp) in policies.iter().enumerate() {
        let p = pols[k].as_ref();
        let lhat = policy::build_pnl(&mut g, pp, p, yhat, rows * n, spec.horizon);
        let l = policy::build_pnl(&mut g, pp, p, yn, rows, spec.horizon);
        let (s, h, mut nodes) = if cfg.family == ScoreFamily::Quantile {
            let samples = g.reshape(lhat, &[rows, n]);
            let v = var_node(&mut g, samples, n, cfg.alpha);
            let s = quantile_score_node(&mut g, v, l, &smooth);
            let h = quantile_score_node(&mut g, v, l, &hard);
            (s, h, vec![("VaR estimate", v)])
        } else {
            let (v, e) = grouped_var_es(&mut g, lhat, rows, n, cfg.alpha);
            let s = joint_score_node(&mut g, v, e, l, &smooth);
            let h = joint_score_node(&mut g, v, e, l, &hard);
            (s, h, vec![("VaR estimate", v), ("ES estimate", e)])
        };
        nodes.insert(0, ("synthetic outcome", lhat));
        nodes.insert(0, ("generated scenario", yhat));
        nodes.push(("real outcome", l));
        nodes.push(("score", s));
        diags.push(Diagnostic {
            policy: pp.name().into(),
            nodes,
        });
        smooth_terms.push(g.sum(s));
        hard_terms.push(g.sum(h));
    }
    let total = add_all(&mut g, &smooth_terms);
    let loss = g.scale(total, scale);
    let hard_total = add_all(&mut g, &hard_terms);

    gen.params.bind(&mut g, "gen.")?;
    for (k, pp) in policies.iter().enumerate() {
        if let Some(s) = pp.params() {
            s.bind(&mut g, &format!("pol{k}."))?;
        }
    }
    g.bind("z", Tensor::new(vec![rows * n, spec.latent_dim], z.to_vec())?)?;
    g.bind("c", Tensor::new(vec![rows, spec.context_len()], contexts.to_vec())?)?;
    g.bind("y", Tensor::new(vec![rows, spec.scenario_len()], scenarios.to_vec())?)?;
    g.forward()?;
    let value = g.value(loss).expect("evaluated").item();
    let hard_value = g.value(hard_total).expect("evaluated").item() * scale;
    if !value.is_finite() || !hard_value.is_finite() {
        return Err(Error::NonFinite {
            step,
            batch: batch_index,
            term: first_bad(&g, &diags, cfg),
        });
    }
    let grads = if target == Target::Nothing {
        Tensors::new()
    } else {
        g.backward(loss)?
    };
    Ok(ChunkOut {
        smooth: value,
        hard: hard_value,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn objective(
    gen: &GeneratorParams,
    policies: &[&PolicyParams],
    batch: &Batch,
    cfg: &ScoreConfig,
    mc: &McConfig,
    max_rows: usize,
    target: Target,
    step: usize,
    batch_index: usize,
) -> Result<LossEval> {
    mc.validate()?;
    let spec = gen.spec();
    let b = batch.len();
    if b == 0 {
        return Err(Error::Empty("minibatch"));
    }
    if policies.is_empty() {
        return Err(Error::Empty("policy set"));
    }
    let d = spec.context_len();
    let s = spec.scenario_len();
    if batch.contexts.dims2() != (b, d) || batch.scenarios.dims2() != (b, s) {
        return Err(invalid(format!(
            "batch shapes {:?}/{:?} do not match generator ({d}, {s})",
            batch.contexts.shape(),
            batch.scenarios.shape()
        )));
    }
    for p in policies {
        if p.n_assets != spec.n_assets {
            return Err(invalid("policy and generator disagree on the number of assets"));
        }
    }
    let n = mc.n_samples;
    let dz = spec.latent_dim;
    let z = generators::latents(mc.seed, b * n, dz);
    let per = (max_rows / n).max(1);
    let scale = 1.0 / (policies.len() * b) as f64;
    let chunks: Vec<(usize, usize)> = (0..b).step_by(per).map(|lo| (lo, (lo + per).min(b))).collect();
    let run = |&(lo, hi): &(usize, usize)| {
        chunk_objective(
            gen,
            policies,
            &batch.contexts.data()[lo * d..hi * d],
            &batch.scenarios.data()[lo * s..hi * s],
            &z.data()[lo * n * dz..hi * n * dz],
            hi - lo,
            n,
            scale,
            cfg,
            target,
            step,
            batch_index,
        )
    };
    #[cfg(feature = "parallel")]
    let outs: Vec<ChunkOut> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let outs: Vec<ChunkOut> = chunks.iter().map(run).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut hard = 0.0;
    let mut grads = Vec::with_capacity(outs.len());
    for o in outs {
        loss += o.smooth;
        hard += o.hard;
        grads.push(o.grads);
    }
    Ok(LossEval {
        loss,
        hard,
        chunks: grads,
    })
}

/// Mean score over policies and minibatch contexts with generator gradients.
pub fn fixed_policy_loss(
    gen: &GeneratorParams,
    policies: &[PolicyParams],
    batch: &Batch,
    score_cfg: &ScoreConfig,
    mc_cfg: &McConfig,
) -> Result<LossEval> {
    let refs: Vec<&PolicyParams> = policies.iter().collect();
    objective(gen, &refs, batch, score_cfg, mc_cfg, 16_384, Target::Generator, 0, 0)
}

fn clip(params: &mut ParamStore, cap: Option<f64>) {
    if let Some(cap) = cap {
        let norm = params.grad_norm();
        if norm > cap {
            params.scale_grads(cap / norm);
        }
    }
}

/// One Adam ascent step on the adversary with the generator frozen.
/// Returns the minibatch scores evaluated before the update.
pub fn adversary_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossEval> {
    adversary_step_at(state, batch, cfg, 0)
}

fn adversary_step_at(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, batch_index: usize) -> Result<LossEval> {
    let Some(adv) = state.adversary.as_ref() else {
        return Err(invalid("adversary step needs an adversarial policy"));
    };
    if adv.params().is_none() {
        return Err(invalid("adversary has no trainable parameters"));
    }
    let mc = McConfig::new(cfg.mc_samples, derive_seed(cfg.seed, state.step as u64, 0));
    let eval = objective(
        &state.generator,
        &[adv],
        batch,
        &cfg.train_score(),
        &mc,
        cfg.max_rows_per_graph,
        Target::Adversary,
        state.step,
        batch_index,
    )?;
    let lr = state.lr_phi(cfg)?;
    let adv = state.adversary.as_mut().expect("checked");
    let params = adv.params_mut().expect("checked");
    params.zero_grads();
    for g in &eval.chunks {
        params.accumulate("pol0.", g)?;
    }
    clip(params, cfg.grad_clip);
    let adam = state.adv_adam.get_or_insert_with(|| Adam::new(cfg.adam, params));
    adam.step(params, lr, Direction::Ascent)?;
    Ok(eval)
}

/// One Adam descent step on the generator with policies frozen, against the
/// adversary in adversarial mode or the fixed policies otherwise.
pub fn generator_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossEval> {
    generator_step_at(state, batch, cfg, 0)
}

fn generator_step_at(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, batch_index: usize) -> Result<LossEval> {
    let policies: Vec<&PolicyParams> = match cfg.mode {
        TrainMode::Adversarial => match state.adversary.as_ref() {
            Some(a) => vec![a],
            None => return Err(invalid("adversarial mode needs an adversary")),
        },
        TrainMode::FixedPolicy => cfg.fixed_policies.iter().collect(),
    };
    let mc = McConfig::new(cfg.mc_samples, derive_seed(cfg.seed, state.step as u64, 1));
    let eval = objective(
        &state.generator,
        &policies,
        batch,
        &cfg.train_score(),
        &mc,
        cfg.max_rows_per_graph,
        Target::Generator,
        state.step,
        batch_index,
    )?;
    let lr = state.lr_theta(cfg)?;
    let params = &mut state.generator.params;
    params.zero_grads();
    for g in &eval.chunks {
        params.accumulate("gen.", g)?;
    }
    clip(params, cfg.grad_clip);
    state.gen_adam.step(params, lr, Direction::Descent)?;
    Ok(eval)
}

/// Mean hard score of `gen` over `batch`, averaged over `policies`, with the
/// implied risk from common latent draws.
pub fn hard_score(
    gen: &GeneratorParams,
    policies: &[PolicyParams],
    batch: &Batch,
    score_cfg: &ScoreConfig,
    mc: &McConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluation batch"));
    }
    let cfg = score_cfg.hard();
    let est = implied_risk_batch(gen, &batch.contexts, policies, mc, cfg.alpha)?;
    let horizon = gen.spec().horizon;
    let mut total = 0.0;
    for (k, pp) in policies.iter().enumerate() {
        let real = policy::outcomes(pp, &batch.scenarios, horizon)?;
        for (a, l) in est[k].iter().zip(&real) {
            total += score(a, *l, &cfg)?;
        }
    }
    Ok(total / (policies.len() * batch.len()) as f64)
}

/// Runs `cfg.epochs` epochs from a fresh seeded state.
pub fn train(dataset: &WindowDataset, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::init(dataset, cfg)?;
    train_from(state, dataset, cfg)
}

/// Continues training `state`; the schedule spans this call's epochs.
pub fn train_from(mut state: TrainState, dataset: &WindowDataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let spec = state.generator.spec();
    if spec.n_assets != dataset.n_assets() || spec.cond_len != dataset.cond_len || spec.horizon != dataset.horizon {
        return Err(invalid("generator shape does not match the dataset"));
    }
    if cfg.mode == TrainMode::Adversarial && state.adversary.is_none() {
        return Err(invalid("adversarial mode needs an adversary"));
    }
    if cfg.epochs == 0 {
        return Ok(state);
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let val = dataset.split_batch(Split::Val).ok().filter(|b| !b.is_empty());
    let benchmark = cfg.benchmark(dataset.n_assets());
    let val_mc = McConfig::new(cfg.mc_samples, derive_seed(cfg.seed, u64::MAX, 2));
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    state.total_steps = state.step + cfg.epochs * per_epoch;
    let first_epoch = state.history.last().map_or(0, |r| r.epoch + 1);
    for e in 0..cfg.epochs {
        let epoch = first_epoch + e;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 3)));
        let mut score_sum = 0.0;
        let mut lr = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = dataset.batch(idx)?;
            if cfg.mode == TrainMode::Adversarial {
                for _ in 0..cfg.adversary_steps {
                    adversary_step_at(&mut state, &batch, cfg, bi)?;
                }
            }
            lr = state.lr_theta(cfg)?;
            let eval = generator_step_at(&mut state, &batch, cfg, bi)?;
            score_sum += eval.hard * idx.len() as f64;
            state.step += 1;
        }
        let train_score = score_sum / train_idx.len() as f64;
        let val_score = match &val {
            Some(b) => hard_score(&state.generator, &benchmark, b, &cfg.score, &val_mc)?,
            None => f64::NAN,
        };
        log::info!("epoch {epoch}: train {train_score:.6} val {val_score:.6} lr {lr:.3e}");
        state.history.push(EpochRecord {
            epoch,
            train_score,
            val_score,
            lr,
        });
        let improves = match &state.best {
            None => true,
            Some(best) => val_score.is_nan() || val_score < best.val_score,
        };
        if improves {
            state.best = Some(Snapshot {
                epoch,
                val_score,
                generator: state.generator.clone(),
                adversary: state.adversary.clone(),
            });
        }
    }
    Ok(state)
}

/// CSV with header `epoch,train_score,val_score,lr`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_score,val_score,lr\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_score, r.val_score, r.lr));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
