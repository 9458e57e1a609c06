//! Evaluation metrics, density export, run orchestration and reports.

mod config;
mod density;
mod run;

use serde::{Deserialize, Serialize};

use crate::baselines::{DccGarchModel, DirectLinearModel};
use crate::datapipe::{Batch, Split, WindowDataset};
use crate::error::{invalid, Error, Result};
use crate::generators::GeneratorParams;
use crate::policy::{self, PolicyKind, PolicyParams};
use crate::risk::{empirical_var_es, implied_risk_batch, McConfig};
use crate::scoring::{oracle_bound, score, RiskEstimate, ScoreConfig};
use crate::trainer::{adversary_step, derive_seed, hard_score, LrSchedule, TrainConfig, TrainMode, TrainState};

pub use config::{load_dataset, DataSource, RunConfig};
pub use density::{export_pnl_density, kde, silverman_bandwidth, DensityTable, MarginalRow};
pub use run::{
    density_run, eval_run, load_model, report, train_run, write_report_csv, ReportRow, RunInfo, StoredModel, ADVERSARY_FILE,
    ALL_POLICIES, CONFIG_FILE, GENERATOR_FILE, HISTORY_FILE, MODEL_FILE, RUN_FILE,
};

/// Anything that yields conditional (VaR, ES) estimates for dataset windows.
#[derive(Debug, Clone)]
pub enum Model {
    Generator(GeneratorParams),
    DccGarch(DccGarchModel),
    /// Output columns follow `policies`, by name.
    Direct {
        model: DirectLinearModel,
        policies: Vec<String>,
    },
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Generator(_) => "generator",
            Model::DccGarch(_) => "dcc_garch",
            Model::Direct { .. } => "direct_linear",
        }
    }

    /// Estimates indexed `[policy][window]` for windows `idx`.
    pub fn estimates(
        &self,
        dataset: &WindowDataset,
        idx: &[usize],
        policies: &[PolicyParams],
        mc: &McConfig,
        alpha: f64,
    ) -> Result<Vec<Vec<RiskEstimate>>> {
        match self {
            Model::Generator(g) => {
                let batch = dataset.batch(idx)?;
                implied_risk_batch(g, &batch.contexts, policies, mc, alpha)
            }
            Model::DccGarch(m) => {
                mc.validate()?;
                let per_window = |&i: &usize| -> Result<Vec<RiskEstimate>> {
                    let ys = m.scenarios(dataset, i, mc.n_samples, mc.seed)?;
                    policies
                        .iter()
                        .map(|p| {
                            let ls = policy::outcomes(p, &ys, dataset.horizon)?;
                            let (v, e) = empirical_var_es(&ls, alpha)?;
                            Ok(RiskEstimate::var_es(v, e))
                        })
                        .collect()
                };
                let rows: Vec<Vec<RiskEstimate>> = idx.iter().map(per_window).collect::<Result<_>>()?;
                Ok((0..policies.len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect())
            }
            Model::Direct { model, policies: names } => {
                let cols: Vec<usize> = policies
                    .iter()
                    .map(|p| {
                        names
                            .iter()
                            .position(|n| n == p.name())
                            .ok_or_else(|| invalid(format!("direct model has no column for policy {}", p.name())))
                    })
                    .collect::<Result<_>>()?;
                let preds: Vec<Vec<RiskEstimate>> =
                    idx.iter().map(|&i| model.predict(&dataset.context(i))).collect::<Result<_>>()?;
                Ok(cols.iter().map(|&k| preds.iter().map(|p| p[k]).collect()).collect())
            }
        }
    }
}

/// Realized outcomes `[policy][window]`.
pub fn realized_outcomes(batch: &Batch, policies: &[PolicyParams], horizon: usize) -> Result<Vec<Vec<f64>>> {
    policies.iter().map(|p| policy::outcomes(p, &batch.scenarios, horizon)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub policy: String,
    pub score: f64,
    pub violation_rate_pct: f64,
    pub oracle_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_policy: Vec<PolicyScore>,
    /// Mean over policies.
    pub overall: f64,
    pub violation_rate_pct: f64,
    pub oracle_bound: f64,
}

/// Percentage of outcomes strictly below their VaR forecast.
pub fn violation_pct(est: &[RiskEstimate], outcomes: &[f64]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("violation rate sample"));
    }
    if est.len() != outcomes.len() {
        return Err(invalid("one estimate per outcome is required"));
    }
    let hits = est.iter().zip(outcomes).filter(|(a, l)| **l < a.v).count();
    Ok(100.0 * hits as f64 / outcomes.len() as f64)
}

/// Mean hard-indicator score of estimates against outcomes.
pub fn mean_score(est: &[RiskEstimate], outcomes: &[f64], cfg: &ScoreConfig) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("score sample"));
    }
    let hard = cfg.hard();
    let mut total = 0.0;
    for (a, l) in est.iter().zip(outcomes) {
        total += score(a, *l, &hard)?;
    }
    Ok(total / outcomes.len() as f64)
}

/// Per-policy and overall mean score on `split`, with violation rates and
/// oracle bounds on the same outcomes.
pub fn evaluate_score(
    model: &Model,
    dataset: &WindowDataset,
    split: Split,
    policies: &[PolicyParams],
    score_cfg: &ScoreConfig,
    mc: &McConfig,
) -> Result<ScoreSummary> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if policies.is_empty() {
        return Err(Error::Empty("policy set"));
    }
    let batch = dataset.batch(&idx)?;
    let est = model.estimates(dataset, &idx, policies, mc, score_cfg.alpha)?;
    let real = realized_outcomes(&batch, policies, dataset.horizon)?;
    let per_policy = policies
        .iter()
        .enumerate()
        .map(|(k, p)| {
            Ok(PolicyScore {
                policy: p.name().into(),
                score: mean_score(&est[k], &real[k], score_cfg)?,
                violation_rate_pct: violation_pct(&est[k], &real[k])?,
                oracle_bound: oracle_bound(&real[k], score_cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_policy.len() as f64;
    Ok(ScoreSummary {
        overall: per_policy.iter().map(|p| p.score).sum::<f64>() / k,
        violation_rate_pct: per_policy.iter().map(|p| p.violation_rate_pct).sum::<f64>() / k,
        oracle_bound: per_policy.iter().map(|p| p.oracle_bound).sum::<f64>() / k,
        per_policy,
    })
}

/// VaR violation percentage of `policy` on `split`.
pub fn violation_rate(
    model: &Model,
    dataset: &WindowDataset,
    split: Split,
    policy: &PolicyParams,
    alpha: f64,
    mc: &McConfig,
) -> Result<f64> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let batch = dataset.batch(&idx)?;
    let est = model.estimates(dataset, &idx, std::slice::from_ref(policy), mc, alpha)?;
    let real = policy::outcomes(policy, &batch.scenarios, dataset.horizon)?;
    violation_pct(&est[0], &real)
}

/// Budget of the fresh adversary trained against a frozen generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseConfig {
    pub steps: usize,
    pub layers: usize,
    pub kappa: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Monte Carlo draws per context during adversary training.
    pub train_mc_samples: usize,
    /// Monte Carlo draws per context for the final score.
    pub eval_mc_samples: usize,
    pub seed: u64,
    pub score: ScoreConfig,
}

impl Default for WorstCaseConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            layers: 3,
            kappa: 1.0,
            lr: 1e-2,
            batch_size: 128,
            train_mc_samples: 500,
            eval_mc_samples: 2000,
            seed: 0,
            score: ScoreConfig::default().smoothed(10.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCase {
    /// Larger of the trained adversary's score and the benchmark scores.
    pub score: f64,
    pub adversary_score: f64,
    pub steps: usize,
    /// The policy attaining `score`.
    pub policy: PolicyParams,
    /// Minibatch smooth score before each step.
    pub trace: Vec<f64>,
}

/// Trains a seeded GRU adversary against the frozen generator on `split`
/// and reports its final hard-indicator mean score there, or the score of
/// a benchmark policy if one does worse. A short search can miss a direction
/// that a fixed strategy already exposes.
pub fn worst_case_eval(
    generator: &GeneratorParams,
    dataset: &WindowDataset,
    split: Split,
    cfg: &WorstCaseConfig,
) -> Result<WorstCase> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let m = dataset.n_assets();
    let adv = PolicyParams::adversarial(m, cfg.layers, cfg.kappa, derive_seed(cfg.seed, 7, 0));
    let tcfg = TrainConfig {
        mode: TrainMode::Adversarial,
        lr_phi: cfg.lr,
        lr_schedule: LrSchedule::Constant { lr: cfg.lr },
        mc_samples: cfg.train_mc_samples,
        seed: cfg.seed,
        score: cfg.score,
        kappa: cfg.kappa,
        adversary_layers: cfg.layers,
        batch_size: cfg.batch_size,
        ..TrainConfig::default()
    };
    tcfg.validate()?;
    let mut state = TrainState::new(generator.clone(), Some(adv), tcfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps);
    let batches: Vec<Batch> = idx.chunks(cfg.batch_size.max(1)).map(|c| dataset.batch(c)).collect::<Result<_>>()?;
    for s in 0..cfg.steps {
        let eval = adversary_step(&mut state, &batches[s % batches.len()], &tcfg)?;
        trace.push(eval.loss);
        state.step += 1;
    }
    let policy = state.adversary.take().expect("adversary present");
    let batch = dataset.batch(&idx)?;
    let mc = McConfig::new(cfg.eval_mc_samples, derive_seed(cfg.seed, 7, 1));
    let adversary_score = hard_score(generator, std::slice::from_ref(&policy), &batch, &cfg.score, &mc)?;
    let (mut score, mut policy) = (adversary_score, policy);
    for kind in [PolicyKind::IdentitySum, PolicyKind::MeanReversion, PolicyKind::TrendFollowing] {
        let pp = PolicyParams::from_kind(kind, m, cfg.kappa, 1, 0);
        let s = hard_score(generator, std::slice::from_ref(&pp), &batch, &cfg.score, &mc)?;
        if s > score {
            (score, policy) = (s, pp);
        }
    }
    Ok(WorstCase {
        score,
        adversary_score,
        steps: cfg.steps,
        policy,
        trace,
    })
}
