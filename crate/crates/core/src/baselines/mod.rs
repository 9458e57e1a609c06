//! Reference models: the unconditional generator, a direct linear (VaR, ES)
//! regression and DCC-GARCH(1,1) simulation.

pub mod dcc;
pub mod direct;
pub mod garch;
pub mod optimize;

use serde::{Deserialize, Serialize};

use crate::datapipe::{Split, WindowDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::generators::GeneratorParams;
use crate::policy::{self, PolicyParams};
use crate::scoring::ScoreConfig;
use crate::trainer::{train, TrainConfig, TrainMode};

pub use dcc::{fit_dcc, fit_dcc_garch, DccFit, FilterState, GarchParams};
pub use direct::{fit_direct_linear, DirectConfig, DirectLinearModel};
pub use garch::{fit_garch11, simulate_garch11, GarchCoeffs, GarchFit};

/// Trains a latent-only generator in fixed mode under `policies`.
pub fn fit_unconditional(dataset: &WindowDataset, policies: &[PolicyParams], cfg: &TrainConfig) -> Result<GeneratorParams> {
    let cfg = TrainConfig {
        conditional: false,
        mode: TrainMode::FixedPolicy,
        fixed_policies: policies.to_vec(),
        ..cfg.clone()
    };
    let state = train(dataset, &cfg)?;
    Ok(state.best_generator().clone())
}

/// Direct linear model on the training split, one output column per policy.
pub fn fit_direct(
    dataset: &WindowDataset,
    policies: &[PolicyParams],
    score: &ScoreConfig,
    cfg: &DirectConfig,
) -> Result<DirectLinearModel> {
    let batch = dataset.split_batch(Split::Train)?;
    if batch.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let outcomes = policies
        .iter()
        .map(|p| policy::outcomes(p, &batch.scenarios, dataset.horizon))
        .collect::<Result<Vec<_>>>()?;
    fit_direct_linear(&batch.contexts, &outcomes, score, cfg)
}

/// DCC-GARCH fitted on the training rows, with the filter run over the
/// whole panel so every window can be simulated from its own end state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccGarchModel {
    pub params: GarchParams,
    pub states: Vec<FilterState>,
}

impl DccGarchModel {
    pub fn fit(dataset: &WindowDataset) -> Result<Self> {
        let train = dataset.indices(Split::Train);
        let end = train
            .iter()
            .map(|&i| dataset.scenario_rows(i).end)
            .max()
            .ok_or(Error::Empty("training split"))?;
        let m = dataset.n_assets();
        let returns = &dataset.panel.returns[..end * m];
        let params = fit_dcc_garch(returns, m)?;
        let states = params.filter(&dataset.panel.returns)?;
        Ok(Self { params, states })
    }

    /// `n` simulated scenarios `(n, M*T)` for window `i`, started from the
    /// filter state on the last context day.
    pub fn scenarios(&self, dataset: &WindowDataset, i: usize, n: usize, seed: u64) -> Result<Tensor> {
        let row = dataset.starts[i] + dataset.cond_len - 1;
        let state = self
            .states
            .get(row)
            .ok_or(Error::IndexOutOfRange {
                index: row,
                len: self.states.len(),
            })?;
        let paths = self.params.simulate(state, dataset.horizon, n, seed)?;
        let width = dataset.scenario_len();
        let data: Vec<f64> = paths.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![n, width], data)
    }
}
