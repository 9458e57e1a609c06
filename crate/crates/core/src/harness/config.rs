//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{make_windows, read_cache, synthetic, Cached, Family, SynthConfig, WindowDataset};
use crate::error::{invalid, Error, Result};
use crate::generators::{Arch, Layers};
use crate::optim::AdamConfig;
use crate::policy::{PolicyKind, PolicyParams};
use crate::scoring::ScoreConfig;
use crate::trainer::{LrSchedule, TrainConfig, TrainMode};

use super::WorstCaseConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cache(PathBuf),
    Synthetic(Family),
}

/// Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `gar`, `unconditional`, `dcc_garch` or `direct_linear`.
    pub model: String,
    pub mode: TrainMode,
    pub architecture: Arch,
    pub data: Option<PathBuf>,
    pub synthetic_family: Option<Family>,
    pub synthetic_samples: usize,
    pub split: [f64; 3],
    pub stride: usize,

    pub number_of_assets: Option<usize>,
    pub conditioning_window_length: usize,
    pub generated_trajectory_length: usize,

    pub initial_learning_rate: f64,
    pub max_learning_rate: f64,
    /// `one_cycle` or `constant`.
    pub learning_rate_schedule: String,
    pub batch_size: usize,
    pub optimization_algorithm: String,
    pub epochs: usize,
    pub lr_theta: Option<f64>,
    pub lr_phi: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,

    pub layers: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub lstm_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub activation: String,

    pub gru_layers: usize,
    pub portfolio_cap: f64,
    pub adversary_steps: usize,
    pub policies: Vec<PolicyKind>,

    pub monte_carlo_sample_size: usize,
    pub latent_noise_distribution: String,

    pub quantile: f64,
    pub h2_scale: f64,
    pub sharpness: f64,

    pub seed: u64,
    pub deterministic: bool,
    pub max_rows_per_graph: usize,

    pub worst_case_steps: usize,
    pub worst_case_lr: f64,
    pub worst_case_mc_samples: usize,
    pub direct_iterations: usize,
    pub direct_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = WorstCaseConfig::default();
        Self {
            model: "gar".into(),
            mode: TrainMode::FixedPolicy,
            architecture: Arch::EncoderLstm,
            data: None,
            synthetic_family: None,
            synthetic_samples: 2000,
            split: [0.8, 0.1, 0.1],
            stride: 1,
            number_of_assets: None,
            conditioning_window_length: 5,
            generated_trajectory_length: 10,
            initial_learning_rate: 1e-10,
            max_learning_rate: 1e-3,
            learning_rate_schedule: "one_cycle".into(),
            batch_size: t.batch_size,
            optimization_algorithm: "adam".into(),
            epochs: t.epochs,
            lr_theta: None,
            lr_phi: None,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            grad_clip: None,
            layers: None,
            encoder_layers: None,
            lstm_layers: None,
            decoder_layers: None,
            hidden_dim: 4,
            latent_dim: 4,
            activation: "leaky_relu".into(),
            gru_layers: t.adversary_layers,
            portfolio_cap: t.kappa,
            adversary_steps: t.adversary_steps,
            policies: vec![PolicyKind::MeanReversion, PolicyKind::TrendFollowing],
            monte_carlo_sample_size: t.mc_samples,
            latent_noise_distribution: "normal".into(),
            quantile: 0.05,
            h2_scale: 2.0,
            sharpness: 10.0,
            seed: 0,
            deterministic: true,
            max_rows_per_graph: t.max_rows_per_graph,
            worst_case_steps: w.steps,
            worst_case_lr: w.lr,
            worst_case_mc_samples: w.train_mc_samples,
            direct_iterations: 2000,
            direct_lr: 0.01,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if !matches!(self.model.as_str(), "gar" | "unconditional" | "dcc_garch" | "direct_linear") {
            return cfg_err(format!("unknown model `{}`", self.model));
        }
        if self.optimization_algorithm != "adam" {
            return cfg_err("optimization_algorithm must be adam".into());
        }
        if self.activation != "leaky_relu" {
            return cfg_err("activation must be leaky_relu".into());
        }
        if self.latent_noise_distribution != "normal" {
            return cfg_err("latent_noise_distribution must be normal".into());
        }
        if !matches!(self.learning_rate_schedule.as_str(), "one_cycle" | "constant") {
            return cfg_err(format!("unknown learning_rate_schedule `{}`", self.learning_rate_schedule));
        }
        if self.data.is_some() == self.synthetic_family.is_some() {
            return cfg_err("set exactly one of `data` and `synthetic_family`".into());
        }
        if self.policies.is_empty() {
            return cfg_err("policies must not be empty".into());
        }
        if self.policies.contains(&PolicyKind::AdversarialGru) {
            return cfg_err("benchmark policies cannot include the adversarial GRU".into());
        }
        Ok(())
    }

    pub fn source(&self) -> DataSource {
        match (&self.data, self.synthetic_family) {
            (Some(p), _) => DataSource::Cache(p.clone()),
            (None, Some(f)) => DataSource::Synthetic(f),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn score(&self) -> ScoreConfig {
        ScoreConfig::joint(self.quantile, self.h2_scale).smoothed(self.sharpness)
    }

    pub fn benchmark(&self, n_assets: usize) -> Vec<PolicyParams> {
        self.policies
            .iter()
            .map(|k| PolicyParams::from_kind(*k, n_assets, self.portfolio_cap, self.gru_layers, self.seed))
            .collect()
    }

    fn layer_override(&self) -> Option<Layers> {
        let d = self.architecture.default_layers();
        let encoder = self.encoder_layers.or(self.lstm_layers);
        let decoder = self.decoder_layers.or(match self.architecture {
            Arch::EncoderLstm => None,
            _ => self.layers,
        });
        let encoder = encoder.or(match self.architecture {
            Arch::EncoderLinear => self.layers,
            _ => None,
        });
        (encoder.is_some() || decoder.is_some()).then(|| Layers {
            encoder: encoder.unwrap_or(d.encoder),
            decoder: decoder.unwrap_or(d.decoder),
        })
    }

    pub fn train_config(&self, n_assets: usize) -> Result<TrainConfig> {
        let schedule = if self.learning_rate_schedule == "constant" {
            LrSchedule::Constant {
                lr: self.max_learning_rate,
            }
        } else {
            LrSchedule::OneCycle {
                initial_lr: self.initial_learning_rate,
                max_lr: self.max_learning_rate,
            }
        };
        let cfg = TrainConfig {
            arch: self.architecture,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layer_override(),
            conditional: self.model != "unconditional",
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_theta: self.lr_theta.unwrap_or(self.max_learning_rate),
            lr_phi: self.lr_phi.unwrap_or(self.max_learning_rate),
            lr_schedule: schedule,
            mc_samples: self.monte_carlo_sample_size,
            seed: self.seed,
            mode: self.mode,
            fixed_policies: self.benchmark(n_assets),
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            score: self.score(),
            kappa: self.portfolio_cap,
            adversary_layers: self.gru_layers,
            adversary_steps: self.adversary_steps,
            deterministic: self.deterministic,
            grad_clip: self.grad_clip,
            max_rows_per_graph: self.max_rows_per_graph,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn worst_case(&self) -> WorstCaseConfig {
        WorstCaseConfig {
            steps: self.worst_case_steps,
            layers: self.gru_layers,
            kappa: self.portfolio_cap,
            lr: self.worst_case_lr,
            batch_size: self.batch_size,
            train_mc_samples: self.worst_case_mc_samples,
            eval_mc_samples: self.monte_carlo_sample_size,
            seed: self.seed,
            score: self.score(),
        }
    }

    /// Stable 64-bit FNV-1a hash of the serialized configuration.
    pub fn fingerprint(&self) -> Result<u64> {
        let text = self.to_toml()?;
        Ok(text
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)))
    }
}

/// Builds the split window dataset named by `cfg`. Relative cache paths
/// resolve against `base`.
pub fn load_dataset(cfg: &RunConfig, base: &Path) -> Result<WindowDataset> {
    match cfg.source() {
        DataSource::Synthetic(family) => {
            let mut s = SynthConfig::new(family, cfg.synthetic_samples)
                .with_dims(
                    cfg.number_of_assets.unwrap_or(2),
                    cfg.conditioning_window_length,
                    cfg.generated_trajectory_length,
                )
                .with_seed(cfg.seed);
            s.n_samples = cfg.synthetic_samples;
            synthetic(&s)?.split(cfg.split)
        }
        DataSource::Cache(path) => {
            let path = if path.is_relative() { base.join(path) } else { path };
            let ds = match read_cache(&path)? {
                Cached::Windows(w) => w,
                Cached::Panel(p) => make_windows(&p, cfg.conditioning_window_length, cfg.generated_trajectory_length, cfg.stride)?
                    .split(cfg.split)?,
            };
            if let Some(m) = cfg.number_of_assets {
                if m != ds.n_assets() {
                    return Err(invalid(format!("config expects {m} assets, data has {}", ds.n_assets())));
                }
            }
            Ok(ds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_configuration_table() {
        let cfg = RunConfig::from_toml("synthetic_family = \"hetero_scale\"\n").unwrap();
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.initial_learning_rate, 1e-10);
        assert_eq!(cfg.monte_carlo_sample_size, 2000);
        assert_eq!(cfg.gru_layers, 3);
        assert_eq!(cfg.portfolio_cap, 1.0);
        assert_eq!(cfg.h2_scale, 2.0);
        assert_eq!(cfg.quantile, 0.05);
        assert_eq!((cfg.conditioning_window_length, cfg.generated_trajectory_length), (5, 10));
        let t = cfg.train_config(9).unwrap();
        assert_eq!(t.lr_schedule, LrSchedule::OneCycle { initial_lr: 1e-10, max_lr: 1e-3 });
        assert_eq!(t.fixed_policies.len(), 2);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(matches!(RunConfig::from_toml("synthetic_family = \"spread\"\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("synthetic_family = \"spread\"\noptimization_algorithm = \"sgd\"\n").is_err());
        assert!(RunConfig::from_toml("epochs = 1\n").is_err(), "no data source");
    }

    #[test]
    fn layer_keys_follow_the_architecture() {
        let cfg = RunConfig::from_toml(
            "synthetic_family = \"spread\"\narchitecture = \"encoder_lstm\"\nlstm_layers = 2\ndecoder_layers = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.layer_override(), Some(Layers { encoder: 2, decoder: 3 }));
        let cfg = RunConfig::from_toml("synthetic_family = \"spread\"\narchitecture = \"simple_linear\"\nlayers = 3\n").unwrap();
        assert_eq!(cfg.layer_override(), Some(Layers { encoder: 0, decoder: 3 }));
    }

    #[test]
    fn toml_round_trip_and_fingerprint() {
        let cfg = RunConfig::from_toml("synthetic_family = \"garch\"\nseed = 4\n").unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint().unwrap(), back.fingerprint().unwrap());
        let other = RunConfig { seed: 5, ..cfg.clone() };
        assert_ne!(cfg.fingerprint().unwrap(), other.fingerprint().unwrap());
    }
}
