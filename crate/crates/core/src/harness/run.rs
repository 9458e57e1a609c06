//! Run directories: training, evaluation and Table-shaped reports.
//!
//! A run directory holds `config.toml`, `run.json`, the model file
//! (`generator.ckpt` plus optional `adversary.ckpt`, or `model.json` for the
//! econometric and linear baselines), `history.csv` for trained generators,
//! and one `eval_<split>.csv` per evaluated split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_direct, DccGarchModel, DirectConfig, DirectLinearModel, GarchParams};
use crate::datapipe::{Split, WindowDataset};
use crate::error::{Error, Result};
use crate::generators::GeneratorParams;
use crate::policy::PolicyParams;
use crate::risk::McConfig;
use crate::trainer::{derive_seed, train, write_history_csv, TrainMode, TrainState};

use super::{evaluate_score, export_pnl_density, load_dataset, worst_case_eval, DensityTable, Model, RunConfig};

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const ADVERSARY_FILE: &str = "adversary.ckpt";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub arch: String,
    pub mode: String,
    pub seed: u64,
    pub fingerprint: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
}

impl RunInfo {
    fn new(cfg: &RunConfig, epochs_run: usize, best_epoch: Option<usize>) -> Result<Self> {
        let generator = matches!(cfg.model.as_str(), "gar" | "unconditional");
        let mode = match cfg.model.as_str() {
            "gar" => cfg.mode.name(),
            "unconditional" => TrainMode::FixedPolicy.name(),
            _ => "none",
        };
        Ok(Self {
            model: cfg.model.clone(),
            arch: if generator { cfg.architecture.name().into() } else { "none".into() },
            mode: mode.into(),
            seed: cfg.seed,
            fingerprint: format!("{:016x}", cfg.fingerprint()?),
            epochs_run,
            best_epoch,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BaselineFile {
    DccGarch { params: GarchParams },
    DirectLinear { policies: Vec<String>, model: DirectLinearModel },
}

/// A loaded model file with the adversary stored beside it, if any.
#[derive(Debug, Clone)]
pub struct StoredModel {
    pub model: Model,
    pub adversary: Option<PolicyParams>,
}

fn absolutize(cfg: &RunConfig, base: &Path) -> RunConfig {
    let mut cfg = cfg.clone();
    if let Some(p) = &cfg.data {
        if p.is_relative() {
            let joined = base.join(p);
            cfg.data = Some(joined.canonicalize().unwrap_or(joined));
        }
    }
    cfg
}

/// Trains (or fits) the configured model and writes the run directory.
/// Relative data paths resolve against `base`.
pub fn train_run(cfg: &RunConfig, base: &Path, out: &Path) -> Result<RunInfo> {
    cfg.validate()?;
    let cfg = absolutize(cfg, base);
    let dataset = load_dataset(&cfg, base)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let info = match cfg.model.as_str() {
        "gar" | "unconditional" => {
            let mut tcfg = cfg.train_config(dataset.n_assets())?;
            if cfg.model == "unconditional" {
                tcfg.mode = TrainMode::FixedPolicy;
            }
            let state: TrainState = train(&dataset, &tcfg)?;
            state.best_generator().save(&out.join(GENERATOR_FILE))?;
            if let Some(adv) = state.best_adversary() {
                adv.save(&out.join(ADVERSARY_FILE))?;
            }
            write_history_csv(&out.join(HISTORY_FILE), &state.history)?;
            RunInfo::new(&cfg, state.history.len(), state.best.as_ref().map(|b| b.epoch))?
        }
        "dcc_garch" => {
            let m = DccGarchModel::fit(&dataset)?;
            let file = BaselineFile::DccGarch { params: m.params };
            std::fs::write(out.join(MODEL_FILE), serde_json::to_string_pretty(&file)?)?;
            RunInfo::new(&cfg, 0, None)?
        }
        _ => {
            let policies = cfg.benchmark(dataset.n_assets());
            let dcfg = DirectConfig {
                iterations: cfg.direct_iterations,
                lr: cfg.direct_lr,
                warm_start: true,
            };
            let model = fit_direct(&dataset, &policies, &cfg.score(), &dcfg)?;
            let file = BaselineFile::DirectLinear {
                policies: policies.iter().map(|p| p.name().to_string()).collect(),
                model,
            };
            std::fs::write(out.join(MODEL_FILE), serde_json::to_string_pretty(&file)?)?;
            RunInfo::new(&cfg, 0, None)?
        }
    };
    std::fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(info)
}

/// Loads a generator checkpoint or a baseline `model.json`. DCC-GARCH
/// models need the dataset to rebuild their filter states.
pub fn load_model(path: &Path, dataset: Option<&WindowDataset>) -> Result<StoredModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.starts_with(b"GARCKPT1") {
        let generator = GeneratorParams::load(path)?;
        let adv_path = path.with_file_name(ADVERSARY_FILE);
        let adversary = if adv_path.exists() { Some(PolicyParams::load(&adv_path)?) } else { None };
        return Ok(StoredModel {
            model: Model::Generator(generator),
            adversary,
        });
    }
    let file: BaselineFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let model = match file {
        BaselineFile::DccGarch { params } => {
            params.validate()?;
            let ds = dataset.ok_or_else(|| Error::Format("DCC-GARCH evaluation needs the run's dataset".into()))?;
            let states = params.filter(&ds.panel.returns)?;
            Model::DccGarch(DccGarchModel { params, states })
        }
        BaselineFile::DirectLinear { policies, model } => Model::Direct { model, policies },
    };
    Ok(StoredModel { model, adversary: None })
}

/// One row of the evaluation and report CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub arch: String,
    pub mode: String,
    pub split: String,
    pub policy: String,
    pub score: f64,
    pub violation_rate_pct: f64,
    pub oracle_bound: f64,
    pub worst_case_score: Option<f64>,
    pub seed: u64,
}

/// Name of the aggregate row over all benchmark policies.
pub const ALL_POLICIES: &str = "all";

fn run_dir(checkpoint: &Path) -> PathBuf {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_info(dir: &Path, cfg: &RunConfig) -> Result<RunInfo> {
    match std::fs::read_to_string(dir.join(RUN_FILE)) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(_) => RunInfo::new(cfg, 0, None),
    }
}

/// Evaluates the model at `checkpoint` on `split`, writing
/// `eval_<split>.csv` next to it. The run's `config.toml` is used unless
/// `config` is given.
pub fn eval_run(checkpoint: &Path, split: Split, worst_case: bool, config: Option<&Path>) -> Result<Vec<ReportRow>> {
    if !checkpoint.exists() {
        return Err(Error::NotFound(checkpoint.to_path_buf()));
    }
    let dir = run_dir(checkpoint);
    let cfg_path = config.map_or_else(|| dir.join(CONFIG_FILE), Path::to_path_buf);
    let cfg = RunConfig::load(&cfg_path)?;
    let base = cfg_path.parent().unwrap_or(Path::new("."));
    let dataset = load_dataset(&cfg, base)?;
    let stored = load_model(checkpoint, Some(&dataset))?;
    let info = read_info(&dir, &cfg)?;
    let policies = cfg.benchmark(dataset.n_assets());
    let mc = McConfig::new(cfg.monte_carlo_sample_size, derive_seed(cfg.seed, 9, 0));
    let summary = evaluate_score(&stored.model, &dataset, split, &policies, &cfg.score(), &mc)?;
    let wc = match (&stored.model, worst_case) {
        (Model::Generator(g), true) => Some(worst_case_eval(g, &dataset, split, &cfg.worst_case())?.score),
        _ => None,
    };
    let row = |policy: &str, score: f64, viol: f64, oracle: f64| ReportRow {
        model: info.model.clone(),
        arch: info.arch.clone(),
        mode: info.mode.clone(),
        split: split.name().into(),
        policy: policy.into(),
        score,
        violation_rate_pct: viol,
        oracle_bound: oracle,
        worst_case_score: wc,
        seed: info.seed,
    };
    let mut rows: Vec<ReportRow> = summary
        .per_policy
        .iter()
        .map(|p| row(&p.policy, p.score, p.violation_rate_pct, p.oracle_bound))
        .collect();
    rows.push(row(ALL_POLICIES, summary.overall, summary.violation_rate_pct, summary.oracle_bound));
    std::fs::write(dir.join(format!("eval_{}.csv", split.name())), write_report_csv(&rows)?)?;
    Ok(rows)
}

pub fn write_report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record([
            "model",
            "arch",
            "mode",
            "split",
            "policy",
            "score",
            "violation_rate_pct",
            "oracle_bound",
            "worst_case_score",
            "seed",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Aggregate rows, one per (run, split), from every run directory under
/// `runs` (or `runs` itself), in sorted path order.
pub fn report(runs: &Path) -> Result<Vec<ReportRow>> {
    if !runs.is_dir() {
        return Err(Error::NotFound(runs.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.push(runs.to_path_buf());
    dirs.sort();
    let mut rows = Vec::new();
    for dir in dirs {
        for split in Split::ALL {
            let f = dir.join(format!("eval_{}.csv", split.name()));
            if f.exists() {
                rows.extend(read_rows(&f)?.into_iter().filter(|r| r.policy == ALL_POLICIES));
            }
        }
    }
    Ok(rows)
}

/// PnL and tail densities of the generator at `checkpoint` for the first
/// `n_contexts` windows of `split`, written as `density_pnl.csv` and
/// `density_marginals.csv` under `out`.
pub fn density_run(checkpoint: &Path, split: Split, n_contexts: usize, grid: &[f64], out: &Path) -> Result<DensityTable> {
    if !checkpoint.exists() {
        return Err(Error::NotFound(checkpoint.to_path_buf()));
    }
    let dir = run_dir(checkpoint);
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let dataset = load_dataset(&cfg, &dir)?;
    let Model::Generator(gen) = load_model(checkpoint, Some(&dataset))?.model else {
        return Err(Error::Format("density export needs a generator checkpoint".into()));
    };
    let idx: Vec<usize> = dataset.indices(split).into_iter().take(n_contexts).collect();
    if idx.is_empty() {
        return Err(Error::Empty("density contexts"));
    }
    let batch = dataset.batch(&idx)?;
    let policies = cfg.benchmark(dataset.n_assets());
    let mc = McConfig::new(cfg.monte_carlo_sample_size, derive_seed(cfg.seed, 9, 1));
    let table = export_pnl_density(&gen, &batch.contexts, &policies, &mc, grid)?;
    std::fs::create_dir_all(out)?;
    table.write(&out.join("density_pnl.csv"), &out.join("density_marginals.csv"))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(model: &str, extra: &str) -> RunConfig {
        let text = format!(
            "model = \"{model}\"\nsynthetic_family = \"linear_gaussian\"\nsynthetic_samples = 60\n\
             number_of_assets = 2\nconditioning_window_length = 3\ngenerated_trajectory_length = 4\n\
             split = [0.6, 0.2, 0.2]\nepochs = 1\nbatch_size = 16\nmonte_carlo_sample_size = 30\n\
             architecture = \"encoder_linear\"\ngru_layers = 1\nworst_case_steps = 2\n\
             worst_case_mc_samples = 10\ndirect_iterations = 20\n{extra}"
        );
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn train_eval_report_round_trip() {
        let root = tempfile::tempdir().unwrap();
        let cases = [
            ("a_gar", small_config("gar", "mode = \"adversarial\"\n"), GENERATOR_FILE),
            ("b_direct", small_config("direct_linear", ""), MODEL_FILE),
            ("c_uncond", small_config("unconditional", ""), GENERATOR_FILE),
        ];
        for (name, cfg, file) in &cases {
            let dir = root.path().join(name);
            train_run(cfg, root.path(), &dir).unwrap();
            let rows = eval_run(&dir.join(file), Split::Test, true, None).unwrap();
            assert_eq!(rows.len(), 3);
            assert!(rows.iter().all(|r| r.score >= r.oracle_bound));
        }
        assert!(root.path().join("a_gar").join(ADVERSARY_FILE).exists());
        let rows = report(root.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].mode, "adversarial");
        assert!(rows[0].worst_case_score.is_some());
        assert!(rows[1].worst_case_score.is_none());
        let a = write_report_csv(&rows).unwrap();
        let b = write_report_csv(&report(root.path()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("model,arch,mode,split,policy,score,violation_rate_pct,oracle_bound,worst_case_score,seed\n"));
    }

    #[test]
    fn dcc_run_and_density_export() {
        let root = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml(
            "model = \"dcc_garch\"\nsynthetic_family = \"garch\"\nsynthetic_samples = 300\nmonte_carlo_sample_size = 50\n",
        )
        .unwrap();
        let dir = root.path().join("dcc");
        let info = train_run(&cfg, root.path(), &dir).unwrap();
        assert_eq!(info.arch, "none");
        let rows = eval_run(&dir.join(MODEL_FILE), Split::Val, false, None).unwrap();
        assert_eq!(rows.last().unwrap().policy, ALL_POLICIES);

        let mut g = small_config("gar", "");
        g.epochs = 0;
        let gdir = root.path().join("g");
        train_run(&g, root.path(), &gdir).unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let t = density_run(&gdir.join(GENERATOR_FILE), Split::Test, 2, &grid, &gdir).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(gdir.join("density_pnl.csv").exists());
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let err = eval_run(Path::new("/nonexistent/run/generator.ckpt"), Split::Test, false, None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run/generator.ckpt"));
    }
}
