use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gar_core::datapipe::{load_prices, synthetic, write_cache, Cached, Family, Split, SynthConfig};
use gar_core::generators::Arch;
use gar_core::harness::{self, RunConfig};
use gar_core::trainer::TrainMode;
use gar_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gar", version, about = "Risk-aligned scenario generators: data, training, evaluation and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a price CSV (date column, one column per asset) into a log-return cache.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic windowed dataset with a known conditional law.
    Synth {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        assets: usize,
        #[arg(long, default_value_t = 5)]
        cond_len: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, validation and test fractions.
        #[arg(long, value_parser = parse_split, default_value = "0.8,0.1,0.1")]
        split: [f64; 3],
    },
    /// Train or fit the model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory; defaults to `runs/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained model on one split and print per-policy rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also train a fresh adversarial policy against the frozen generator.
        #[arg(long)]
        worst_case: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Collect the evaluated runs under a directory into one CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export synthetic PnL densities and tail marginals as CSV.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 4)]
        contexts: usize,
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        grid_min: f64,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 401)]
        grid_points: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated fractions".to_string())
}

fn grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(hi > lo) {
        return Err(Error::InvalidArgument("grid needs at least two points and grid-max > grid-min".into()));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { csv, out } => {
            let panel = load_prices(&csv)?;
            println!("rows={} assets={} out={}", panel.n_rows(), panel.n_assets(), out.display());
            write_cache(&out, &Cached::Panel(panel))?;
        }
        Command::Synth {
            family,
            out,
            samples,
            assets,
            cond_len,
            horizon,
            seed,
            split,
        } => {
            let cfg = SynthConfig::new(family, samples).with_dims(assets, cond_len, horizon).with_seed(seed);
            let data = synthetic(&cfg)?.split(split)?;
            data.check_leakage()?;
            println!(
                "family={} train={} val={} test={} purged={} out={}",
                family.name(),
                data.count(Split::Train),
                data.count(Split::Val),
                data.count(Split::Test),
                data.purged(),
                out.display()
            );
            write_cache(&out, &Cached::Windows(data))?;
        }
        Command::Train {
            config,
            mode,
            arch,
            seed,
            epochs,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(a) = arch {
                cfg.architecture = a;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
                Path::new("runs").join(stem)
            });
            let base = config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let info = harness::train_run(&cfg, base, &out)?;
            println!("{}", serde_json::to_string(&info)?);
        }
        Command::Eval {
            checkpoint,
            split,
            worst_case,
            config,
        } => {
            let rows = harness::eval_run(&checkpoint, split, worst_case, config.as_deref())?;
            print!("{}", harness::write_report_csv(&rows)?);
        }
        Command::Report { runs, out } => {
            let csv = harness::write_report_csv(&harness::report(&runs)?)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Density {
            checkpoint,
            split,
            contexts,
            grid_min,
            grid_max,
            grid_points,
            out,
        } => {
            let g = grid(grid_min, grid_max, grid_points)?;
            let table = harness::density_run(&checkpoint, split, contexts, &g, &out)?;
            println!("rows={} marginals={} out={}", table.rows.len(), table.marginals.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
