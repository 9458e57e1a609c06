use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "model = \"gar\"\nsynthetic_family = \"linear_gaussian\"\nsynthetic_samples = 60\n\
number_of_assets = 2\nconditioning_window_length = 3\ngenerated_trajectory_length = 4\n\
split = [0.6, 0.2, 0.2]\nepochs = 1\nbatch_size = 16\nmonte_carlo_sample_size = 30\n\
architecture = \"encoder_linear\"\ngru_layers = 1\nworst_case_steps = 2\nworst_case_mc_samples = 10\n\
direct_iterations = 20\nlearning_rate_schedule = \"constant\"\nmax_learning_rate = 0.01\n";

fn gar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gar")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn eval_on_missing_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gar(&["eval", "--checkpoint", "nope/generator.ckpt", "--split", "test"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=not_found"), "{err}");
    assert!(err.contains("nope/generator.ckpt"), "{err}");
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gar(&["train", "--bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", CONFIG);
    let o = gar(&["train", "--config", &cfg, "--epochs", "0", "--out", "run0"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run0");
    assert!(run.join("generator.ckpt").is_file());
    assert!(run.join("config.toml").is_file());
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.trim(), "epoch,train_score,val_score,lr");
}

#[test]
fn report_over_two_runs_has_one_row_per_model_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let gar_cfg = write_config(tmp.path(), "gar.toml", CONFIG);
    let direct_cfg = write_config(tmp.path(), "direct.toml", &CONFIG.replace("model = \"gar\"", "model = \"direct_linear\""));
    for (cfg, out, file) in [(&gar_cfg, "runs/a", "generator.ckpt"), (&direct_cfg, "runs/b", "model.json")] {
        let o = gar(&["train", "--config", cfg, "--out", out], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = format!("{out}/{file}");
        for split in ["val", "test"] {
            let o = gar(&["eval", "--checkpoint", &ckpt, "--split", split], tmp.path());
            assert!(o.status.success(), "{}", stderr(&o));
        }
    }
    let o = gar(&["report", "--runs", "runs"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "model,arch,mode,split,policy,score,violation_rate_pct,oracle_bound,worst_case_score,seed"
    );
    assert_eq!(lines.len(), 1 + 4);
    let keys: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[3].to_string())
        })
        .collect();
    let mut uniq = keys.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), 4, "{keys:?}");

    // same directories, same bytes
    let again = gar(&["report", "--runs", "runs"], tmp.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), csv);
}

#[test]
fn synth_then_train_from_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gar(
        &["synth", "--family", "hetero_scale", "--out", "hs.bin", "--samples", "50", "--cond-len", "3", "--horizon", "4"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("family=hetero_scale"));
    let body = CONFIG.replace("synthetic_family = \"linear_gaussian\"\nsynthetic_samples = 60\n", "data = \"hs.bin\"\n");
    let cfg = write_config(tmp.path(), "cached.toml", &body);
    let o = gar(&["train", "--config", &cfg, "--epochs", "0", "--seed", "5"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("runs/cached/generator.ckpt").is_file());
    let o = gar(
        &["density", "--checkpoint", "runs/cached/generator.ckpt", "--contexts", "2", "--grid-min", "-5", "--out", "dens"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("dens/density_pnl.csv").is_file());
}

#[test]
fn bad_config_is_a_one_line_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "not_a_key = 3\n");
    let o = gar(&["train", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config"), "{err}");
}
