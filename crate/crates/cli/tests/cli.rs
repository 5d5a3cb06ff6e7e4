use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_miktst");

const SMALL: &str = r#"
seed = 3

[windows]
input_len = 24
horizon = 12
source_stride = 12
target_stride = 6
max_finetune_windows = 200

[model]
d_model = 8
n_heads = 2
layers = 1
ff_hidden = 16
mixer_blocks = 1
kan_hidden = 4
kan_grid_size = 4
dropout = 0.0

[pretrain]
epochs = 2
batch_size = 16
lr = 1e-3

[finetune]
epochs = 2

[eval]
seeds = [0]
season = 12

[sweep]
d = [4, 6]
n_heads = [2]
r = [1]
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn miktst(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .env_remove("MIKTST_CONFIG")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["prepare", "pretrain", "finetune", "predict", "evaluate", "ablate", "sweep"] {
        let o = Command::new(BIN).args([sub, "--help"]).output().unwrap();
        ok(&o);
        assert!(String::from_utf8_lossy(&o.stdout).contains("--config"), "{sub}");
    }
    ok(&Command::new(BIN).arg("--help").output().unwrap());
}

#[test]
fn pipeline_smoke_and_prediction_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let start = Instant::now();
    for cmd in ["prepare", "pretrain", "finetune", "evaluate", "predict"] {
        ok(&miktst(&cfg, &out, &[cmd]));
    }
    assert!(start.elapsed() < Duration::from_secs(300));

    let stations = fs::read_to_string(out.join("stations.csv")).unwrap();
    assert_eq!(stations.lines().filter(|l| l.contains(",source,")).count(), 21);
    assert_eq!(stations.lines().filter(|l| l.contains(",target,")).count(), 5);

    let windows = fs::read_to_string(out.join("windows.csv")).unwrap();
    let n_eval = windows.lines().filter(|l| l.starts_with("target_eval,")).count();
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("station,timestamp,forecast_kwh"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), n_eval * 12);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,station,mae,mse,n_samples,units"));
    assert!(metrics.lines().any(|l| l.starts_with("mik-tst,all,")));
    for cmd in ["prepare", "pretrain", "finetune", "evaluate", "predict"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("{cmd}.run.json"))).unwrap()).unwrap();
        assert_eq!(m["seed"], 3);
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    }
    for id in ["S21", "S25"] {
        assert!(out.join("finetune").join(format!("{id}.mikt")).exists());
    }
}

#[test]
fn prepare_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    ok(&miktst(&cfg, &out, &["prepare"]));
    let files = ["series.csv", "split.json", "windows.csv", "stations.csv"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    ok(&miktst(&cfg, &out, &["prepare"]));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join("sessions.csv");
    let body = format!("[data]\nsessions = {:?}\n", missing.display().to_string());
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let o = miktst(&cfg, &out, &["prepare"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains(&missing.display().to_string()), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(!out.exists(), "no partial outputs");
}

#[test]
fn missing_config_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("absent.toml");
    let o = miktst(&cfg, &tmp.path().join("out"), &["prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.toml"));
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nd_model = 8\nwidth = 3\n");
    let o = miktst(&cfg, &tmp.path().join("out"), &["prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "[model]\nd_model = 10\nn_heads = 4\n[pretrain]\nbatch_size = 0\n");
    let o = miktst(&cfg, &tmp.path().join("out"), &["prepare"]);
    let err = stderr(&o);
    assert!(!o.status.success());
    assert!(err.contains("[model]") && err.contains("[pretrain]"), "{err}");
}

#[test]
fn finetune_requires_a_checkpoint_and_cleans_up() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    ok(&miktst(&cfg, &out, &["prepare"]));
    let o = miktst(&cfg, &out, &["finetune"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("pretrain.mikt"), "{}", stderr(&o));
    assert!(!out.join("finetune").exists());
    assert!(!out.join("finetune_loss.csv").exists());

    ok(&miktst(&cfg, &out, &["finetune", "--from-scratch"]));
    assert!(out.join("finetune").join("S21.mikt").exists());
}

#[test]
fn commands_before_prepare_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = miktst(&cfg, &tmp.path().join("out"), &["pretrain"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("miktst prepare"));
}

#[test]
fn identical_runs_give_identical_metric_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for cmd in ["prepare", "pretrain", "finetune", "evaluate"] {
            ok(&miktst(&cfg, &out, &[cmd]));
        }
        ok(&miktst(&cfg, &out, &["ablate"]));
        ok(&miktst(&cfg, &out, &["sweep", "--param", "d"]));
        metrics.push(
            ["metrics.csv", "ablation.csv", "sweep_d.csv"].map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(metrics[0], metrics[1]);
    let ablation = String::from_utf8(metrics[0][1].clone()).unwrap();
    assert_eq!(ablation.lines().count(), 5, "{ablation}");
}

#[test]
fn seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&miktst(&cfg, &a, &["prepare"]));
    let o = Command::new(BIN)
        .args(["--quiet", "--seed", "4", "--out"])
        .arg(&b)
        .arg("prepare")
        .env("MIKTST_CONFIG", &cfg)
        .output()
        .unwrap();
    ok(&o);
    assert_ne!(
        fs::read(a.join("series.csv")).unwrap(),
        fs::read(b.join("series.csv")).unwrap()
    );
}
