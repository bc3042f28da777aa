use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pccl_core::config::KEYS;

fn pccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pccl")).args(args).env_remove("PCCL_OUT_DIR").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 34 phantoms at 32 px: 20 train (one labelled), 4 val, 10 test.
fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = pccl(&["synth", "--n", "34", "--size", "32", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--override", "epochs=1", "--override", "input_size=32"];
    args.extend_from_slice(extra);
    pccl(&args)
}

#[test]
fn synth_reports_the_split_and_rejects_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = pccl(&["synth", "--n", "17", "--size", "16", "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train=10 val=2 test=5"));
    let o = pccl(&["synth", "--n", "0", "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = pccl(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn train_leaves_checkpoint_history_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    let o = train(&data, &out, &["--mode", "mt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model1.safetensors", "history.jsonl", "test_report.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = std::fs::read_to_string(out.join("test_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 10);
}

#[test]
fn output_directory_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_pccl"))
        .args(["train", "--data", s(&data), "--mode", "supervised_only"])
        .args(["--override", "epochs=1", "--override", "input_size=32"])
        .env("PCCL_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("history.jsonl").is_file());
}

#[test]
fn every_bad_override_is_reported_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let o = train(
        &data,
        dir.path(),
        &["--override", "epochs=many", "--override", "no_such_key=1", "--override", "loss_weights.beta=-1"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in ["epochs", "no_such_key", "beta"] {
        assert!(err.contains(needle), "{needle} not in {err}");
    }
    let o = pccl(&["train", "--data", s(&data), "--mode", "dan"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_applied_before_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "epochs = 2\ninput_size = 32\n[loss_weights]\nlambda = 3.0\n").unwrap();
    let out = dir.path().join("run");
    let o = pccl(&[
        "train", "--data", s(&data), "--out", s(&out), "--config", s(&file), "--override", "epochs=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let info = pccl::checkpoint::info(&out.join("model1.safetensors")).unwrap();
    let cfg = info.config.unwrap();
    assert_eq!((cfg.epochs, cfg.loss_weights.lambda), (1, 3.0));
}

#[test]
fn report_plots_every_history_and_tabulates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let (a, b) = (dir.path().join("pccl"), dir.path().join("sup"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &["--mode", "supervised_only"]).status.success());
    let out = dir.path().join("report");
    let o = pccl(&["report", s(&a.join("history.jsonl")), s(&b.join("history.jsonl")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["pccl_loss.svg", "pccl_metrics.svg", "sup_loss.svg", "sup_metrics.svg"] {
        let svg = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"), "{f}");
    }
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("pccl,") && lines[2].starts_with("supervised_only,"), "{table}");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "{\"kind\":\"bogus\"}\n").unwrap();
    let o = pccl(&["report", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(pccl(&["report", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn help_lists_every_configuration_key() {
    let o = pccl(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = String::from_utf8_lossy(&o.stdout);
    for k in KEYS {
        assert!(help.contains(k.key), "{} missing from help", k.key);
    }
}

#[test]
fn eval_scores_a_saved_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("run");
    assert!(train(&data, &run, &["--mode", "supervised_only"]).status.success());
    let ckpt = run.join("model1.safetensors");
    let o = pccl(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("eval_val.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let o = pccl(&["eval", "--checkpoint", s(&dir.path().join("none")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_agreement_weight_matches_disabled_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&data, &a, &["--override", "loss_weights.beta=0"]).status.success());
    assert!(train(&data, &b, &["--override", "ablation.mac=false"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("history.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("abl");
    let o = pccl(&[
        "ablate", "--data", s(&data), "--out", s(&out), "--override", "epochs=1", "--override", "input_size=32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
}
