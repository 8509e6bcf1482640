use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_strip-mlp");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("STRIP_MLP_THREADS", "0").output().expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, run_dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"seed = 3
run_dir = "{}"
eval_batch_size = 8
{extra}
[model]
channels = 8
depths = [1, 1, 1, 1]
patch_size = 2
image_size = 16
num_classes = 4

[data]
source = "synthetic"
synthetic_train = 16
synthetic_test = 8
synthetic_classes = 4

[train]
epochs = 1
batch_size = 8
augment = "none"

[train.schedule]
warmup_epochs = 0
total_epochs = 1
"#,
        run_dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["table1", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--patches", "c3"]).status.code(), Some(2));
}

#[test]
fn help_exits_zero_and_shows_defaults() {
    let o = run(&["analyze", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["--variant", "[default: tstar]", "[default: 1000]", "[default: c4]", "[default: 224]"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
    let o = run(&["gradcheck", "--help"]);
    assert!(stdout(&o).contains("[default: 0.00001]") || stdout(&o).contains("[default: 1e-5]"));
}

#[test]
fn table1_prints_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("t1.json");
    let o = run(&["table1", "--json", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("526.85k"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert!(v.is_object() || v.is_array());
}

#[test]
fn analyze_base_variant_matches_budget() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("b.json");
    let o =
        run(&["analyze", "--variant", "b", "--classes", "1000", "--patches", "c4", "--json", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    let params = v["enumerated_params"].as_f64().unwrap();
    assert!((params / 57e6 - 1.0).abs() <= 0.10, "{params}");
    assert!(stdout(&o).contains("total"));
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(&["gradcheck", "--layer", "linear"]).status.code(), Some(0));
    assert_eq!(run(&["gradcheck", "--layer", "no-such-layer"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--layer", "linear", "--tol", "1e-30"]).status.code(), Some(1));
    let o = run(&["gradcheck", "--list"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "block-stack"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &run_dir, "");
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("effective config"));
    for f in ["config.toml", "metrics.jsonl", "checkpoint.smlp"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let ckpt = run_dir.join("checkpoint.smlp");
    let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("test top-1"));
    assert!(stdout(&o).contains("(8 samples)"));

    let effective = run_dir.join("config.toml");
    let o = run(&["eval", "--config", effective.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("unused"), "");
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let rd = dir.path().join(name);
        let o =
            run(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", rd.to_str().unwrap(), "--max-steps", "2"]);
        assert_eq!(o.status.code(), Some(0));
        logs.push(fs::read_to_string(rd.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("r"), "");
    let missing = dir.path().join("missing.smlp");
    let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    let bad = write_config(dir.path(), &dir.path().join("r"), "learning_rate = 1.0");
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    let o = run(&["train", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
