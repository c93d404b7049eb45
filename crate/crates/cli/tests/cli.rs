//! End-to-end tests of the `lunalab` binary: run/compare/diagnose plus exit
//! codes for each error class.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lunalab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lunalab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LUNALAB_OUTPUT_DIR")
        .output()
        .expect("binary should spawn")
}

fn tiny_config() -> &'static str {
    r#"
run_name = "smoke"
seeds = [0]
precision = "standard"

[model]
arch = "convluna"
blocks = 1
d = 8
h = 2
mlp_dim = 16
memory_size = 2
vocab_size = 16
max_len = 16
num_classes = 2
dropout = 0.0

[model.filter]
kind = "maxpool"
kernel = 2
stride = 1

[train]
base_lr = 0.01
weight_decay = 0.01
warmup_steps = 2
total_steps = 4
batch_size = 4
eval_every = 2
snapshot_every = 2

[task]
kind = "marker"
seed = 3
train_size = 16
val_size = 8
max_length = 16
vocab_size = 16
num_classes = 2
"#
}

#[test]
fn run_zero_steps_gives_valid_artifacts_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    let out = lunalab(
        &[
            "run",
            "--config",
            "c.toml",
            "--output",
            "out",
            "--set",
            "train.total_steps=0",
            "--set",
            "train.warmup_steps=1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("out/smoke/seed_0");
    assert_eq!(fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap(), "");
    assert!(run_dir.join("checkpoints/final.ckpt").exists());
}

#[test]
fn identical_config_and_seed_give_identical_metric_logs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    for out_dir in ["out1", "out2"] {
        let out = lunalab(&["run", "--config", "c.toml", "--output", out_dir], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let log1 = fs::read(dir.path().join("out1/smoke/seed_0/metrics.jsonl")).unwrap();
    let log2 = fs::read(dir.path().join("out2/smoke/seed_0/metrics.jsonl")).unwrap();
    assert!(!log1.is_empty());
    assert_eq!(log1, log2);
    let ckpt1 = fs::read(dir.path().join("out1/smoke/seed_0/checkpoints/final.ckpt")).unwrap();
    let ckpt2 = fs::read(dir.path().join("out2/smoke/seed_0/checkpoints/final.ckpt")).unwrap();
    assert_eq!(ckpt1, ckpt2);
}

#[test]
fn seed_flag_overrides_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    let out = lunalab(
        &["run", "--config", "c.toml", "--output", "out", "--seed", "9"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/smoke/seed_9/metrics.jsonl").exists());
}

#[test]
fn invalid_config_exits_2_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = tiny_config().replace("memory_size = 2", "memory_size = 0");
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("memory_size") || stderr.contains("memory"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{}\nmystery_knob = 1\n", tiny_config());
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_knob"));
}

#[test]
fn malformed_dataset_file_exits_3_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.tsv"), "1 2 3\t0\nnot-a-token\t1\n").unwrap();
    let cfg = tiny_config().replace(
        r#"kind = "marker"
seed = 3
train_size = 16
val_size = 8
max_length = 16
vocab_size = 16
num_classes = 2"#,
        r#"kind = "file-ingest"
seed = 3
train_size = 0
val_size = 4
max_length = 16
vocab_size = 16
num_classes = 2
path = "data.tsv""#,
    );
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

fn write_fake_run(dir: &Path, acc: f64) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("metrics.jsonl"),
        format!(
            "{{\"step\":1,\"split\":\"val\",\"metric\":\"accuracy\",\"value\":{acc},\"wall\":0.0}}\n"
        ),
    )
    .unwrap();
}

#[test]
fn compare_perfect_ordering_prints_chi2_six() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    for (t, base) in [("mem1", 0.1), ("mem16", 0.2), ("mem256", 0.3)] {
        for seed in 0..3 {
            write_fake_run(&suite.join(t).join(format!("seed_{seed}")), base + seed as f64 * 0.01);
        }
    }
    let out = lunalab(&["compare", "suite", "--metric", "final_accuracy"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6.0"), "{stdout}");
    assert!(stdout.contains("0.049787"), "{stdout}");
    assert!(suite.join("report/significance.json").exists());
}

#[test]
fn compare_ragged_inputs_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    write_fake_run(&suite.join("mem1").join("seed_0"), 0.5);
    write_fake_run(&suite.join("mem1").join("seed_1"), 0.5);
    write_fake_run(&suite.join("mem16").join("seed_0"), 0.5);
    let out = lunalab(&["compare", "suite"], dir.path());
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn diagnose_end_to_end_counts_snapshot_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("out/smoke/seed_0");
    let out = lunalab(&["diagnose", run_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // 2 snapshots (steps 2 and 4) × value/gradient
    let table = fs::read_to_string(run_dir.join("report/degradation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(run_dir.join("report/attention_entropy.tsv").exists());
}

#[test]
fn diagnose_without_snapshots_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    write_fake_run(&run_dir, 0.5);
    let out = lunalab(&["diagnose", "run"], dir.path());
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn export_task_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    let out = lunalab(
        &["export-task", "--config", "c.toml", "--split", "val", "--out", "val.tsv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("val.tsv")).unwrap();
    assert_eq!(text.lines().count(), 8);
    for line in text.lines() {
        assert!(line.contains('\t'));
    }
}

#[test]
fn completed_run_is_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), tiny_config()).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert!(out.status.success());
    let before = fs::read(dir.path().join("out/smoke/seed_0/metrics.jsonl")).unwrap();
    let out = lunalab(&["run", "--config", "c.toml", "--output", "out"], dir.path());
    assert_eq!(out.status.code(), Some(5));
    let after = fs::read(dir.path().join("out/smoke/seed_0/metrics.jsonl")).unwrap();
    assert_eq!(before, after);
}
