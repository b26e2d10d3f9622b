//! End-to-end checks of the `demotune` binary: artifacts on disk, exit
//! codes, and flag/run-spec/env precedence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use demotune_core::checkpoint::Checkpoint;
use demotune_core::data::Dataset;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_demotune"));
    cmd.env_remove("DEMOTUNE_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn gen_data(dir: &Path, per_class: usize) -> PathBuf {
    let out = dir.join("data.jsonl");
    let o = run(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--per-class",
        &per_class.to_string(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn task_config() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic_sentiment.toml")
}

/// Flags that keep a training run under a second.
fn tiny_flags(data: &Path, out: &Path) -> Vec<String> {
    [
        "--task-config",
        task_config(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "2",
        "--max-steps",
        "3",
        "--eval-every",
        "3",
        "--batch-size",
        "2",
        "--lr",
        "0.003",
        "--dim",
        "16",
        "--num-heads",
        "2",
        "--num-layers",
        "1",
        "--ff-dim",
        "24",
        "--max-len",
        "48",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn gen_data_writes_loadable_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen_data(dir.path(), 6);
    let labels = vec!["negative".to_string(), "positive".to_string()];
    let ds = Dataset::load_jsonl(&path, &labels).unwrap();
    assert_eq!(ds.len(), 12);
}

#[test]
fn sample_splits_is_idempotent_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("splits");
    let args = [
        "sample-splits",
        "--task-config",
        task_config(),
        "--dataset",
        data.to_str().unwrap(),
        "--k",
        "2",
        "--seeds",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("split-seed"))
        .collect();
    manifests.sort();
    assert_eq!(manifests.len(), 5);
    let before: Vec<String> = manifests
        .iter()
        .map(|p| std::fs::read_to_string(p).unwrap())
        .collect();

    let index = std::fs::read_to_string(out.join("splits-index.json")).unwrap();
    let index: serde_json::Value = serde_json::from_str(&index).unwrap();
    assert_eq!(index["config_hash"].as_str().unwrap().len(), 64);

    // Rerun with identical flags: byte-identical manifests.
    let o = run(&args);
    assert!(o.status.success());
    for (path, old) in manifests.iter().zip(&before) {
        assert_eq!(&std::fs::read_to_string(path).unwrap(), old);
    }
}

#[test]
fn k_zero_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 4);
    let o = run(&[
        "sample-splits",
        "--task-config",
        task_config(),
        "--dataset",
        data.to_str().unwrap(),
        "--k",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn insufficient_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 3);
    let o = run(&[
        "sample-splits",
        "--task-config",
        task_config(),
        "--dataset",
        data.to_str().unwrap(),
        "--k",
        "4",
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("required"), "stderr: {err}");
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 10);
    let out = dir.path().join("run");
    let mut args = vec![
        "train".to_string(),
        "--method".into(),
        "demo_tuning".into(),
        "--cl-mode".into(),
        "no_negatives".into(),
        "--seed-list".into(),
        "13,21".into(),
    ];
    args.extend(tiny_flags(&data, &out));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean"), "stdout: {stdout}");

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["method"], "demo_tuning");
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["config_hash"].as_str().unwrap().len(), 64);

    let ckpt = Checkpoint::load(&out.join("checkpoint-seed13.json")).unwrap();
    assert_eq!(ckpt.seed, 13);
    assert_eq!(ckpt.method, "demo_tuning");
    assert!(ckpt.params.contains("vdemo.0"));
}

#[test]
fn cl_mode_off_arm_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let mut args = vec![
        "train".to_string(),
        "--method".into(),
        "demo_tuning".into(),
        "--cl-mode".into(),
        "off".into(),
        "--seed-list".into(),
        "42".into(),
    ];
    args.extend(tiny_flags(&data, &out));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let mut args = vec!["train".to_string(), "--method".into(), "banana".into()];
    args.extend(tiny_flags(&data, &out));
    let o = bin().args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_seed_sets_single_seed_suite() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let mut args = vec![
        "train".to_string(),
        "--method".into(),
        "prompt_manual".into(),
    ];
    args.extend(tiny_flags(&data, &out));
    let o = bin().env("DEMOTUNE_SEED", "7").args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let runs = metrics["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0]["seed"], 7);
}

#[test]
fn run_spec_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(
        &spec_path,
        format!(
            concat!(
                "task_config = {:?}\n",
                "dataset = {:?}\n",
                "out = {:?}\n",
                "method = \"prompt_manual\"\n",
                "k = 2\n",
                "seeds = [13]\n",
                "max_steps = 2\n",
                "eval_every = 2\n",
                "batch_size = 2\n",
                "lr = 0.001\n",
                "dim = 16\n",
                "num_heads = 2\n",
                "num_layers = 1\n",
                "ff_dim = 24\n",
                "max_len = 48\n",
            ),
            task_config(),
            data.to_str().unwrap(),
            out.to_str().unwrap(),
        ),
    )
    .unwrap();
    // --method on the command line overrides the run-spec file's value.
    let o = run(&[
        "train",
        "--run-spec",
        spec_path.to_str().unwrap(),
        "--method",
        "finetune",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["method"], "finetune");
    assert_eq!(metrics["runs"].as_array().unwrap()[0]["seed"], 13);
}

#[test]
fn ablate_negatives_axis_emits_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let mut args = vec![
        "ablate".to_string(),
        "--axis".into(),
        "neg_vs_noneg".into(),
        "--seed-list".into(),
        "42".into(),
    ];
    args.extend(tiny_flags(&data, &out));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("ablation-neg_vs_noneg.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["axis"], "neg_vs_noneg");
    assert_eq!(report["variants"].as_array().unwrap().len(), 2);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("with_negatives"));
    assert!(stdout.contains("without_negatives"));
}

#[test]
fn ablate_empty_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 8);
    let out = dir.path().join("run");
    let mut args = vec![
        "ablate".to_string(),
        "--axis".into(),
        "length_n".into(),
        "--grid".into(),
        "".into(),
    ];
    args.extend(tiny_flags(&data, &out));
    let o = bin().args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
