//! Subprocess tests for the command-line binary: exit codes, stage
//! plumbing, and byte-level reproducibility of artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eeg2text-cn"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = exe().args(args).output().expect("binary spawns");
    assert!(
        out.status.success(),
        "`{}` failed with {:?}\nstdout: {}\nstderr: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every file under `dir`, as (relative name, bytes), sorted by name.
fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

/// A config that keeps every path inside `root` and the model desk-sized.
fn write_config(root: &Path) -> std::path::PathBuf {
    let toml = format!(
        r#"
[paths]
corpus_dir = "{corpus}"
prepared_dir = "{prepared}"

[synth]
n_sentences = 8
seed = 7

[prepare]
k_components = 4

[prepare.split]
train_subjects = ["sub-01"]
test_subjects = []
val_fraction = 0.25
seed = 7

[model]
d_model = 16
conv_out_channels = 8
conv_kernel = 3
n_encoder_layers = 1
n_decoder_layers = 1
n_heads = 2
ffn_dim = 32
segment_components = 4

[train]
epochs = 5
batch_size = 4
learning_rate = 0.001
checkpoint_dir = "{run}"

[eval]
checkpoint = "last"
split = "val"
"#,
        corpus = root.join("corpus").display(),
        prepared = root.join("prepared").display(),
        run = root.join("run").display(),
    );
    let path = root.join("exp.toml");
    fs::write(&path, toml).unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_defaults_to_twenty_entries() {
    let dir = TempDir::new().unwrap();
    let out1 = dir.path().join("c1");
    let out2 = dir.path().join("c2");

    // Default config: 20 sentences.
    let out = run_ok(&["synth", "--out", out1.to_str().unwrap()]);
    assert!(
        stdout_of(&out).contains("wrote 20 entries"),
        "stdout: {}",
        stdout_of(&out)
    );
    let manifest = fs::read_to_string(out1.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 20);

    // Spelling the defaults out reproduces the directory byte for byte.
    run_ok(&[
        "synth",
        "--seed",
        "7",
        "--n",
        "20",
        "--out",
        out2.to_str().unwrap(),
    ]);
    let snap1 = dir_snapshot(&out1);
    let snap2 = dir_snapshot(&out2);
    assert!(!snap1.is_empty());
    assert_eq!(
        snap1.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        snap2.iter().map(|(n, _)| n).collect::<Vec<_>>()
    );
    for ((name, a), (_, b)) in snap1.iter().zip(&snap2) {
        assert_eq!(a, b, "{name} differs between identical synth runs");
    }
}

#[test]
fn stage_chain_trains_evaluates_and_scores() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    run_ok(&["synth", "--config", cfg]);
    run_ok(&["prepare", "--config", cfg]);

    // Missing checkpoint: evaluate before any training run exits 1.
    let out = exe()
        .args(["evaluate", "--config", cfg])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    // --epochs overrides the config's 5; the history must have 2 records.
    let out = run_ok(&[
        "train",
        "--config",
        cfg,
        "--epochs",
        "2",
        "--deterministic",
    ]);
    assert!(
        stdout_of(&out).contains("trained 2 epochs"),
        "stdout: {}",
        stdout_of(&out)
    );
    let history = fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    // A second deterministic run reproduces the history bytes exactly.
    let rerun = dir.path().join("rerun");
    run_ok(&[
        "train",
        "--config",
        cfg,
        "--epochs",
        "2",
        "--deterministic",
        "--out",
        rerun.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(dir.path().join("run/history.jsonl")).unwrap(),
        fs::read(rerun.join("history.jsonl")).unwrap(),
        "deterministic reruns must write identical histories"
    );

    // Evaluate the held-out val split: report.json's n is the split size.
    let out = run_ok(&["evaluate", "--config", cfg, "--deterministic"]);
    assert!(stdout_of(&out).contains("mean over 2 sentences"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/eval/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["n"], 2);

    // Re-score the written predictions with the standalone scorer.
    let pred = dir.path().join("run/eval/predictions.jsonl");
    let rescored = dir.path().join("rescored");
    let out = run_ok(&[
        "bleu",
        "--pred",
        pred.to_str().unwrap(),
        "--out",
        rescored.to_str().unwrap(),
    ]);
    assert!(stdout_of(&out).contains("mean over 2 sentences"));
    let again: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rescored.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean"], again["mean"]);
}

#[test]
fn bleu_scores_a_known_fixture_file() {
    let dir = TempDir::new().unwrap();
    let pred = dir.path().join("predictions.jsonl");
    fs::write(
        &pred,
        concat!(
            r#"{"id":"a","gt":"同的习性，在严寒的冬天","pred":"的的的的的的的的的的"}"#,
            "\n",
            r#"{"id":"b","gt":"集合成群，平时单身独处。","pred":"的的的的的的的的的的"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = run_ok(&["bleu", "--pred", pred.to_str().unwrap()]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    // Sentence scores 0.1810 and 0.0000 average to 0.0905.
    assert_eq!(report["n"], 2);
    assert_eq!(report["mean"][0], 0.0905);
    assert!(stdout_of(&out).contains("BLEU-1 0.0905"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = exe().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown subcommand");
    assert!(!out.stderr.is_empty());

    let out = exe().args(["synth", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown flag");

    let out = exe()
        .args(["synth", "--set", "not_a_key_value"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "malformed --set");
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = exe().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));

    let out = exe()
        .args(["synth", "--config", "/no/such/config.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "missing config file");
}
