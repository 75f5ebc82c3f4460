//! End-to-end tests of the varmt binary: exit codes, artifact layout, and
//! bit-level determinism of a full pipeline run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn varmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varmt")).args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

const PIPELINE_CONFIG: &str = r#"
seed = 11

[data]
scenario = "semi"
labeled_fraction = 0.5

[synth]
vocab_size = 24
n_pairs_a = 60
n_pairs_b = 60
divergence_rate = 0.3
min_sentence_len = 2
max_sentence_len = 5

[subword]
vocab_size = 96

[classifier]
hash_buckets = 4096
epochs = 3

[recipe]
recipe = "mc2"

[nmt]
num_layers = 1
model_dim = 16
num_heads = 2
ffn_dim = 32

[train]
total_steps = 30
checkpoint_every = 15
batch_tokens = 256
warmup_steps = 20

[decode]
beam_size = 2
max_len = 12
"#;

#[test]
fn pipeline_runs_end_to_end_and_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(&config, PIPELINE_CONFIG).unwrap();
    let run = |dir: &Path| {
        let out = varmt(&[
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    };
    let dir1 = tmp.path().join("run1");
    let dir2 = tmp.path().join("run2");
    run(&dir1);
    run(&dir2);

    for stage in ["01-data", "02-classifier", "03-dataset", "04-model", "05-eval"] {
        let dir = dir1.join(stage);
        assert!(dir.join("config.resolved.toml").is_file(), "{stage} lacks a resolved config");
        assert!(dir.join("manifest.toml").is_file(), "{stage} lacks a manifest");
    }
    assert!(dir1.join("04-model").join("best.ckpt").is_file());

    let metrics1 = fs::read(dir1.join("05-eval").join("metrics.tsv")).unwrap();
    let metrics2 = fs::read(dir2.join("05-eval").join("metrics.tsv")).unwrap();
    assert!(!metrics1.is_empty());
    assert_eq!(metrics1, metrics2, "reruns must give byte-identical metrics");
    let best1 = fs::read(dir1.join("04-model").join("best.ckpt")).unwrap();
    let best2 = fs::read(dir2.join("04-model").join("best.ckpt")).unwrap();
    assert_eq!(best1, best2, "reruns must give byte-identical checkpoints");

    let text = String::from_utf8(metrics1).unwrap();
    assert!(text.contains("\ttest_a\tbleu\t"));
    assert!(text.contains("\ttest_b\tbleu\t"));
    // Table consistency may be undefined on a barely trained model, but the
    // ensemble judgment always applies.
    assert!(text.contains("\tconsistency_ensemble\t"));

    // The trained artifacts feed the standalone commands.
    let input = tmp.path().join("input.txt");
    fs::write(&input, "one two three\nfour five\n").unwrap();
    let trans_dir = tmp.path().join("trans");
    let out = varmt(&[
        "translate",
        "--config",
        config.to_str().unwrap(),
        "--model",
        dir1.join("04-model").join("best.ckpt").to_str().unwrap(),
        "--subword",
        dir1.join("01-data").join("subword.model").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--variety",
        "a",
        "--out-dir",
        trans_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let translated = fs::read_to_string(trans_dir.join("translations.txt")).unwrap();
    assert_eq!(translated.lines().count(), 2);

    let label_dir = tmp.path().join("labels");
    let out = varmt(&[
        "label",
        "--config",
        config.to_str().unwrap(),
        "--data",
        dir1.join("01-data").join("dataset").to_str().unwrap(),
        "--classifier",
        dir1.join("02-classifier").join("ensemble.bin").to_str().unwrap(),
        "--mode",
        "mc3",
        "--out-dir",
        label_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("abstained_fraction"));
    let labels = fs::read_to_string(label_dir.join("labels.tsv")).unwrap();
    assert!(labels.lines().count() > 0);
    assert!(labels.lines().all(|l| {
        let tag = l.rsplit('\t').next().unwrap();
        tag == "A" || tag == "B" || tag == "U"
    }));
}

#[test]
fn prepare_ingests_files_and_partitions() {
    let tmp = tempfile::tempdir().unwrap();
    let write_pairs = |name: &str, start: usize, n: usize| {
        let src: String = (start..start + n).map(|i| format!("s{i} w{i}\n")).collect();
        let tgt: String = (start..start + n).map(|i| format!("t{i} v{i}\n")).collect();
        fs::write(tmp.path().join(format!("{name}.src")), src).unwrap();
        fs::write(tmp.path().join(format!("{name}.tgt")), tgt).unwrap();
    };
    write_pairs("train_a", 0, 8);
    write_pairs("train_b", 100, 8);
    write_pairs("dev_a", 200, 2);
    write_pairs("dev_b", 300, 2);
    write_pairs("test_a", 400, 2);
    write_pairs("test_b", 500, 2);
    let config = tmp.path().join("run.toml");
    let file_keys: String = ["train_a", "train_b", "dev_a", "dev_b", "test_a", "test_b"]
        .iter()
        .map(|n| format!("{n}_source = \"{n}.src\"\n{n}_target = \"{n}.tgt\"\n"))
        .collect();
    fs::write(&config, format!("[data.files]\n{file_keys}")).unwrap();
    let out_dir = tmp.path().join("out");
    let out = varmt(&[
        "prepare",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let dataset = out_dir.join("dataset");
    for part in ["labeled_a", "labeled_b", "dev_a", "test_b"] {
        assert!(dataset.join(format!("{part}.src")).is_file(), "missing {part}");
    }
    assert!(out_dir.join("subword.model").is_file());
    let manifest = fs::read_to_string(out_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("train_a_source"));
    assert!(!manifest.contains("timestamp"));
}

#[test]
fn significance_reports_identical_systems_as_insignificant() {
    let tmp = tempfile::tempdir().unwrap();
    let hyp = tmp.path().join("x.txt");
    fs::write(&hyp, "a b c\nd e f g\nh i\n").unwrap();
    let refs = tmp.path().join("refs.txt");
    fs::write(&refs, "a b c\nd e f q\nh j\n").unwrap();
    let out_dir = tmp.path().join("sig");
    let out = varmt(&[
        "significance",
        "--system-x",
        hyp.to_str().unwrap(),
        "--system-y",
        hyp.to_str().unwrap(),
        "--refs",
        refs.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("significant=false"), "identical systems can never be significant");
    let report = fs::read_to_string(out_dir.join("significance.txt")).unwrap();
    assert_eq!(stdout, report);
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_code(&varmt(&["--definitely-not-a-flag"]), 1);
    assert_code(&varmt(&["train-classifier"]), 1);
    assert_code(&varmt(&["--help"]), 0);
    assert_code(&varmt(&["--version"]), 0);

    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = tmp.path().join("run.toml");
    // A pipeline with neither [synth] nor [data.files] has no data source.
    fs::write(&config, "seed = 1\n").unwrap();
    let out = varmt(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    // Unknown configuration keys are rejected.
    fs::write(&config, "bogus = 1\n").unwrap();
    let out = varmt(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    // A stage that writes artifacts refuses to run without --out-dir.
    let out = varmt(&["synth"]);
    assert_code(&out, 2);
}

#[test]
fn diverged_training_exits_with_the_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    // An absurd learning rate drives the loss non-finite within a few steps.
    fs::write(
        &config,
        r#"
seed = 3

[synth]
vocab_size = 16
n_pairs_a = 50
n_pairs_b = 50
divergence_rate = 0.2
min_sentence_len = 2
max_sentence_len = 4

[subword]
vocab_size = 80

[nmt]
num_layers = 1
model_dim = 16
num_heads = 2
ffn_dim = 32

[train]
total_steps = 10
checkpoint_every = 5
batch_tokens = 256
warmup_steps = 1
peak_lr_factor = 1e300
"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = varmt(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    // The last finite checkpoint and the loss log survive the failure.
    let model_dir = out_dir.join("04-model");
    assert!(model_dir.join("train_log.tsv").is_file());
    let checkpoints = fs::read_dir(&model_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().starts_with("checkpoint-")
        })
        .count();
    assert!(checkpoints >= 1);
}
