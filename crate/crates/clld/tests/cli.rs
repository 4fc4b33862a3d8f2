//! End-to-end checks of the `clld` binary: artifact layout, exit codes,
//! checkpoint/eval consistency, heatmap export, and the oracle self-check.

use std::path::Path;
use std::process::{Command, Output};

fn clld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clld"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_corpus_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    // Two cleanly separated classes, split by hand.
    let doc = |class: usize, i: usize| {
        let words: Vec<String> = (0..6)
            .map(|k| format!("c{class}tok{}", (i * 7 + k * 3) % 20))
            .collect();
        format!("label{class}\t{}\n", words.join(" "))
    };
    let mut train = String::new();
    let mut val = String::new();
    let mut test = String::new();
    train.push_str("# comment line\n");
    for class in 0..2 {
        for i in 0..40 {
            train.push_str(&doc(class, i));
        }
        for i in 40..50 {
            val.push_str(&doc(class, i));
        }
        for i in 50..60 {
            test.push_str(&doc(class, i));
        }
    }
    let paths = (
        dir.join("train.tsv"),
        dir.join("val.tsv"),
        dir.join("test.tsv"),
    );
    std::fs::write(&paths.0, train).unwrap();
    std::fs::write(&paths.1, val).unwrap();
    std::fs::write(&paths.2, test).unwrap();
    paths
}

fn small_train_config(dir: &Path, train: &Path, val: &Path, test: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "data": {"train_file": train, "val_file": val, "test_file": test},
        "train": {
            "mode": "ct_cl",
            "seed": 3,
            "batch_size": 8,
            "num_epoch": 8,
            "learning_rate": 3e-3,
            "feature_dim": 128,
            "hidden_dim": 32,
            "encode_dim": 16,
            "project_dim": 8,
            "ngram_max": 1
        },
        "output_dir": dir.join("run")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn train_missing_config_exits_2() {
    let out = clld(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config not found"), "stderr: {stderr}");
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"data": {"synthetic": {"classes": 2, "per_class": 8, "overlap": 0.0}}, "typo_key": 1}"#,
    )
    .unwrap();
    let out = clld(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());
    let config = small_train_config(dir.path(), &train, &val, &test);

    let out = clld(&["train", "--config", config.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = dir.path().join("run");
    for artifact in [
        "checkpoint.json",
        "history.jsonl",
        "report.json",
        "ldm.csv",
        "ldm.meta.json",
        "labels.json",
    ] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }

    // History is one JSON record per epoch with the documented keys.
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 8);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in [
        "epoch",
        "train_loss",
        "l_c",
        "l_s",
        "val_accuracy",
        "ldm_updated",
    ] {
        assert!(first.get(key).is_some(), "history missing {key}");
    }

    // Evaluating the checkpoint on its own test split reproduces report.json.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let eval_out = clld(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
    ]);
    assert!(eval_out.status.success());
    let eval_report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&eval_out.stdout)).unwrap();
    assert_eq!(report["accuracy"], eval_report["accuracy"]);
    assert_eq!(report["confusion"], eval_report["confusion"]);

    // Label export is the names in index order.
    let labels: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(run.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels, vec!["label0", "label1"]);
}

#[test]
fn eval_label_space_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());
    let config = small_train_config(dir.path(), &train, &val, &test);
    assert!(clld(&["train", "--config", config.to_str().unwrap()])
        .status
        .success());

    let alien = dir.path().join("alien.tsv");
    std::fs::write(
        &alien,
        "label0\tok text\nlabel1\tok text\nlabel2\tnew class\n",
    )
    .unwrap();
    let out = clld(&[
        "eval",
        "--checkpoint",
        dir.path().join("run/checkpoint.json").to_str().unwrap(),
        "--data",
        alien.to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("checkpoint has 2") && stderr.contains("data has 3"),
        "stderr: {stderr}"
    );
}

#[test]
fn eval_empty_data_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());
    let config = small_train_config(dir.path(), &train, &val, &test);
    assert!(clld(&["train", "--config", config.to_str().unwrap()])
        .status
        .success());

    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let out = clld(&[
        "eval",
        "--checkpoint",
        dir.path().join("run/checkpoint.json").to_str().unwrap(),
        "--data",
        empty.to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty corpus"));
}

#[test]
fn resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());

    let make_config = |out_dir: &str, epochs: usize| {
        let config = serde_json::json!({
            "data": {"train_file": train, "val_file": val, "test_file": test},
            "train": {
                "mode": "ct_cl", "seed": 3, "batch_size": 8, "num_epoch": epochs,
                "learning_rate": 3e-3, "feature_dim": 128, "hidden_dim": 32,
                "encode_dim": 16, "project_dim": 8, "ngram_max": 1
            },
            "output_dir": dir.path().join(out_dir)
        });
        let path = dir.path().join(format!("{out_dir}.json"));
        std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
        path
    };

    let full = make_config("full", 8);
    assert!(clld(&["train", "--config", full.to_str().unwrap()])
        .status
        .success());

    let half = make_config("half", 4);
    assert!(clld(&["train", "--config", half.to_str().unwrap()])
        .status
        .success());
    let resumed = make_config("resumed", 8);
    let out = clld(&[
        "train",
        "--config",
        resumed.to_str().unwrap(),
        "--resume",
        dir.path().join("half/checkpoint.json").to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(
        read("full/report.json"),
        read("resumed/report.json"),
        "resumed run must reproduce the straight run"
    );
    assert_eq!(read("full/history.jsonl"), read("resumed/history.jsonl"));
    assert_eq!(read("full/ldm.csv"), read("resumed/ldm.csv"));
}

fn parse_pgm(content: &str) -> (usize, usize, Vec<u32>) {
    let mut tokens = content.split_ascii_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    let w: usize = tokens.next().unwrap().parse().unwrap();
    let h: usize = tokens.next().unwrap().parse().unwrap();
    let maxval: u32 = tokens.next().unwrap().parse().unwrap();
    assert_eq!(maxval, 255);
    let pixels: Vec<u32> = tokens.map(|t| t.parse().unwrap()).collect();
    assert_eq!(pixels.len(), w * h);
    (w, h, pixels)
}

#[test]
fn export_ldm_identity_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("identity.csv");
    std::fs::write(&csv, "1,1,1\n1,1,1\n1,1,1\n").unwrap();
    let out_path = dir.path().join("identity.pgm");
    let out = clld(&[
        "export-ldm",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
        "--tau",
        "5",
    ]);
    assert!(out.status.success());
    let (w, h, pixels) = parse_pgm(&std::fs::read_to_string(&out_path).unwrap());
    assert_eq!((w, h), (3, 3));
    assert!(
        pixels.iter().all(|&p| p == 255),
        "identity must render uniform"
    );
    // The CSV is re-emitted next to the image.
    assert!(dir.path().join("identity.csv").exists());
}

#[test]
fn export_ldm_static_pair_darkest_and_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("static.csv");
    std::fs::write(&csv, "1,5,1\n5,1,1\n1,1,1\n").unwrap();
    let out_path = dir.path().join("static.pgm");
    assert!(clld(&[
        "export-ldm",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
        "--tau",
        "5",
    ])
    .status
    .success());
    let (w, _, pixels) = parse_pgm(&std::fs::read_to_string(&out_path).unwrap());
    let darkest: Vec<usize> = pixels
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == 0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(darkest, vec![1, w], "exactly the two pair pixels, mirrored");
    assert!(pixels.iter().filter(|&&p| p != 0).all(|&p| p == 255));
}

#[test]
fn export_ldm_rejects_non_square() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ragged.csv");
    std::fs::write(&csv, "1,2,3\n4,5,6\n").unwrap();
    let out = clld(&[
        "export-ldm",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        dir.path().join("out.pgm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("square"));
}

#[test]
fn export_ldm_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());
    let config = small_train_config(dir.path(), &train, &val, &test);
    assert!(clld(&["train", "--config", config.to_str().unwrap()])
        .status
        .success());
    let out_path = dir.path().join("from_ckpt.pgm");
    let out = clld(&[
        "export-ldm",
        "--input",
        dir.path().join("run/checkpoint.json").to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (w, h, _) = parse_pgm(&std::fs::read_to_string(&out_path).unwrap());
    assert_eq!((w, h), (2, 2));
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("from_ckpt.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["labels"][0], "label0");
}

#[test]
fn oracle_check_passes_and_lists_named_checks() {
    let out = clld(&["oracle-check"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let named = stdout.lines().filter(|l| l.starts_with("check ")).count();
    assert!(named >= 3, "expected >= 3 named checks:\n{stdout}");
    assert!(stdout.contains("max error"));
}

#[test]
fn oracle_check_detects_perturbed_gradient() {
    let out = clld(&["oracle-check", "--perturb-gradient", "0.05"]);
    assert_ne!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "stdout: {stdout}");
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = write_corpus_files(dir.path());
    for run in ["a", "b"] {
        let config = serde_json::json!({
            "data": {"train_file": train, "val_file": val, "test_file": test},
            "train": {
                "mode": "ct", "seed": 5, "batch_size": 8, "num_epoch": 4,
                "feature_dim": 128, "hidden_dim": 32, "encode_dim": 16,
                "project_dim": 8, "ngram_max": 1
            },
            "output_dir": dir.path().join(run)
        });
        let path = dir.path().join(format!("{run}.json"));
        std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
        assert!(clld(&["train", "--config", path.to_str().unwrap()])
            .status
            .success());
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/report.json"), read("b/report.json"));
    assert_eq!(read("a/checkpoint.json"), read("b/checkpoint.json"));
}
