//! End-to-end checks of the command-line surface: the synth/train/eval
//! round trip and the documented exit-code contract.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcdl"))
}

#[test]
fn round_trip_reports_a_metrics_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    let synth = bin()
        .args([
            "synth",
            "--samples",
            "150",
            "--prototypes",
            "8",
            "--feature-dim",
            "20",
            "--label-count",
            "6",
            "--seed",
            "11",
            "--out",
            d,
        ])
        .output()
        .unwrap();
    assert!(
        synth.status.success(),
        "synth failed: {}",
        String::from_utf8_lossy(&synth.stderr)
    );

    let train = bin()
        .args([
            "train",
            "--features",
            &format!("{d}/features.mat"),
            "--labels",
            &format!("{d}/labels.mat"),
            "--model-dir",
            &format!("{d}/model"),
            "--prototypes",
            "10",
            "--rounds",
            "5",
        ])
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );

    let eval = bin()
        .args([
            "eval",
            "--model-dir",
            &format!("{d}/model"),
            "--features",
            &format!("{d}/features.mat"),
            "--labels",
            &format!("{d}/labels.mat"),
        ])
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let table = String::from_utf8(eval.stdout).unwrap();
    for row in ["P ", "R ", "F1 "] {
        assert!(
            table.lines().any(|l| l.starts_with(row)),
            "metrics table missing {row:?} row:\n{table}"
        );
    }

    let inspect = bin()
        .args(["inspect", "--model-dir", &format!("{d}/model")])
        .output()
        .unwrap();
    assert!(inspect.status.success());
    assert!(String::from_utf8(inspect.stdout).unwrap().contains("prototypes"));
}

#[test]
fn train_with_missing_features_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let missing = format!("{d}/no_such_features.mat");
    let out = bin()
        .args([
            "train",
            "--features",
            &missing,
            "--labels",
            &format!("{d}/labels.mat"),
            "--model-dir",
            &format!("{d}/model"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no_such_features.mat"),
        "stderr does not name the missing file: {stderr}"
    );
}

#[test]
fn help_prints_usage_and_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["synth", "train", "annotate", "eval", "bench", "inspect"] {
        assert!(text.contains(sub), "help text missing subcommand {sub}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["train", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("--frobnicate") || stderr.to_lowercase().contains("usage"),
        "no usage feedback: {stderr}"
    );
}
