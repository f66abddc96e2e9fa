//! End-to-end checks of the command line: exit codes, file outputs, and
//! run-to-run determinism, all through the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn milpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milpool"))
        .args(args)
        .env("MILPOOL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

const TINY: &[&str] = &[
    "--set",
    "num_classes=3",
    "--set",
    "frames_per_clip=40",
    "--set",
    "feature_dim=8",
    "--set",
    "strong_clips=4",
    "--set",
    "weak_clips=2",
    "--set",
    "unlabeled_clips=3",
    "--set",
    "validation_clips=2",
    "--set",
    "hidden_dims=8",
    "--set",
    "class_epochs=2",
    "--set",
    "conf_epochs=1",
    "--set",
    "stage2_epochs=2",
    "--set",
    "ema_decay=0.9",
];

fn gen_tiny(dir: &Path, seed: &str) -> Output {
    let data = dir.join("data");
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(TINY);
    milpool(&args)
}

#[test]
fn help_and_version_exit_zero() {
    assert_code(&milpool(&["--help"]), 0);
    assert_code(&milpool(&["--version"]), 0);
    assert_code(&milpool(&["gen-data", "--help"]), 0);
}

#[test]
fn bad_usage_exits_one() {
    // Unknown subcommand and missing required flag are both usage errors.
    assert_code(&milpool(&["frobnicate"]), 1);
    assert_code(&milpool(&["gen-data"]), 1);
    assert_code(&milpool(&["report", "--out", "/tmp/x"]), 1);
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = milpool(&["gen-data", "--out", dir.path().join("d").to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn bad_override_pair_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = milpool(&[
        "gen-data",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--seed",
        "1",
        "--set",
        "oops",
    ]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("key=value"));
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = milpool(&[
        "gen-data",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--seed",
        "1",
        "--set",
        "no_such_key=3",
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("no_such_key"));
}

#[test]
fn gen_data_is_deterministic_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen_tiny(dir.path(), "7");
    assert_code(&out, 0);
    let first = stdout(&out);
    assert!(first.contains("sha256"));

    // Same invocation refuses to clobber without --force.
    let again = gen_tiny(dir.path(), "7");
    assert_code(&again, 2);
    assert!(stderr(&again).contains("--force"));

    // A second directory with the same seed gets identical bytes.
    let dir2 = tempfile::tempdir().unwrap();
    let out2 = gen_tiny(dir2.path(), "7");
    assert_code(&out2, 0);
    let a = std::fs::read(dir.path().join("data/features.bin")).unwrap();
    let b = std::fs::read(dir2.path().join("data/features.bin")).unwrap();
    assert_eq!(a, b);
    let ma = std::fs::read(dir.path().join("data/manifest.json")).unwrap();
    let mb = std::fs::read(dir2.path().join("data/manifest.json")).unwrap();
    assert_eq!(ma, mb);

    // Different seed, different content.
    let dir3 = tempfile::tempdir().unwrap();
    assert_code(&gen_tiny(dir3.path(), "8"), 0);
    let c = std::fs::read(dir3.path().join("data/features.bin")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn train_evaluate_report_pipeline_works_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&gen_tiny(dir.path(), "11"), 0);
    let data = dir.path().join("data");
    let run1 = dir.path().join("run1");

    let mut args = vec![
        "train",
        "--config",
        "/dev/null",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run1.to_str().unwrap(),
        "--stage",
        "1",
        "--seed",
        "11",
        "--quiet",
    ];
    args.extend_from_slice(TINY);
    assert_code(&milpool(&args), 0);
    for name in [
        "student.ckpt",
        "teacher.ckpt",
        "losses.csv",
        "report.json",
        "config.txt",
    ] {
        assert!(run1.join(name).exists(), "{name} missing after stage 1");
    }

    // Stage 2 without the stage-one run directory is a usage error.
    let run2 = dir.path().join("run2");
    let mut args2 = vec![
        "train",
        "--config",
        "/dev/null",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--stage",
        "2",
        "--seed",
        "11",
        "--quiet",
    ];
    args2.extend_from_slice(TINY);
    assert_code(&milpool(&args2), 1);

    let mut args2b = args2.clone();
    args2b.extend_from_slice(&["--stage1-run", run1.to_str().unwrap()]);
    assert_code(&milpool(&args2b), 0);
    assert!(run2.join("teacher.ckpt").exists());

    let eval = milpool(&[
        "evaluate",
        "--run",
        run2.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--segment",
    ]);
    assert_code(&eval, 0);
    let table = stdout(&eval);
    assert!(table.contains("macro"));
    for name in [
        "scores_event.csv",
        "scores_segment.csv",
        "reliability.json",
        "reliability.csv",
        "eval_summary.json",
    ] {
        assert!(run2.join(name).exists(), "{name} missing after evaluate");
    }

    let cmp = dir.path().join("cmp");
    let report = milpool(&[
        "report",
        "--out",
        cmp.to_str().unwrap(),
        run1.to_str().unwrap(),
        run2.to_str().unwrap(),
    ]);
    assert_code(&report, 0);
    assert!(cmp.join("er_comparison.csv").exists());
    assert!(cmp.join("n_trajectory.csv").exists());

    // Scoring an unknown split name fails as usage.
    let bad_split = milpool(&[
        "evaluate",
        "--run",
        run2.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_code(&bad_split, 1);

    // A missing checkpoint is a data error.
    let missing = milpool(&[
        "evaluate",
        "--ckpt",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&missing, 2);
}

#[test]
fn check_subcommand_reports_ok() {
    let out = milpool(&["check"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("all checks passed"));
    assert!(text.matches("... ok").count() >= 5);
}
