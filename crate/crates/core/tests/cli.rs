//! End-to-end checks of the `decount` binary: dataset generation, the two
//! training stages, evaluation and the exit code contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_decount"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary ran")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_MODEL: &[&str] = &[
    "counter.backbone=tiny_cnn",
    "counter.input_channels=1",
    "counter.gmp_heads=2",
    "localizer.image_channels=1",
    "localizer.depth=2",
    "localizer.base_width=4",
    "optim.epochs=1",
    "optim.batch_size=4",
];

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = run(
        &["synth", "--out", "ds", "--num-images", "8", "--size", "64", "--count-mean", "5",
          "--count-std", "2", "--seed", "3"],
        root,
    );
    assert_success(&out);
    assert!(root.join("ds/manifest.json").exists());

    let mut args = vec!["train-counter", "--data", "ds", "--out", "runs"];
    args.extend_from_slice(TINY_MODEL);
    assert_success(&run(&args, root));
    let counter_run = std::fs::read_dir(root.join("runs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert!(counter_run.join("counter.safetensors").exists());
    assert!(counter_run.join("manifest.json").exists());

    let counter_arg = counter_run.to_str().unwrap();
    let mut args = vec!["train-localizer", "--data", "ds", "--counter", counter_arg, "--out", "runs2"];
    args.extend_from_slice(TINY_MODEL);
    assert_success(&run(&args, root));
    let localizer_run = std::fs::read_dir(root.join("runs2"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert!(localizer_run.join("localizer.safetensors").exists());

    let out = run(
        &["eval", "--data", "ds", "--counter", counter_arg, "--localizer",
          localizer_run.to_str().unwrap(), "--split", "test", "--out", "evalout"],
        root,
    );
    assert_success(&out);
    assert!(root.join("evalout/eval.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("MAE"), "{stdout}");

    let out = run(
        &["viz", "--data", "ds", "--counter", counter_arg, "--localizer",
          localizer_run.to_str().unwrap(), "--out", "vizout", "--limit", "1"],
        root,
    );
    assert_success(&out);
    assert_eq!(std::fs::read_dir(root.join("vizout")).unwrap().count(), 1);
}

#[test]
fn prep_tiles_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_success(&run(
        &["synth", "--out", "ds", "--num-images", "2", "--size", "60", "--count-mean", "3",
          "--count-std", "1", "--seed", "1"],
        root,
    ));
    assert_success(&run(&["prep", "--data", "ds", "--out", "tiles", "--tile", "32"], root));
    // 60 -> pad to 60, nearest multiple of 32 is 64 -> 2x2 tiles per image
    let count = std::fs::read_dir(root.join("tiles/images")).unwrap().count();
    assert_eq!(count, 8);
}

#[test]
fn usage_error_exits_2() {
    let out = bin().arg("no-such-subcommand").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_error_exits_3_with_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["train-counter", "--data", "ds", "--out", "runs", "optim.lr_min=5.0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[config]"), "{stderr}");
}

#[test]
fn runtime_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // an empty dataset root loads as zero samples; training cannot start
    let out = run(&["train-counter", "--data", "empty", "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error["), "{stderr}");
}
