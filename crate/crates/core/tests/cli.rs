//! Drives the `onevl` binary end to end on the smoke preset.

use std::path::Path;
use std::process::{Command, Output};

fn onevl(run_dir: &Path, args: &[&str]) -> Output {
    let preset: &[&str] = if args.contains(&"--preset") { &[] } else { &["--preset", "smoke"] };
    Command::new(env!("CARGO_BIN_EXE_onevl"))
        .args(preset)
        .args(args)
        .env("ONEVL_RUN_DIR", run_dir)
        .output()
        .expect("binary runs")
}

fn ok(run_dir: &Path, args: &[&str]) -> String {
    let out = onevl(run_dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Failing commands print exactly one `error:` line.
fn err(run_dir: &Path, args: &[&str]) -> String {
    let out = onevl(run_dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "), "{stderr}");
    stderr
}

#[test]
fn smoke_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");

    let e = err(&run, &["train-vq"]);
    assert!(e.contains("build-data"), "{e}");

    ok(&run, &["build-data"]);
    let e = err(&run, &["train", "--stages", "smoke"]);
    assert!(e.contains("train-vq"), "{e}");
    ok(&run, &["train-vq"]);
    assert!(run.join("vq/codebook.ckpt").is_file());
    assert!(run.join("vq/vocab.json").is_file());

    let log = ok(&run, &["train", "--stages", "smoke"]);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap_or_else(|e| panic!("log line {line:?}: {e}"));
    }
    let report = run.join("train/onevl/report.jsonl");
    assert!(report.is_file());
    assert!(run.join("train/onevl/stage2.ckpt").is_file());

    let log = ok(&run, &["explain", "--samples", "0,1"]);
    assert!(log.contains("\"event\":\"explain\""));
    for i in 0..2 {
        let d = run.join(format!("explain/onevl/test-{i}"));
        let mut names: Vec<String> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["cot.txt", "future_0.ppm", "future_1.ppm"]);
        let ppm = std::fs::read(d.join("future_0.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n"));
    }

    ok(&run, &["ablate", "no_staging"]);
    let stages: Vec<_> = std::fs::read_dir(run.join("train/no_staging")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).filter(|n| n.ends_with(".ckpt")).collect();
    assert_eq!(stages, ["joint.ckpt"]);

    let summary = ok(&run, &["eval", "--no-latency"]);
    assert!(summary.contains("latent_prefill"), "{summary}");
    for f in ["summary.txt", "metrics.csv"] {
        assert!(run.join("report").join(f).is_file(), "{f}");
    }

    // A different config must not silently reuse these checkpoints.
    let e = err(&run, &["--set", "train.lambda_v=0.5", "eval", "--no-latency"]);
    assert!(e.contains("--allow-config-mismatch"), "{e}");
    ok(&run, &["--set", "train.lambda_v=0.5", "eval", "--no-latency", "--no-fidelity", "--allow-config-mismatch"]);
}

#[test]
fn smoke_training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let reports: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let run = tmp.path().join(name);
            for cmd in [&["build-data"][..], &["train-vq"], &["train", "--stages", "smoke"]] {
                ok(&run, cmd);
            }
            std::fs::read_to_string(run.join("train/onevl/report.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn bad_invocations_fail_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let e = err(&run, &["--set", "train.lamda_l=2", "config"]);
    assert!(e.contains("lamda_l"), "{e}");
    let e = err(&run, &["--preset", "huge", "config"]);
    assert!(e.contains("huge"), "{e}");
    err(&run, &["--set", "nokey", "config"]);
    let e = err(&run, &["eval"]);
    assert!(e.contains("build-data") || e.contains("train"), "{e}");

    let fresh = tmp.path().join("fresh");
    let out = ok(&fresh, &["config"]);
    assert!(out.starts_with("# config hash "));
    assert!(!fresh.exists(), "config must not create the run directory");
}
