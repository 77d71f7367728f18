//! End-to-end CLI checks: artifact round trips and exit-code classes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_red"))
}

fn write_blobs_csv(path: &Path, n_per_class: usize) {
    use std::io::Write;
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "f0,f1,label").unwrap();
    // deterministic pseudo-noise, overlapping classes
    let mut state = 0x2545F4914F6CDD1Du64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for label in 0..2 {
        for _ in 0..n_per_class {
            let cx = label as f64 * 1.5;
            writeln!(f, "{},{},{label}", cx + 2.0 * next(), cx + 2.0 * next()).unwrap();
        }
    }
}

#[test]
fn train_fit_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.csv");
    write_blobs_csv(&data, 60);
    let artifacts = dir.path().join("artifacts");

    let status = Command::new(bin())
        .args(["train-classifier", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&artifacts)
        .args(["--seed", "1", "--max-epochs", "200"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(artifacts.join("classifier.json").exists());
    assert!(artifacts.join("split.json").exists());

    let status = Command::new(bin())
        .args(["fit-red", "--data"])
        .arg(&data)
        .arg("--artifacts")
        .arg(&artifacts)
        .args(["--seed", "1", "--restarts", "4"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(artifacts.join("red_model.json").exists());
    assert!(artifacts.join("fit_report.json").exists());

    let scores = dir.path().join("scores.csv");
    let status = Command::new(bin())
        .args(["score", "--artifacts"])
        .arg(&artifacts)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&scores)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&scores).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,c_hat,mean,variance");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 4);
    let variance: f64 = first[3].parse().unwrap();
    assert!(variance >= 0.0);
}

#[test]
fn synth_subcommands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ood.csv");
    let status = Command::new(bin())
        .args(["synth", "ood", "--count", "7", "--dim", "3", "--seed", "5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 8); // header + 7 rows
    assert!(text.lines().next().unwrap().contains("kind"));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let status = Command::new(bin())
        .args([
            "train-classifier",
            "--data",
            "/nonexistent/never.csv",
            "--out",
            "/tmp/red-cli-test-nowhere",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn bad_mode_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.csv");
    write_blobs_csv(&data, 30);
    let artifacts = dir.path().join("artifacts");
    let status = Command::new(bin())
        .args(["train-classifier", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&artifacts)
        .args(["--max-epochs", "50"])
        .status()
        .unwrap();
    assert!(status.success());

    let status = Command::new(bin())
        .args(["fit-red", "--data"])
        .arg(&data)
        .arg("--artifacts")
        .arg(&artifacts)
        .args(["--mode", "approximate"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn benchmark_without_required_flags_is_a_config_error() {
    let status = Command::new(bin())
        .args(["benchmark", "--out", "/tmp/red-cli-test-bench"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn evaluate_then_report_files_exist() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.csv");
    write_blobs_csv(&data, 50);
    let out = dir.path().join("eval");
    let status = Command::new(bin())
        .args(["evaluate", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "2", "--detectors", "red,mcp,entropy", "--restarts", "4"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("run_metrics.csv").exists());
    assert!(out.join("run_record.json").exists());

    // tiny benchmark, then re-render from stored records
    let bench_out = dir.path().join("bench");
    let status = Command::new(bin())
        .args(["benchmark", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&bench_out)
        .args([
            "--seed",
            "2",
            "--repeats",
            "2",
            "--detectors",
            "red,mcp",
            "--restarts",
            "4",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    for file in ["runs.csv", "summary.csv", "mean_rank.csv", "win_tie_loss.csv", "records.json", "manifest.json"] {
        assert!(bench_out.join(file).exists(), "{file} missing");
    }
    let report_out = dir.path().join("rerender");
    let status = Command::new(bin())
        .args(["report", "--records"])
        .arg(bench_out.join("records.json"))
        .arg("--out")
        .arg(&report_out)
        .status()
        .unwrap();
    assert!(status.success());
    // re-rendered tables are byte-identical to the originals
    for file in ["runs.csv", "summary.csv", "mean_rank.csv", "win_tie_loss.csv"] {
        assert_eq!(
            std::fs::read(bench_out.join(file)).unwrap(),
            std::fs::read(report_out.join(file)).unwrap(),
            "{file} differs after re-render"
        );
    }
}
