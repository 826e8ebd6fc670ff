use std::path::Path;
use std::process::{Command, Output};

use awjm::io::{read_columns, read_measurement_set, read_profile, RunManifest};

fn awjm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awjm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AWJM_OUT")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn empty_arguments_print_usage_and_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = awjm(&[], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn forward_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let out = awjm(
            &["forward", "--preset", "paper-3.2", "--out", d],
            tmp.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["profile.csv", "etch.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let m = manifest(&tmp.path().join("a"));
    assert_eq!(m.command, "forward");
    assert_eq!(m.preset.as_deref(), Some("paper-3.2"));
    assert_eq!(m.outputs, vec!["profile.csv", "etch.csv"]);
    let (grid, z) = read_profile(&tmp.path().join("a/profile.csv")).unwrap();
    assert_eq!(grid.n(), 200);
    assert_eq!(z[0], 0.0);
}

#[test]
fn fdcheck_on_tiny_preset_is_accurate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = awjm(&["fdcheck", "--preset", "tiny", "--out", "fd"], tmp.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut r = csv::Reader::from_path(tmp.path().join("fd/fd.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["component", "adjoint", "fd", "rel_error"]
    );
    let mut worst = 0.0f64;
    let mut rows = 0;
    for rec in r.records() {
        worst = worst.max(rec.unwrap()[3].parse::<f64>().unwrap());
        rows += 1;
    }
    assert_eq!(rows, 22);
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn generated_measurements_feed_identification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = awjm(
        &[
            "generate", "--a", "2", "--nodes", "25", "--t-end", "0.5", "--noise", "2", "--count",
            "2", "--out", "gen",
        ],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meas = read_measurement_set(&tmp.path().join("gen/measurements.json")).unwrap();
    assert_eq!(meas.len(), 2);
    let out = awjm(
        &[
            "identify",
            "--a",
            "2",
            "--nodes",
            "25",
            "--t-end",
            "0.5",
            "--alpha",
            "1e-6",
            "--measurements",
            "gen/measurements.json",
            "--out",
            "id",
        ],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = read_columns(
        &tmp.path().join("id/trace.csv"),
        &["iter", "misfit", "reg", "total", "gradnorm", "step"],
    )
    .unwrap();
    assert!(trace[3].last().unwrap() < &trace[3][0]);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("id/result.json")).unwrap())
            .unwrap();
    assert!(result["trench_error"].as_f64().unwrap() < 0.1);
}

#[test]
fn seed_changes_noise_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    for (d, seed) in [("s1", "1"), ("s2", "2")] {
        let out = awjm(
            &[
                "generate", "--preset", "tiny", "--noise", "5", "--seed", seed, "--out", d,
            ],
            tmp.path(),
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(tmp.path().join("s1/measurement_0.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("s2/measurement_0.csv")).unwrap();
    assert_ne!(a, b);
    assert_eq!(manifest(&tmp.path().join("s2")).seed, Some(2));
}

#[test]
fn config_errors_use_their_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = awjm(&["forward", "--preset", "nope", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = awjm(
        &["forward", "--preset", "tiny", "--k", "2", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(tmp.path().join("cfg.json"), r#"{"preset":"tiny","typo":1}"#).unwrap();
    let out = awjm(
        &["forward", "--config", "cfg.json", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    std::fs::create_dir(tmp.path().join("full")).unwrap();
    std::fs::write(tmp.path().join("full/keep.txt"), "x").unwrap();
    let out = awjm(
        &["forward", "--preset", "tiny", "--out", "full"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("full/keep.txt")).unwrap(),
        "x"
    );
    let out = awjm(
        &["forward", "--preset", "tiny", "--out", "full", "--force"],
        tmp.path(),
    );
    assert!(out.status.success());
}

#[test]
fn numerical_failure_uses_its_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = awjm(
        &["forward", "--a", "60", "--nodes", "21", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unwritable_output_uses_io_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("file"), "x").unwrap();
    let out = awjm(
        &["forward", "--preset", "tiny", "--out", "file/sub"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_awjm"))
        .args(["forward", "--preset", "tiny", "--snapshot-every", "10"])
        .current_dir(tmp.path())
        .env("AWJM_OUT", "runs")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("runs/forward-tiny");
    assert!(dir.join("profile.csv").exists());
    let snaps = read_columns(&dir.join("snapshots.csv"), &["step", "t", "x", "z"]).unwrap();
    assert_eq!(snaps[0][0], 0.0);
    assert_eq!(snaps[0].len() % 20, 0);
}
