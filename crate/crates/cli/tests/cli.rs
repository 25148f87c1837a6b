use std::path::Path;
use std::process::{Command, Output};

fn pnr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnr"))
        .current_dir(dir)
        .env_remove("PNR_OUT_DIR")
        .env_remove("PNR_WAVEFORMS")
        .env_remove("PNR_FEATURES")
        .env_remove("PNR_CALIBRATION")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnr(dir.path(), &["--seed", "5", "--nbar", "12.5", "-d", "2", "config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    std::fs::write(dir.path().join("dump.toml"), &out.stdout).unwrap();
    let again = pnr(dir.path(), &["-c", "dump.toml", "config"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(out.stdout, again.stdout);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 5") && text.contains("nbar = 12.5"), "{text}");
}

#[test]
fn theory_prints_one_record_per_mean() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnr(dir.path(), &["theory", "--mean", "0,1.5", "-q", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["probabilities"][0].as_f64(), Some(1.0));
    let p = &lines[1]["probabilities"];
    let parity = p[0].as_f64().unwrap() - p[1].as_f64().unwrap();
    assert!((parity - (-3.0f64).exp()).abs() < 1e-12, "{parity}");
}

#[test]
fn biased_stream_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnr(
        dir.path(),
        &[
            "--seed", "3", "--events", "40000", "--nbar", "5", "-d", "3", "--trial-size", "100000",
            "--tests", "frequency,runs", "pipeline",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["verdict"]["random"], false);
    assert!(dir.path().join("run/bits.bin").exists());
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pnr"))
        .current_dir(dir.path())
        .env("PNR_OUT_DIR", "from-env")
        .args(["--seed", "1", "--events", "50", "simulate"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("from-env/events.csv").exists());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[qrng]\nd = 9\n").unwrap();
    let out = pnr(dir.path(), &["-c", "bad.toml", "config"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("bad.toml") && msg.contains("qrng.d"), "{msg}");

    let out = pnr(dir.path(), &["--events", "10", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn missing_input_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnr(dir.path(), &["genbits"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("genbits") && msg.contains("counts.csv"), "{msg}");
}

#[test]
fn staged_run_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "11", "--events", "3000", "--nbar", "20"];
    for stage in ["simulate", "extract", "calibrate", "count", "genbits"] {
        let mut args = common.to_vec();
        args.extend(["--out-dir", "staged", stage]);
        let out = pnr(dir.path(), &args);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let mut args = common.to_vec();
    args.extend(["--out-dir", "whole", "pipeline"]);
    let out = pnr(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("staged/bits.bin"), read("whole/bits.bin"));
}
