// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_venue-act"));
    c.env_remove("VENUE_ACT_OUT");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_metrics_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--seed", "3", "--out"])
        .arg(dir.path())
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["protocol"], "venue");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["true_positives"], 1);
    assert!(dir.path().join("events.ndjson").exists());
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn output_dir_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let o = bin()
        .env("VENUE_ACT_OUT", &out)
        .arg("run")
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("metrics.json").exists());
}

#[test]
fn all_protocols_get_a_report_and_a_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--protocol", "all", "--jobs", "3", "--out"])
        .arg(dir.path())
        .arg(scenario("relay.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for p in ["venue", "dp3t", "tracetogether"] {
        assert!(dir.path().join(p).join("metrics.json").exists(), "{p}");
        assert!(dir.path().join(p).join("events.ndjson").exists(), "{p}");
    }
    let mut rd = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
    let headers = rd.headers().unwrap().clone();
    let col = headers
        .iter()
        .position(|h| h == "adversary_additional_at_risk")
        .unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let extra: Vec<(&str, &str)> = rows.iter().map(|r| (&r[0], &r[col])).collect();
    assert_eq!(extra, vec![("venue", "0"), ("dp3t", "2"), ("tracetogether", "0")]);
}

#[test]
fn parallel_and_serial_runs_agree() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, jobs) in [(&a, "1"), (&b, "4")] {
        let o = bin()
            .args(["run", "--protocol", "all", "--jobs", jobs, "--out"])
            .arg(dir.path())
            .arg(scenario("population.json"))
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["comparison.csv", "venue/events.ndjson", "dp3t/metrics.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_file_params() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--exposure-threshold", "3600", "--out"])
        .arg(dir.path())
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["exposure_threshold"], 3600);
    assert_eq!(m["notified"], 0);
}

#[test]
fn bad_flag_value_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--epoch-length", "0", "--out"])
        .arg(dir.path())
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn validate_reports_line_anchored_diagnostics() {
    let o = bin().arg("validate").arg(scenario("invalid.json")).output().unwrap();
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("invalid.json:8: event 1: u1 enters B before leaving A"), "{err}");
    assert!(err.contains("invalid.json:10:") && err.contains("outside the scenario horizon"), "{err}");
}

#[test]
fn validate_clean_file_prints_ok() {
    for f in ["cafe.json", "relay.json", "population.json"] {
        let o = bin().arg("validate").arg(scenario(f)).output().unwrap();
        assert_eq!(code(&o), 0, "{f}: {}", stderr(&o));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
    }
}

#[test]
fn malformed_json_gets_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.json");
    fs::write(&p, "{\n  \"horizon\": 10,\n  \"users\": [oops]\n}\n").unwrap();
    for cmd in ["validate", "run"] {
        let mut c = bin();
        c.arg(cmd).arg(&p);
        if cmd == "run" {
            c.arg("--out").arg(dir.path().join("out"));
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 1, "{cmd}");
        assert!(stderr(&o).contains("broken.json:3:"), "{}", stderr(&o));
    }
}

#[test]
fn missing_file_is_a_runtime_failure() {
    let o = bin().args(["validate", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn replay_reproduces_metrics_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--protocol", "dp3t", "--seed", "9", "--out"])
        .arg(dir.path())
        .arg(scenario("population.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let replayed = dir.path().join("replayed.json");
    let o = bin()
        .arg("replay")
        .arg(dir.path().join("events.ndjson"))
        .arg("--out")
        .arg(&replayed)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(&replayed).unwrap(),
        fs::read(dir.path().join("metrics.json")).unwrap()
    );
}

#[test]
fn replay_with_flags_rescores() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--out"])
        .arg(dir.path())
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .arg("replay")
        .arg(dir.path().join("events.ndjson"))
        .args(["--exposure-threshold", "3600"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["exposure_threshold"], 3600);
    assert_eq!(m["notified"], 0);
    assert_eq!(m["truth_on_premise"], 0);
}

#[test]
fn truncated_log_fails_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--out"])
        .arg(dir.path())
        .arg(scenario("cafe.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("events.ndjson")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    let cut = dir.path().join("cut.ndjson");
    fs::write(&cut, lines[..lines.len() - 1].join("\n")).unwrap();
    let o = bin().arg("replay").arg(&cut).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn generate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (i, seed) in ["5", "5", "6"].iter().enumerate() {
        let p = dir.path().join(format!("g{i}.json"));
        let o = bin()
            .args(["generate", "--users", "12", "--days", "3", "--seed", seed, "-o"])
            .arg(&p)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outs.push(fs::read(&p).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_ne!(outs[0], outs[2]);
    let o = bin().arg("validate").arg(dir.path().join("g0.json")).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
