//! The binary end to end on a simulated data set.

use std::path::Path;
use std::process::{Command, Output};

fn panelfx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelfx"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(&panelfx(dir.path(), &["simulate", "--output_dir", "."]));
    for stage in ["ingest", "knots", "select", "did", "covariates", "synth", "report"] {
        ok(&panelfx(dir.path(), &[stage, "-c", "sim.toml"]));
    }
    let out = dir.path().join("out");
    for f in ["panel.json", "knots.json", "screen.csv", "did.json", "glm.json", "synth.json", "synth_plot.csv", "report.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let first = std::fs::read(out.join("did.json")).unwrap();
    let synth = std::fs::read(out.join("synth.json")).unwrap();
    ok(&panelfx(dir.path(), &["did", "-c", "sim.toml"]));
    ok(&panelfx(dir.path(), &["synth", "-c", "sim.toml"]));
    assert_eq!(first, std::fs::read(out.join("did.json")).unwrap());
    assert_eq!(synth, std::fs::read(out.join("synth.json")).unwrap());

    // a flag overrides the file
    ok(&panelfx(dir.path(), &["did", "-c", "sim.toml", "--include_post", "true"]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("did.json")).unwrap()).unwrap();
    assert_eq!(v["include_post"], true);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = panelfx(dir.path(), &["did", "--treated_unit", "x", "--effective_start", "2020-04-01", "--effective_end", "2020-04-10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("panel.json"));

    std::fs::write(dir.path().join("bad.toml"), "alpha = 2.0\n").unwrap();
    assert_eq!(panelfx(dir.path(), &["knots", "-c", "bad.toml"]).status.code(), Some(2));
    std::fs::write(dir.path().join("typo.toml"), "alpah = 0.1\n").unwrap();
    assert_eq!(panelfx(dir.path(), &["knots", "-c", "typo.toml"]).status.code(), Some(2));
    assert_eq!(panelfx(dir.path(), &["ingest"]).status.code(), Some(2));
}

#[test]
fn selftest_writes_oracle_lines() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&panelfx(dir.path(), &["selftest", "--selftest_cases", "5", "--output_dir", "o"]));
    assert!(text.contains("0 failed"), "{text}");
    let lines = std::fs::read_to_string(dir.path().join("o/oracle.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5 * 7 + 1);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn empty_inputs_and_empty_screen() {
    let dir = tempfile::tempdir().unwrap();
    ok(&panelfx(dir.path(), &["simulate", "--output_dir", "."]));
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = panelfx(dir.path(), &["ingest", "-c", "sim.toml", "--case_csv", "empty.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest stage"));

    ok(&panelfx(dir.path(), &["ingest", "-c", "sim.toml"]));
    let text = ok(&panelfx(dir.path(), &["select", "-c", "sim.toml", "--min_adj_r2", "1.0"]));
    assert!(text.starts_with("0 candidates"), "{text}");
    ok(&panelfx(dir.path(), &["did", "-c", "sim.toml", "--min_adj_r2", "1.0"]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/did.json")).unwrap()).unwrap();
    assert_eq!(v["n_candidates"], 0);
    assert!(v["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("empty")), "{}", v["warnings"]);
    assert!(v["pools"].as_array().unwrap().iter().any(|p| p["pool"] == "all_other_units"));
}
