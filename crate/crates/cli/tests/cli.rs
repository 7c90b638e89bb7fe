// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn rscope(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscope"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn bundle(dir: &Path, writer: Option<&str>) {
    let mut args = vec!["gen-fixture", "--bundle", "--out", "b"];
    if let Some(w) = writer {
        args.extend(["--writer", w]);
    }
    let o = rscope(&args, dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn report_on_writer_bundle() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    let o = rscope(
        &["report", "--config", "b/config.json", "--out", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("verdict: routing_failure"));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(v["report_version"], 1);
    assert_eq!(v["verdict"], "routing_failure");
    assert!(dir.path().join("r/report.md").is_file());
}

#[test]
fn report_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    for out in ["r1", "r2"] {
        let o = rscope(
            &["report", "--config", "b/config.json", "--out", out],
            dir.path(),
        );
        assert!(o.status.success());
    }
    for f in ["report.json", "report.md"] {
        assert_eq!(
            std::fs::read(dir.path().join("r1").join(f)).unwrap(),
            std::fs::read(dir.path().join("r2").join(f)).unwrap()
        );
    }
}

#[test]
fn solved_without_writer() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), None);
    let o = rscope(
        &["report", "--config", "b/config.json", "--out", "r"],
        dir.path(),
    );
    assert!(stdout(&o).contains("verdict: solved"));
}

#[test]
fn threshold_override_changes_verdict() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    let o = rscope(
        &[
            "report",
            "--config",
            "b/config.json",
            "--out",
            "r",
            "--r2-threshold",
            "0.99999",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("routing_failure"), "{}", stdout(&o));
}

#[test]
fn per_analysis_commands() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    let p = dir.path();

    let o = rscope(&["probe", "--traces", "b/probe", "--format", "csv"], p);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("condition,layer,r2,mae,n_samples\n"));
    assert!(stdout(&o).contains("\nunique,28,"));

    let o = rscope(&["lens", "b/baseline.rscope"], p);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["trajectory"]["lockin_layer"], 22);

    let o = rscope(
        &[
            "decomp",
            "--traces",
            "b/baseline.rscope",
            "--layers",
            "21:23",
            "--format",
            "csv",
        ],
        p,
    );
    assert_eq!(
        stdout(&o),
        "layer,before,post_attn,post_layer,writer_label\n\
         21,10,10,10,STABLE\n22,10,10,8,MLP_WRITES\n23,8,8,8,STABLE\n"
    );

    let o = rscope(
        &[
            "decomp",
            "b/baseline.rscope",
            "--normal",
            "b/per_n",
            "--ablated",
            "b/ablated",
            "--per-n",
            "b/per_n",
        ],
        p,
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["primary_writer"], 22);
    assert_eq!(v["ablation"].as_array().unwrap().len(), 7);

    let o = rscope(&["attn", "--traces", "b/attention", "--format", "md"], p);
    assert!(o.status.success());
    let o = rscope(
        &[
            "attn",
            "--p2",
            "b/attention/p2.rscope",
            "--p1",
            "b/attention/p1.rscope",
            "--head-layers",
            "28",
        ],
        p,
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["anomaly"]["intruder_pos"], 5);

    let o = rscope(&["behave", "b/behavior.json", "--format", "md"], p);
    assert!(o.status.success());
    assert!(stdout(&o).contains('8'));
}

#[test]
fn out_directory_receives_files() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    let o = rscope(
        &["lens", "b/baseline.rscope", "--out", "o", "--format", "md"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(dir.path().join("o/lens.md").is_file());
}

#[test]
fn single_trace_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let o = rscope(
        &[
            "gen-fixture",
            "--layers",
            "6",
            "--writer",
            "4:8:5",
            "--n",
            "12",
            "--ablate",
            "4:mlp:zero",
            "--out",
            "t",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = stdout(&o).trim().to_string();
    let o = rscope(&["lens", &path], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["output"], 12);
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = rscope(&["gen-fixture", "--layers", "3", "--out", "t"], p);
    assert!(o.status.success());
    assert_eq!(rscope(&["validate", "t"], p).status.code(), Some(0));

    std::fs::write(p.join("t/bad.rscope"), b"RSCOPE01junk").unwrap();
    let o = rscope(&["validate", "--traces", "t"], p);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let bad: Vec<_> = v
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["ok"] == false)
        .collect();
    assert_eq!(bad.len(), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rscope(&["probe", "--traces", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing traces"));
}

#[test]
fn config_and_usage_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(rscope(&["frobnicate"], p).status.code(), Some(3));
    assert_eq!(rscope(&["probe"], p).status.code(), Some(3));
    assert_eq!(
        rscope(&["gen-fixture", "--writer", "22:25:6", "--out", "x"], p)
            .status
            .code(),
        Some(3)
    );
    std::fs::write(p.join("c.json"), r#"{"nonsense": 1}"#).unwrap();
    assert_eq!(
        rscope(&["report", "--config", "c.json"], p).status.code(),
        Some(3)
    );
    assert_eq!(
        rscope(&["report", "--config", "c.json", "--lambda", "-1"], p)
            .status
            .code(),
        Some(3)
    );
    assert_eq!(rscope(&["--help"], p).status.code(), Some(0));
}

#[test]
fn partial_config_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), Some("22:8:6"));
    std::fs::write(
        dir.path().join("b/probe_only.json"),
        r#"{"probe": {"repeated": "probe/repeated", "unique": "probe/unique"}}"#,
    )
    .unwrap();
    let o = rscope(
        &["report", "--config", "b/probe_only.json", "--out", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("verdict: inconclusive"));
    assert!(out.contains("skipped lens"));
}

#[test]
fn prompts_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let o = rscope(&["prompts", "--suite", "probe"], dir.path());
    let lines: Vec<&str> = std::str::from_utf8(&o.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 24);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["label"], "probe.repeated.n03");
    let o = rscope(&["prompts", "--out", "p"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("p/prompts.jsonl").is_file());
}
