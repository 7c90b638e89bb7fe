// SPDX-License-Identifier: MIT OR Apache-2.0

use rscope_core::bundle::write_fixture_bundle;
use rscope_core::decomp::{InvarianceVerdict, WriterLabel};
use rscope_core::fixture::{FixtureConfig, WriterSpec};
use rscope_core::report::{run, Section, SettingsOverride, Verdict};

fn writer_cfg() -> FixtureConfig {
    FixtureConfig::default().with_writer(22, 8, 6.0)
}

#[test]
fn writer_bundle_is_routing_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture_bundle(&writer_cfg(), dir.path()).unwrap();
    let out = dir.path().join("out");
    let r = run(&config, &out, &SettingsOverride::default()).unwrap();

    assert_eq!(r.verdict, Verdict::RoutingFailure);
    assert!(r.skipped.is_empty(), "{:?}", r.skipped);
    assert!(r
        .evidence
        .iter()
        .any(|e| e.claim.contains("layer 22") && e.claim.contains("78.57")));

    let lens = r.lens_section.get().unwrap();
    assert_eq!(lens.trajectory.lockin_layer, Some(22));
    let decomp = r.decomp_section.get().unwrap();
    assert_eq!(decomp.attractor, 8);
    assert_eq!(decomp.primary_writer, Some(22));
    let per_n = decomp.per_n.as_ref().unwrap();
    assert_eq!(per_n.verdict, InvarianceVerdict::CountDependentInput);
    let ablation = decomp.ablation.as_ref().unwrap();
    // At n = 8 the planted digit is also the true count, so nothing shifts.
    assert!(ablation
        .iter()
        .all(|row| row.fixed && row.shift == (row.n != 8)));

    let behavior = r.behavior_section.get().unwrap();
    let attractors = behavior.attractors.as_ref().unwrap();
    assert_eq!(attractors.attractor_values(), vec![8]);

    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["report_version"], 1);
    assert_eq!(v["verdict"], "routing_failure");
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("routing_failure"));
    assert!(md.contains("| L22 | 10 | 10 | 8 | MLP |"));
}

#[test]
fn no_writer_bundle_is_solved() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture_bundle(&FixtureConfig::default(), dir.path()).unwrap();
    let r = run(
        &config,
        dir.path().join("out"),
        &SettingsOverride::default(),
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Solved);
}

#[test]
fn probe_only_bundle_skips_other_sections() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_bundle(&writer_cfg(), dir.path()).unwrap();
    let cfg = dir.path().join("probe_only.json");
    std::fs::write(
        &cfg,
        r#"{"probe": {"repeated": "probe/repeated", "unique": "probe/unique"}}"#,
    )
    .unwrap();
    let r = run(&cfg, dir.path().join("out"), &SettingsOverride::default()).unwrap();
    assert!(r.probe_section.get().is_some());
    assert!(matches!(r.lens_section, Section::Skipped { .. }));
    assert!(matches!(r.decomp_section, Section::Skipped { .. }));
    assert_eq!(r.verdict, Verdict::Inconclusive);
}

#[test]
fn missing_traces_are_enumerated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"probe": {"repeated": "nope"}, "lens": {"trace": "gone.rscope"}}"#,
    )
    .unwrap();
    let r = run(&cfg, dir.path().join("out"), &SettingsOverride::default()).unwrap();
    assert!(r.skipped.iter().any(|s| s.contains("nope")));
    assert!(r.skipped.iter().any(|s| s.contains("gone.rscope")));
}

#[test]
fn count_invariant_writer_input() {
    let mut cfg = FixtureConfig {
        n_layers: 16,
        ..FixtureConfig::default()
    };
    cfg.writer = Some(WriterSpec {
        layer: 14,
        wrong_digit: 8,
        margin: 6.0,
        fires_from_n: Some(8),
        input_digit: Some(12),
    });
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture_bundle(&cfg, dir.path()).unwrap();
    let r = run(
        &config,
        dir.path().join("out"),
        &SettingsOverride::default(),
    )
    .unwrap();
    let decomp = r.decomp_section.get().unwrap();
    let per_n = decomp.per_n.as_ref().unwrap();
    assert_eq!(per_n.verdict, InvarianceVerdict::CountInvariantInput);
    let n7 = per_n.rows.iter().find(|row| row.n == 7).unwrap();
    assert!(!n7.writer_fired);
    assert!(per_n
        .rows
        .iter()
        .filter(|row| row.n >= 8)
        .all(|row| row.writer_fired && row.digits.before == Some(12)));
    assert_eq!(
        decomp.records[13].writer_label,
        WriterLabel::MlpWrites,
        "L14 writes"
    );
    assert_eq!(
        r.lens_section.get().unwrap().trajectory.lockin_depth_pct,
        Some(87.5)
    );
}

#[test]
fn report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture_bundle(&writer_cfg(), dir.path()).unwrap();
    run(&config, dir.path().join("a"), &SettingsOverride::default()).unwrap();
    run(&config, dir.path().join("b"), &SettingsOverride::default()).unwrap();
    for f in ["report.json", "report.md"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn shipped_schema_lists_every_config_field() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let cfg = serde_json::to_value(rscope_core::report::RunConfig::default()).unwrap();
    let mut fields: Vec<_> = cfg.as_object().unwrap().keys().collect();
    let mut listed: Vec<_> = props.keys().collect();
    fields.sort();
    listed.sort();
    assert_eq!(fields, listed);
}
