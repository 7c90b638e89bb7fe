// SPDX-License-Identifier: MIT OR Apache-2.0

use rscope_core::container::{
    list_trace_files, read_trace, read_trace_dir, write_shared_weights, write_trace,
    write_trace_with_shared_weights,
};
use rscope_core::fixture::{generate, FixtureConfig};
use rscope_core::Error;

fn small() -> FixtureConfig {
    FixtureConfig {
        n_layers: 3,
        d_model: 16,
        ..FixtureConfig::default()
    }
    .with_writer(2, 8, 4.0)
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(&small(), 7).unwrap();
    let path = dir.path().join("t.rscope");
    write_trace(&t, &path).unwrap();
    assert_eq!(read_trace(&path).unwrap(), t);
}

#[test]
fn shared_weights_resolve_relative_to_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("traces");
    std::fs::create_dir(&sub).unwrap();
    let t = generate(&small(), 5).unwrap();
    write_shared_weights(
        &t.unembed,
        t.meta.vocab_size,
        t.meta.d_model,
        dir.path().join("w.rscope"),
    )
    .unwrap();
    let path = sub.join("t.rscope");
    write_trace_with_shared_weights(&t, &path, "../w.rscope").unwrap();
    let full = std::fs::metadata(dir.path().join("w.rscope"))
        .unwrap()
        .len();
    assert!(std::fs::metadata(&path).unwrap().len() < full);
    assert_eq!(read_trace(&path).unwrap(), t);
}

#[test]
fn missing_shared_weights_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(&small(), 5).unwrap();
    let path = dir.path().join("t.rscope");
    write_trace_with_shared_weights(&t, &path, "absent.rscope").unwrap();
    let err = read_trace(&path).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert!(err.is_validation_failure());
}

#[test]
fn trace_is_not_a_weights_file() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(&small(), 5).unwrap();
    write_trace(&t, dir.path().join("w.rscope")).unwrap();
    let path = dir.path().join("t.rscope");
    write_trace_with_shared_weights(&t, &path, "w.rscope").unwrap();
    assert!(matches!(read_trace(&path), Err(Error::Format(_))));
}

#[test]
fn directory_listing_is_sorted_and_filtered() {
    let dir = tempfile::tempdir().unwrap();
    for n in [9, 3, 12] {
        write_trace(
            &generate(&small(), n).unwrap(),
            dir.path().join(format!("n{n:02}.rscope")),
        )
        .unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let files = list_trace_files(dir.path()).unwrap();
    let names: Vec<_> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["n03.rscope", "n09.rscope", "n12.rscope"]);
    let counts: Vec<i64> = read_trace_dir(dir.path())
        .unwrap()
        .iter()
        .map(|t| t.expected_count())
        .collect();
    assert_eq!(counts, [3, 9, 12]);
}

#[test]
fn nonexistent_file_is_io_error() {
    let err = read_trace("/definitely/not/here.rscope").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
