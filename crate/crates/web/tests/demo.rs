// SPDX-License-Identifier: MIT OR Apache-2.0

use rscope_web::{attention_demo_json, lens_demo_json, probe_demo_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn lens_locks_in_at_writer() {
    let v = parse(lens_demo_json(28, 22, 8, 6.0, 10).unwrap());
    assert_eq!(v["output"], 8);
    assert_eq!(v["lockin_layer"], 22);
    assert_eq!(v["primary_writer"], 22);
    assert_eq!(v["layers"][21]["writer_label"], "MLP");
    assert_eq!(v["layers"].as_array().unwrap().len(), 28);
}

#[test]
fn lens_without_writer_is_correct() {
    let v = parse(lens_demo_json(12, 0, 8, 6.0, 7).unwrap());
    assert_eq!(v["output"], 7);
    assert_eq!(v["lockin_layer"], 1);
    assert!(v["primary_writer"].is_null());
}

#[test]
fn lens_rejects_bad_writer() {
    assert!(lens_demo_json(10, 11, 8, 6.0, 10).is_err());
}

#[test]
fn attention_uniform_and_peaked() {
    let v = parse(attention_demo_json("1 1 1 1 1 1 1 1 1 1", 5).unwrap());
    assert!((v["entropy"].as_f64().unwrap() - 10f64.ln()).abs() < 1e-12);
    assert_eq!(v["uniformity"], 1.0);
    assert_eq!(v["over_attended"], false);

    let v = parse(attention_demo_json("1,1,1,1,1,4,1,1,1,1", 5).unwrap());
    assert_eq!(v["argmax"], 5);
    assert!((v["intruder_ratio"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    assert_eq!(v["over_attended"], true);

    let v = parse(attention_demo_json("0 0 3", -1).unwrap());
    assert_eq!(v["entropy"], 0.0);
    assert!(v["intruder_ratio"].is_null());
}

#[test]
fn attention_input_errors() {
    assert!(attention_demo_json("", 0).is_err());
    assert!(attention_demo_json("1 x", 0).is_err());
    assert!(attention_demo_json("1 -1", 0).is_err());
    assert!(attention_demo_json("0 0", -1).is_err());
    assert!(attention_demo_json("1 1", 4).is_err());
}

#[test]
fn probe_noise_lowers_r2() {
    let clean = parse(probe_demo_json(6, 0.01, 0.01, 1.0).unwrap());
    let noisy = parse(probe_demo_json(6, 0.01, 3.0, 1.0).unwrap());
    let r2 = |v: &Value, k: &str| v[k][3].as_f64().unwrap();
    assert!(r2(&clean, "r2_unique") > 0.99);
    assert!(r2(&noisy, "r2_unique") < r2(&clean, "r2_unique"));
    assert!(r2(&noisy, "r2_repeated") > 0.99);
    assert!(probe_demo_json(6, 0.01, 0.01, 0.0).is_err());
}
