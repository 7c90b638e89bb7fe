// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo bindings. Each export takes plain numbers or text from the
//! page and returns a JSON string; errors come back as JS exceptions.

use rscope_core::attn::{argmax, entropy, intruder_ratio, uniformity, DEFAULT_RATIO_THRESHOLD};
use rscope_core::decomp::{decompose_range, primary_writer};
use rscope_core::fixture::{generate, generate_family, ConditionNoise, FixtureConfig};
use rscope_core::lens::trajectory;
use rscope_core::probes::{probe_all_layers, ProbeCondition, ProbeDataset};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LensLayer {
    layer: usize,
    top_digit: Option<u32>,
    top5: Vec<u32>,
    writer_label: &'static str,
}

#[derive(Serialize)]
struct LensDemo {
    n_layers: usize,
    correct: i64,
    output: Option<i64>,
    lockin_layer: Option<usize>,
    lockin_depth_pct: Option<f64>,
    primary_writer: Option<usize>,
    layers: Vec<LensLayer>,
}

/// Lens trajectory of a fixture with an MLP writer at `writer_layer`
/// (0 disables it) planting `wrong_digit` with the given margin.
pub fn lens_demo_json(
    n_layers: usize,
    writer_layer: usize,
    wrong_digit: u32,
    margin: f64,
    n: usize,
) -> Result<String, String> {
    let mut cfg = FixtureConfig {
        n_layers,
        ..FixtureConfig::default()
    };
    if writer_layer > 0 {
        cfg = cfg.with_writer(writer_layer, wrong_digit, margin);
    }
    let t = generate(&cfg, n).map_err(|e| e.to_string())?;
    let traj = trajectory(&t).map_err(|e| e.to_string())?;
    let output = t.behavior.as_ref().and_then(|b| b.parsed_integer);
    let attractor = traj.final_answer_digit.unwrap_or(wrong_digit);
    let records = decompose_range(&t, 1..=n_layers, attractor).map_err(|e| e.to_string())?;
    let layers = traj
        .layers
        .iter()
        .zip(&records)
        .map(|(p, r)| LensLayer {
            layer: p.layer_index,
            top_digit: p.top_digit,
            top5: p.top5.iter().map(|&(d, _)| d).collect(),
            writer_label: r.writer_label.table_label(),
        })
        .collect();
    to_json(&LensDemo {
        n_layers,
        correct: n as i64,
        output,
        lockin_layer: traj.lockin_layer,
        lockin_depth_pct: traj.lockin_depth_pct,
        primary_writer: primary_writer(&records, traj.numeric_from_layer.unwrap_or(1)),
        layers,
    })
}

#[derive(Serialize)]
struct AttentionDemo {
    distribution: Vec<f64>,
    entropy: f64,
    max_entropy: f64,
    uniformity: f64,
    argmax: usize,
    intruder_ratio: Option<f64>,
    over_attended: Option<bool>,
}

/// Metrics for attention weights typed as comma or space separated numbers.
/// They are renormalized over the list. `intruder_pos < 0` skips the ratio.
pub fn attention_demo_json(weights: &str, intruder_pos: i32) -> Result<String, String> {
    let raw: Vec<f64> = weights
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    if raw.is_empty() {
        return Err("enter at least one weight".into());
    }
    if raw.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err("weights must be finite and non-negative".into());
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err("weights sum to zero".into());
    }
    let p: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let ratio = if intruder_pos >= 0 {
        Some(intruder_ratio(&p, intruder_pos as usize).map_err(|e| e.to_string())?)
    } else {
        None
    };
    to_json(&AttentionDemo {
        entropy: entropy(&p),
        max_entropy: (p.len() as f64).ln(),
        uniformity: uniformity(&p),
        argmax: argmax(&p),
        intruder_ratio: ratio,
        over_attended: ratio.map(|r| r > DEFAULT_RATIO_THRESHOLD),
        distribution: p,
    })
}

#[derive(Serialize)]
struct ProbeDemo {
    lambda: f64,
    layers: Vec<usize>,
    r2_repeated: Vec<f64>,
    r2_unique: Vec<f64>,
    mae_repeated: Vec<f64>,
    mae_unique: Vec<f64>,
}

/// Per-layer probe R² for repeated (n = 3..=15) and unique (n = 3..=13)
/// fixture lists, each with its own count-noise level.
pub fn probe_demo_json(
    n_layers: usize,
    sigma_repeated: f64,
    sigma_unique: f64,
    lambda: f64,
) -> Result<String, String> {
    let cfg = FixtureConfig {
        n_layers,
        condition_noise: ConditionNoise {
            repeated: Some(sigma_repeated),
            unique: Some(sigma_unique),
        },
        ..FixtureConfig::default()
    };
    let err = |e: rscope_core::Error| e.to_string();
    let rep = generate_family(&cfg, ProbeCondition::Repeated, 3..16).map_err(err)?;
    let uni = generate_family(&cfg, ProbeCondition::Unique, 3..14).map_err(err)?;
    let table = probe_all_layers(
        &ProbeDataset::from_traces(ProbeCondition::Repeated, &rep).map_err(err)?,
        &ProbeDataset::from_traces(ProbeCondition::Unique, &uni).map_err(err)?,
        lambda,
    )
    .map_err(err)?;
    to_json(&ProbeDemo {
        lambda,
        layers: table.repeated.iter().map(|r| r.layer_index).collect(),
        r2_repeated: table.repeated.iter().map(|r| r.r2).collect(),
        r2_unique: table.unique.iter().map(|r| r.r2).collect(),
        mae_repeated: table.repeated.iter().map(|r| r.mae).collect(),
        mae_unique: table.unique.iter().map(|r| r.mae).collect(),
    })
}

#[wasm_bindgen]
pub fn lens_demo(
    n_layers: usize,
    writer_layer: usize,
    wrong_digit: u32,
    margin: f64,
    n: usize,
) -> Result<String, JsValue> {
    lens_demo_json(n_layers, writer_layer, wrong_digit, margin, n)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn attention_demo(weights: &str, intruder_pos: i32) -> Result<String, JsValue> {
    attention_demo_json(weights, intruder_pos).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn probe_demo(
    n_layers: usize,
    sigma_repeated: f64,
    sigma_unique: f64,
    lambda: f64,
) -> Result<String, JsValue> {
    probe_demo_json(n_layers, sigma_repeated, sigma_unique, lambda)
        .map_err(|e| JsValue::from_str(&e))
}
