// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic trace generator with a planted count code and planted writers.
//!
//! Geometry: the count direction `v` and every unembedding row are built by
//! Gram-Schmidt from seeded gaussian draws, so as long as
//! `vocab_size + 1 <= d_model` they are exactly orthonormal. `v` then
//! carries the count linearly while staying invisible to the lens. When the
//! space runs out, the remaining rows are plain unit gaussians.
//!
//! Residual stream for a list of `n` items with count `c`:
//!
//! ```text
//! B_0 = E                                  random, count-independent
//! B_i = c*v + eps*u_c + sigma*g_i (+ tau*u_text below numeric_from_layer)
//! attn_i = (B_i - B_{i-1}) / 2
//! mlp_i  = (B_i - B_{i-1}) / 2 + writer terms at layer i
//! S_i = S_{i-1} + attn_i + mlp_i
//! ```
//!
//! A writer adds `margin*u_wrong` to its MLP output. Ablation drops one
//! sublayer term and rebuilds every later state.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::decomp::{AblationSpec, Sublayer};
use crate::error::{Error, Result};
use crate::lens::{self, StateTag};
use crate::probes::ProbeCondition;
use crate::prompts::{INTRUDER_TOKEN, UNIQUE_WORDS};
use crate::rng::SplitMix64;
use crate::trace::{
    ActivationTrace, AttentionRows, BehavioralRecord, DigitVocab, LayerState, LayerStates,
    ModelMeta, NormKind, SpanRange, TokenRecord, UnembedBlock, DEFAULT_CONTINUITY_TOLERANCE,
    DIGIT_VALUE_RANGE,
};

pub const BOS_ID: u32 = 0;
/// First non-digit token id; ids `1..=19` spell the integers `1..=19`.
pub const WORD_BASE_ID: u32 = 20;
/// Attention mass given to prompt tokens that are neither BOS nor list items.
pub const PROMPT_MASS: f64 = 0.1;

const SYMBOL: &str = "apple";
const TEXT_TOKEN: &str = "Count";
const PREFIX: [&str; 2] = ["Count", ":"];
const SUFFIX: [&str; 3] = [".", "Answer", ":"];

fn words() -> Vec<&'static str> {
    let mut w = vec![SYMBOL, INTRUDER_TOKEN, TEXT_TOKEN, ":", ".", "Answer"];
    w.extend(UNIQUE_WORDS);
    w
}

fn word_id(word: &str) -> u32 {
    let pos = words()
        .iter()
        .position(|w| *w == word)
        .expect("fixture word table covers every emitted word");
    WORD_BASE_ID + pos as u32
}

/// Smallest vocabulary that holds every fixture token.
pub fn min_vocab_size() -> usize {
    WORD_BASE_ID as usize + words().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterSpec {
    /// 1-based layer whose MLP writes the digit.
    pub layer: usize,
    pub wrong_digit: u32,
    pub margin: f64,
    /// The writer only fires for counts at or above this value.
    #[serde(default)]
    pub fires_from_n: Option<i64>,
    /// Digit planted by the MLP one layer earlier, so the writer's input
    /// projects to the same value for every `n`.
    #[serde(default)]
    pub input_digit: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionProfile {
    Uniform,
    /// All list mass on one list-relative position.
    OneHot {
        pos: usize,
    },
    /// `weight` on one position, the rest spread uniformly.
    Mixture {
        pos: usize,
        weight: f64,
    },
    /// Per-head list weights; each row must have one entry per list item.
    Custom {
        heads: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionNoise {
    #[serde(default)]
    pub repeated: Option<f64>,
    #[serde(default)]
    pub unique: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub count_direction_seed: u64,
    pub digit_embedding_seed: u64,
    pub count_noise_sigma: f64,
    /// `eps`: weight of the true count's digit row in the base state.
    pub count_digit_bias: f64,
    pub writer: Option<WriterSpec>,
    pub secondary_writer: Option<WriterSpec>,
    /// Layers below this one are dominated by a non-digit token.
    pub numeric_from_layer: Option<usize>,
    pub text_bias: f64,
    pub attention_profile: AttentionProfile,
    pub bos_mass: f64,
    pub condition_noise: ConditionNoise,
    /// Digit values present in the vocabulary; `None` means all of `1..=19`.
    pub digit_values: Option<Vec<u32>>,
    /// List-relative intruder positions.
    pub intruder_positions: Vec<usize>,
    pub norm_kind: NormKind,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            model_id: "fixture".into(),
            n_layers: 28,
            d_model: 64,
            n_heads: 4,
            vocab_size: 48,
            count_direction_seed: 7,
            digit_embedding_seed: 11,
            count_noise_sigma: 0.01,
            count_digit_bias: 1.0,
            writer: None,
            secondary_writer: None,
            numeric_from_layer: None,
            text_bias: 3.0,
            attention_profile: AttentionProfile::Uniform,
            bos_mass: 0.5,
            condition_noise: ConditionNoise::default(),
            digit_values: None,
            intruder_positions: Vec::new(),
            norm_kind: NormKind::Rms,
        }
    }
}

impl FixtureConfig {
    pub fn with_writer(mut self, layer: usize, wrong_digit: u32, margin: f64) -> Self {
        self.writer = Some(WriterSpec {
            layer,
            wrong_digit,
            margin,
            fires_from_n: None,
            input_digit: None,
        });
        self
    }

    pub fn digit_vocab(&self) -> DigitVocab {
        let values: Vec<u32> = match &self.digit_values {
            Some(v) => v.clone(),
            None => DIGIT_VALUE_RANGE.collect(),
        };
        DigitVocab::from_pairs(values.into_iter().map(|v| (v, v)))
    }

    fn sigma(&self, condition: ProbeCondition) -> f64 {
        match condition {
            ProbeCondition::Repeated => self.condition_noise.repeated,
            ProbeCondition::Unique => self.condition_noise.unique,
        }
        .unwrap_or(self.count_noise_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return cfg("n_layers, d_model and n_heads must be positive".into());
        }
        if self.vocab_size < min_vocab_size() {
            return cfg(format!("vocab_size must be at least {}", min_vocab_size()));
        }
        for (name, v) in [
            ("count_noise_sigma", self.count_noise_sigma),
            ("count_digit_bias", self.count_digit_bias),
            ("text_bias", self.text_bias),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return cfg(format!("{name} must be a nonnegative real"));
            }
        }
        for s in [self.condition_noise.repeated, self.condition_noise.unique]
            .into_iter()
            .flatten()
        {
            if !(s.is_finite() && s >= 0.0) {
                return cfg("condition noise must be nonnegative".into());
            }
        }
        if !(0.0..1.0 - PROMPT_MASS).contains(&self.bos_mass) {
            return cfg(format!("bos_mass must lie in [0, {})", 1.0 - PROMPT_MASS));
        }
        if let Some(v) = &self.digit_values {
            if v.iter().any(|d| !DIGIT_VALUE_RANGE.contains(d)) {
                return cfg("digit_values must lie in 1..=19".into());
            }
        }
        if let Some(l) = self.numeric_from_layer {
            if l == 0 || l > self.n_layers {
                return cfg(format!(
                    "numeric_from_layer {l} outside 1..={}",
                    self.n_layers
                ));
            }
        }
        let digits = self.digit_vocab();
        for (name, w) in [
            ("writer", &self.writer),
            ("secondary_writer", &self.secondary_writer),
        ] {
            let Some(w) = w else { continue };
            if w.layer == 0 || w.layer > self.n_layers {
                return cfg(format!(
                    "{name}.layer {} outside 1..={}",
                    w.layer, self.n_layers
                ));
            }
            if !(w.margin.is_finite() && w.margin > 0.0) {
                return cfg(format!("{name}.margin must be positive"));
            }
            if !digits.is_representable(i64::from(w.wrong_digit)) {
                return cfg(format!(
                    "{name}.wrong_digit {} is not in the digit vocabulary",
                    w.wrong_digit
                ));
            }
            if let Some(d) = w.input_digit {
                if w.layer < 2 {
                    return cfg(format!(
                        "{name}.input_digit needs a writer at layer 2 or later"
                    ));
                }
                if !digits.is_representable(i64::from(d)) {
                    return cfg(format!(
                        "{name}.input_digit {d} is not in the digit vocabulary"
                    ));
                }
            }
        }
        if let (Some(p), Some(s)) = (&self.writer, &self.secondary_writer) {
            if s.layer <= p.layer {
                return cfg("secondary_writer must sit above the primary writer".into());
            }
        }
        Ok(())
    }
}

struct Geometry {
    v_count: Vec<f64>,
    /// `vocab_size` unit rows of length `d_model`.
    rows: Vec<Vec<f64>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Geometry {
    fn build(cfg: &FixtureConfig) -> Self {
        let d = cfg.d_model;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut orthonormal = |raw: Vec<f64>| {
            let mut v = raw.clone();
            if basis.len() < d {
                for b in &basis {
                    let c = dot(&v, b);
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= c * y;
                    }
                }
                let v = unit(v);
                basis.push(v.clone());
                v
            } else {
                unit(raw)
            }
        };
        let v_count = orthonormal(SplitMix64::new(cfg.count_direction_seed).gaussian_vec(d));
        let mut rng = SplitMix64::new(cfg.digit_embedding_seed);
        let rows = (0..cfg.vocab_size)
            .map(|_| orthonormal(rng.gaussian_vec(d)))
            .collect();
        Self { v_count, rows }
    }

    fn row(&self, id: u32) -> &[f64] {
        &self.rows[id as usize]
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn condition_tag(c: ProbeCondition) -> u64 {
    match c {
        ProbeCondition::Repeated => 1,
        ProbeCondition::Unique => 2,
    }
}

struct Tokens {
    record: TokenRecord,
    label: String,
}

#[allow(clippy::needless_range_loop)]
fn build_tokens(cfg: &FixtureConfig, n: usize, condition: ProbeCondition) -> Result<Tokens> {
    if condition == ProbeCondition::Unique && n > UNIQUE_WORDS.len() {
        return Err(Error::Config(format!(
            "unique-word fixtures support at most {} items",
            UNIQUE_WORDS.len()
        )));
    }
    let intruders: Vec<usize> = match condition {
        ProbeCondition::Repeated => cfg.intruder_positions.clone(),
        ProbeCondition::Unique => Vec::new(),
    };
    if let Some(&p) = intruders.iter().find(|&&p| p >= n) {
        return Err(Error::Config(format!(
            "intruder position {p} outside a list of {n}"
        )));
    }
    let mut texts: Vec<String> = vec!["<bos>".into()];
    texts.extend(PREFIX.iter().map(|s| s.to_string()));
    let start = texts.len();
    for i in 0..n {
        texts.push(match condition {
            ProbeCondition::Unique => UNIQUE_WORDS[i].to_string(),
            ProbeCondition::Repeated if intruders.contains(&i) => INTRUDER_TOKEN.to_string(),
            ProbeCondition::Repeated => SYMBOL.to_string(),
        });
    }
    let end = texts.len();
    texts.extend(SUFFIX.iter().map(|s| s.to_string()));
    let ids = texts
        .iter()
        .enumerate()
        .map(|(i, t)| if i == 0 { BOS_ID } else { word_id(t) })
        .collect();
    let prefix = match condition {
        ProbeCondition::Unique => "P3",
        ProbeCondition::Repeated if intruders.is_empty() => "P1",
        ProbeCondition::Repeated => "P2",
    };
    Ok(Tokens {
        record: TokenRecord {
            token_ids: ids,
            token_texts: texts,
            bos_index: Some(0),
            list_span: SpanRange::new(start, end),
            intruder_positions: intruders,
        },
        label: format!("{prefix}.space.n{n}"),
    })
}

fn list_weights(profile: &AttentionProfile, head: usize, n: usize) -> Result<Vec<f64>> {
    let w = match profile {
        AttentionProfile::Uniform => vec![1.0; n],
        AttentionProfile::OneHot { pos } | AttentionProfile::Mixture { pos, .. } if *pos >= n => {
            return Err(Error::Config(format!(
                "attention position {pos} outside a list of {n}"
            )))
        }
        AttentionProfile::OneHot { pos } => {
            let mut w = vec![0.0; n];
            w[*pos] = 1.0;
            w
        }
        AttentionProfile::Mixture { pos, weight } => {
            if !(0.0..=1.0).contains(weight) {
                return Err(Error::Config("mixture weight must lie in [0, 1]".into()));
            }
            let mut w = vec![(1.0 - weight) / n as f64; n];
            w[*pos] += weight;
            w
        }
        AttentionProfile::Custom { heads } => {
            let row = heads
                .get(head % heads.len().max(1))
                .ok_or_else(|| Error::Config("custom attention profile has no heads".into()))?;
            if row.len() != n || row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Config(format!(
                    "custom attention rows need {n} nonnegative weights"
                )));
            }
            row.clone()
        }
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("attention weights sum to zero".into()));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn attention(cfg: &FixtureConfig, tokens: &TokenRecord) -> Result<AttentionRows> {
    let seq = tokens.seq_len();
    let span = tokens.list_span;
    let others: Vec<usize> = (1..seq).filter(|&p| !span.contains(p)).collect();
    let list_mass = 1.0 - cfg.bos_mass - PROMPT_MASS;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let lw = list_weights(&cfg.attention_profile, h, span.len())?;
        let mut row = vec![0.0f64; seq];
        row[0] = cfg.bos_mass;
        for &p in &others {
            row[p] = PROMPT_MASS / others.len() as f64;
        }
        for (k, w) in lw.iter().enumerate() {
            row[span.start + k] = list_mass * w;
        }
        heads.extend(to_f32(&row));
    }
    Ok(AttentionRows {
        n_heads: cfg.n_heads,
        seq_len: seq,
        layers: vec![heads; cfg.n_layers],
    })
}

fn fires(w: &WriterSpec, count: i64) -> bool {
    w.fires_from_n.is_none_or(|f| count >= f)
}

#[allow(clippy::needless_range_loop)]
fn build(
    cfg: &FixtureConfig,
    n: usize,
    condition: ProbeCondition,
    ablation: Option<&AblationSpec>,
) -> Result<ActivationTrace> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("fixture lists need at least one item".into()));
    }
    if let Some(a) = ablation {
        a.validate(cfg.n_layers)?;
    }
    let geo = Geometry::build(cfg);
    let tokens = build_tokens(cfg, n, condition)?;
    let count = n as i64 - tokens.record.intruder_positions.len() as i64;
    let digits = cfg.digit_vocab();
    let d = cfg.d_model;
    let sigma = cfg.sigma(condition);
    let ctag = condition_tag(condition);

    let mut embed =
        SplitMix64::derived(cfg.digit_embedding_seed, &[0xE, n as u64, ctag]).gaussian_vec(d);
    if cfg.numeric_from_layer.is_some() {
        axpy(&mut embed, cfg.text_bias, geo.row(word_id(TEXT_TOKEN)));
    }
    let base = |i: usize| -> Vec<f64> {
        let mut b = SplitMix64::derived(cfg.count_direction_seed, &[i as u64, n as u64, ctag])
            .gaussian_vec(d)
            .into_iter()
            .map(|g| sigma * g)
            .collect::<Vec<_>>();
        axpy(&mut b, count as f64, &geo.v_count);
        if count > 0 && digits.is_representable(count) {
            axpy(&mut b, cfg.count_digit_bias, geo.row(count as u32));
        }
        if cfg.numeric_from_layer.is_some_and(|l| i < l) {
            axpy(&mut b, cfg.text_bias, geo.row(word_id(TEXT_TOKEN)));
        }
        b
    };

    let mut writer_terms: Vec<Vec<f64>> = vec![vec![0.0; d]; cfg.n_layers + 1];
    for w in [&cfg.writer, &cfg.secondary_writer].into_iter().flatten() {
        if !fires(w, count) {
            continue;
        }
        axpy(&mut writer_terms[w.layer], w.margin, geo.row(w.wrong_digit));
        if let Some(input) = w.input_digit {
            axpy(
                &mut writer_terms[w.layer - 1],
                2.0 * cfg.count_digit_bias,
                geo.row(input),
            );
        }
    }
    let zeroed =
        |i: usize, s: Sublayer| ablation.is_some_and(|a| a.layer_index == i && a.sublayer == s);

    let embedding_out = to_f32(&embed);
    let mut prev_b = embed.clone();
    let mut state = embed;
    let mut prev_f32 = embedding_out.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut writer_active = false;
    for i in 1..=cfg.n_layers {
        let b = base(i);
        let half: Vec<f64> = b.iter().zip(&prev_b).map(|(x, y)| 0.5 * (x - y)).collect();
        if !zeroed(i, Sublayer::Attn) {
            axpy(&mut state, 1.0, &half);
        }
        let post_attn = to_f32(&state);
        if !zeroed(i, Sublayer::Mlp) {
            axpy(&mut state, 1.0, &half);
            axpy(&mut state, 1.0, &writer_terms[i]);
            writer_active |= writer_terms[i].iter().any(|&x| x != 0.0);
        }
        let post_layer = to_f32(&state);
        layers.push(LayerState {
            h_before: prev_f32,
            h_post_attn: post_attn,
            h_post_layer: post_layer.clone(),
        });
        prev_f32 = post_layer;
        prev_b = b;
    }

    let unembed: Vec<f32> = geo.rows.iter().flat_map(|r| to_f32(r)).collect();
    let attn = attention(cfg, &tokens.record)?;
    let mut trace = ActivationTrace {
        meta: ModelMeta {
            model_id: cfg.model_id.clone(),
            n_layers: cfg.n_layers,
            d_model: d,
            n_heads: cfg.n_heads,
            vocab_size: cfg.vocab_size,
            norm_kind: cfg.norm_kind,
            norm_eps: 1e-6,
        },
        tokens: tokens.record,
        states: LayerStates {
            embedding_out,
            layers,
        },
        attn,
        unembed: UnembedBlock {
            unembed,
            final_norm_weight: vec![1.0; d],
            final_norm_bias: match cfg.norm_kind {
                NormKind::Rms => None,
                NormKind::Standard => Some(vec![0.0; d]),
            },
        },
        digits,
        behavior: None,
        prompt_label: tokens.label,
        continuity_tolerance: DEFAULT_CONTINUITY_TOLERANCE,
    };
    let output = if writer_active {
        lens::project_layer(&trace, cfg.n_layers, StateTag::PostLayer)?
            .top_digit
            .map_or(count, i64::from)
    } else {
        count
    };
    trace.behavior = Some(BehavioralRecord::from_text(output.to_string()));
    trace.validate()?;
    Ok(trace)
}

/// Repeated-token trace for a list of `n` items.
pub fn generate(config: &FixtureConfig, n: usize) -> Result<ActivationTrace> {
    build(config, n, ProbeCondition::Repeated, None)
}

pub fn generate_condition(
    config: &FixtureConfig,
    n: usize,
    condition: ProbeCondition,
) -> Result<ActivationTrace> {
    build(config, n, condition, None)
}

/// Regenerates the trace with one sublayer's contribution removed.
pub fn apply_ablation(
    config: &FixtureConfig,
    spec: &AblationSpec,
    n: usize,
) -> Result<ActivationTrace> {
    build(config, n, ProbeCondition::Repeated, Some(spec))
}

pub fn generate_family(
    config: &FixtureConfig,
    condition: ProbeCondition,
    ns: Range<usize>,
) -> Result<Vec<ActivationTrace>> {
    ns.map(|n| build(config, n, condition, None)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose_range, WriterLabel};

    fn small() -> FixtureConfig {
        FixtureConfig {
            n_layers: 4,
            ..FixtureConfig::default()
        }
    }

    #[test]
    fn rows_are_orthonormal() {
        let geo = Geometry::build(&FixtureConfig::default());
        for (i, a) in geo.rows.iter().enumerate() {
            assert!((dot(a, a) - 1.0).abs() < 1e-12);
            assert!(dot(a, &geo.v_count).abs() < 1e-12);
            for b in &geo.rows[..i] {
                assert!(dot(a, b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_writer_tracks_count() {
        let cfg = FixtureConfig {
            count_noise_sigma: 0.0,
            ..small()
        };
        let t = generate(&cfg, 7).unwrap();
        let traj = lens::trajectory(&t).unwrap();
        assert!(traj.layers.iter().all(|p| p.top_digit == Some(7)));
        assert_eq!(t.behavior.unwrap().parsed_integer, Some(7));
    }

    #[test]
    fn writer_at_three_of_four() {
        let cfg = small().with_writer(3, 8, 6.0);
        let t = generate(&cfg, 10).unwrap();
        assert_eq!(t.behavior.as_ref().unwrap().parsed_integer, Some(8));
        let traj = lens::trajectory(&t).unwrap();
        assert_eq!(traj.lockin_layer, Some(3));
        let tops: Vec<_> = traj.layers.iter().map(|p| p.top_digit).collect();
        assert_eq!(tops, [Some(10), Some(10), Some(8), Some(8)]);
        let recs = decompose_range(&t, 1..=4, 8).unwrap();
        let labels: Vec<_> = recs.iter().map(|r| r.writer_label).collect();
        use WriterLabel::*;
        assert_eq!(labels, [Stable, Stable, MlpWrites, Stable]);
        // Outranked but present.
        assert!(traj.layers[2].in_top5(10));
    }

    #[test]
    fn ablating_only_writer_restores_count() {
        let cfg = small().with_writer(3, 8, 6.0);
        let t = apply_ablation(&cfg, &AblationSpec::zero(3, Sublayer::Mlp), 10).unwrap();
        assert_eq!(t.behavior.unwrap().parsed_integer, Some(10));
        let t = apply_ablation(&cfg, &AblationSpec::zero(2, Sublayer::Mlp), 10).unwrap();
        assert_eq!(t.behavior.unwrap().parsed_integer, Some(8));
    }

    #[test]
    fn secondary_writer_takes_over() {
        let mut cfg = small().with_writer(2, 8, 6.0);
        cfg.secondary_writer = Some(WriterSpec {
            layer: 4,
            wrong_digit: 16,
            margin: 3.0,
            fires_from_n: Some(11),
            input_digit: None,
        });
        let out = |n| {
            apply_ablation(&cfg, &AblationSpec::zero(2, Sublayer::Mlp), n)
                .unwrap()
                .behavior
                .unwrap()
                .parsed_integer
        };
        assert_eq!(out(10), Some(10));
        assert_eq!(out(12), Some(16));
        assert_eq!(
            generate(&cfg, 12).unwrap().behavior.unwrap().parsed_integer,
            Some(8)
        );
    }

    #[test]
    fn unknown_wrong_digit_is_config_error() {
        let mut cfg = small().with_writer(3, 13, 6.0);
        cfg.digit_values = Some((1..=12).collect());
        assert!(matches!(generate(&cfg, 5), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = small().with_writer(3, 8, 6.0);
        let a = crate::container::encode_trace(&generate(&cfg, 9).unwrap()).unwrap();
        let b = crate::container::encode_trace(&generate(&cfg, 9).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_bias_delays_numeric() {
        let cfg = FixtureConfig {
            numeric_from_layer: Some(3),
            ..small()
        };
        let traj = lens::trajectory(&generate(&cfg, 6).unwrap()).unwrap();
        assert_eq!(traj.numeric_from_layer, Some(3));
    }

    #[test]
    fn intruders_lower_the_count() {
        let cfg = FixtureConfig {
            intruder_positions: vec![5],
            ..small()
        };
        let t = generate(&cfg, 10).unwrap();
        assert_eq!(t.expected_count(), 9);
        assert!(t.prompt_label.starts_with("P2"));
        assert_eq!(t.tokens.token_texts[t.tokens.list_span.start + 5], "banana");
    }

    #[test]
    fn small_model_still_valid() {
        let cfg = FixtureConfig {
            d_model: 8,
            ..small()
        };
        generate(&cfg, 4).unwrap().validate().unwrap();
    }
}
