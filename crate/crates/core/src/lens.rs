// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens over digit tokens.
//!
//! A residual state is pushed through the stored final norm and the
//! unembedding matrix. Ranking is restricted to the digit vocabulary; ties
//! go to the lower digit. Two per-layer views come out of a trajectory:
//! whether the full-vocabulary top token is a digit at all ("numeric from")
//! and which digit leads among digits ("lock-in").

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, DigitVocab, NormKind, UnembedBlock};

pub const TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateTag {
    Before,
    PostAttn,
    PostLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitProjection {
    pub layer_index: usize,
    pub state_tag: StateTag,
    pub top_digit: Option<u32>,
    /// Best digits, score descending; equal scores ordered by digit.
    pub top5: Vec<(u32, f64)>,
    /// Full-vocabulary argmax token id.
    pub top_token: u32,
    /// Whether `top_token` spells a digit value.
    pub numeric_top1: bool,
}

impl DigitProjection {
    pub fn in_top5(&self, digit: u32) -> bool {
        self.top5.iter().any(|&(d, _)| d == digit)
    }
}

/// Final-norm parameters and unembedding, borrowed from a trace.
#[derive(Debug, Clone, Copy)]
pub struct LensWeights<'a> {
    pub unembed: &'a UnembedBlock,
    pub digits: &'a DigitVocab,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl<'a> LensWeights<'a> {
    pub fn from_trace(trace: &'a ActivationTrace) -> Self {
        Self {
            unembed: &trace.unembed,
            digits: &trace.digits,
            norm_kind: trace.meta.norm_kind,
            norm_eps: trace.meta.norm_eps,
            d_model: trace.meta.d_model,
            vocab_size: trace.meta.vocab_size,
        }
    }
}

/// Applies the final norm to `state`.
pub fn apply_final_norm(
    state: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    kind: NormKind,
    eps: f64,
) -> Vec<f64> {
    let d = state.len() as f64;
    let x: Vec<f64> = state.iter().map(|&v| f64::from(v)).collect();
    let mut out: Vec<f64> = match kind {
        NormKind::Rms => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (ms + eps).sqrt();
            x.iter()
                .zip(weight)
                .map(|(v, &w)| v * inv * f64::from(w))
                .collect()
        }
        NormKind::Standard => {
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            x.iter()
                .zip(weight)
                .map(|(v, &w)| (v - mean) * inv * f64::from(w))
                .collect()
        }
    };
    if let Some(b) = bias {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += f64::from(bv);
        }
    }
    out
}

fn dot(row: &[f32], x: &[f64]) -> f64 {
    row.iter().zip(x).map(|(&a, b)| f64::from(a) * b).sum()
}

/// Projects one residual state onto the digit vocabulary.
pub fn project(
    state: &[f32],
    weights: &LensWeights<'_>,
    layer_index: usize,
    state_tag: StateTag,
) -> Result<DigitProjection> {
    if weights.digits.is_empty() {
        return Err(Error::Config("digit vocabulary is empty".into()));
    }
    if state.len() != weights.d_model {
        return Err(Error::validation(
            "state",
            format!("length {} != d_model {}", state.len(), weights.d_model),
        ));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("state", "non-finite value"));
    }
    let normed = apply_final_norm(
        state,
        &weights.unembed.final_norm_weight,
        weights.unembed.final_norm_bias.as_deref(),
        weights.norm_kind,
        weights.norm_eps,
    );
    let d = weights.d_model;

    let mut top_token = 0u32;
    let mut top_score = f64::NEG_INFINITY;
    for t in 0..weights.vocab_size {
        let s = dot(weights.unembed.row(t, d), &normed);
        if s > top_score {
            top_score = s;
            top_token = t as u32;
        }
    }

    let mut scored: Vec<(u32, f64)> = weights
        .digits
        .rankable()
        .map(|e| {
            let best = e
                .token_ids
                .iter()
                .map(|&id| dot(weights.unembed.row(id as usize, d), &normed))
                .fold(f64::NEG_INFINITY, f64::max);
            (e.value, best)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(TOP_K);

    Ok(DigitProjection {
        layer_index,
        state_tag,
        top_digit: scored.first().map(|&(d, _)| d),
        top5: scored,
        top_token,
        numeric_top1: weights.digits.token_id_set().contains(&top_token),
    })
}

/// Convenience wrapper: project a layer's state from a trace.
pub fn project_layer(
    trace: &ActivationTrace,
    layer_index: usize,
    tag: StateTag,
) -> Result<DigitProjection> {
    let weights = LensWeights::from_trace(trace);
    let state = match (layer_index, tag) {
        (0, StateTag::PostLayer) => &trace.states.embedding_out[..],
        _ => {
            let layer = trace.states.layer(layer_index).ok_or_else(|| {
                Error::Usage(format!(
                    "layer {layer_index} outside 1..={}",
                    trace.n_layers()
                ))
            })?;
            match tag {
                StateTag::Before => &layer.h_before[..],
                StateTag::PostAttn => &layer.h_post_attn[..],
                StateTag::PostLayer => &layer.h_post_layer[..],
            }
        }
    };
    project(state, &weights, layer_index, tag)
}

/// Where the lock-in target digit came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalAnswerSource {
    /// The recorded greedy output.
    Behavior,
    /// No behavior recorded; last layer's top digit used instead.
    Inferred,
    /// The recorded output has no single-token digit spelling.
    Unrepresentable,
    /// No behavior and the last layer does not project to a digit.
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTrajectory {
    pub n_layers: usize,
    /// Post-layer projections for layers `1..=n_layers`.
    pub layers: Vec<DigitProjection>,
    pub numeric_from_layer: Option<usize>,
    pub numeric_from_depth_pct: Option<f64>,
    pub lockin_layer: Option<usize>,
    pub lockin_depth_pct: Option<f64>,
    pub final_answer_digit: Option<u32>,
    pub final_answer_source: FinalAnswerSource,
}

/// `100 * layer / n_layers` with 1-based layers.
pub fn depth_pct(layer: usize, n_layers: usize) -> f64 {
    100.0 * layer as f64 / n_layers as f64
}

/// Smallest `L` such that `pred` holds for every entry from `L` on (1-based).
fn suffix_start(flags: impl DoubleEndedIterator<Item = bool> + ExactSizeIterator) -> Option<usize> {
    let n = flags.len();
    let run = flags.rev().take_while(|&f| f).count();
    (run > 0).then(|| n - run + 1)
}

pub fn trajectory(trace: &ActivationTrace) -> Result<LensTrajectory> {
    let n = trace.n_layers();
    let layers: Vec<DigitProjection> = (1..=n)
        .map(|i| project_layer(trace, i, StateTag::PostLayer))
        .collect::<Result<_>>()?;

    let numeric_from_layer = suffix_start(layers.iter().map(|p| p.numeric_top1));

    let last_top = layers.last().and_then(|p| p.top_digit);
    let (final_answer_digit, final_answer_source) =
        match trace.behavior.as_ref().and_then(|b| b.parsed_integer) {
            Some(v) if trace.digits.is_representable(v) => {
                (Some(v as u32), FinalAnswerSource::Behavior)
            }
            Some(_) => (None, FinalAnswerSource::Unrepresentable),
            None if last_top.is_some() && layers.last().is_some_and(|p| p.numeric_top1) => {
                (last_top, FinalAnswerSource::Inferred)
            }
            None => (None, FinalAnswerSource::Missing),
        };
    let lockin_layer = final_answer_digit
        .and_then(|target| suffix_start(layers.iter().map(|p| p.top_digit == Some(target))));

    Ok(LensTrajectory {
        n_layers: n,
        numeric_from_depth_pct: numeric_from_layer.map(|l| depth_pct(l, n)),
        lockin_depth_pct: lockin_layer.map(|l| depth_pct(l, n)),
        layers,
        numeric_from_layer,
        lockin_layer,
        final_answer_digit,
        final_answer_source,
    })
}

/// Per-layer result of looking for the correct answer among the top digits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "layers")]
pub enum Top5Presence {
    /// `true` where the answer is in the top five but is not the top digit.
    Layers(Vec<bool>),
    Unrepresentable,
}

pub fn correct_in_top5(
    trajectory: &LensTrajectory,
    digits: &DigitVocab,
    correct_answer: i64,
) -> Top5Presence {
    if !digits.is_representable(correct_answer) {
        return Top5Presence::Unrepresentable;
    }
    let c = correct_answer as u32;
    Top5Presence::Layers(
        trajectory
            .layers
            .iter()
            .map(|p| p.in_top5(c) && p.top_digit != Some(c))
            .collect(),
    )
}
