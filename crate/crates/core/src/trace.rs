// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation-trace data model and validation.
//!
//! A trace holds one prompt's last-token residual states for every layer,
//! the last-token attention rows, the final-norm and unembedding weights,
//! the digit-token map and the greedy behavioral output. Traces are
//! validated as a whole before any analysis touches them; after that they
//! are immutable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for residual-stream continuity.
pub const DEFAULT_CONTINUITY_TOLERANCE: f64 = 1e-4;

/// Attention rows must sum to one within this tolerance.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-4;

/// Smallest and largest integer a digit-vocab entry may carry.
pub const DIGIT_VALUE_RANGE: std::ops::RangeInclusive<u32> = 1..=19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
}

/// Half-open range `[start, end)` of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRange {
    pub start: usize,
    pub end: usize,
}

impl SpanRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_ids: Vec<u32>,
    pub token_texts: Vec<String>,
    pub bos_index: Option<usize>,
    pub list_span: SpanRange,
    /// List-relative indices of intruder tokens.
    pub intruder_positions: Vec<usize>,
}

impl TokenRecord {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// One integer value and the vocabulary ids that spell it as a single token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitEntry {
    pub value: u32,
    pub token_ids: Vec<u32>,
    pub single_token: bool,
}

/// Integer-to-token map used by the logit lens. Values that have no
/// single-token spelling are simply absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DigitVocab {
    entries: Vec<DigitEntry>,
}

impl DigitVocab {
    /// Builds a vocab; entries are kept sorted by value.
    pub fn new(mut entries: Vec<DigitEntry>) -> Self {
        entries.sort_by_key(|e| e.value);
        Self { entries }
    }

    /// One single-token id per value.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(value, id)| DigitEntry {
                    value,
                    token_ids: vec![id],
                    single_token: true,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[DigitEntry] {
        &self.entries
    }

    /// Entries the lens may rank over.
    pub fn rankable(&self) -> impl Iterator<Item = &DigitEntry> {
        self.entries
            .iter()
            .filter(|e| e.single_token && !e.token_ids.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.rankable().next().is_none()
    }

    pub fn is_representable(&self, value: i64) -> bool {
        self.rankable().any(|e| i64::from(e.value) == value)
    }

    /// Every token id that spells some digit value.
    pub fn token_id_set(&self) -> BTreeSet<u32> {
        self.rankable()
            .flat_map(|e| e.token_ids.iter().copied())
            .collect()
    }

    pub fn values(&self) -> Vec<u32> {
        self.rankable().map(|e| e.value).collect()
    }
}

/// Last-token residual states of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub h_before: Vec<f32>,
    pub h_post_attn: Vec<f32>,
    pub h_post_layer: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub embedding_out: Vec<f32>,
    /// Entry `k` holds decoder layer `k + 1`.
    pub layers: Vec<LayerState>,
}

impl LayerStates {
    /// Decoder layer by 1-based index.
    pub fn layer(&self, index: usize) -> Option<&LayerState> {
        index.checked_sub(1).and_then(|k| self.layers.get(k))
    }

    /// Post-layer state; index 0 is the embedding output.
    pub fn post_layer(&self, index: usize) -> Option<&[f32]> {
        if index == 0 {
            Some(&self.embedding_out)
        } else {
            self.layer(index).map(|l| l.h_post_layer.as_slice())
        }
    }
}

/// Per-layer `[n_heads x seq_len]` last-token attention, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    pub n_heads: usize,
    pub seq_len: usize,
    /// Entry `k` holds decoder layer `k + 1`.
    pub layers: Vec<Vec<f32>>,
}

impl AttentionRows {
    pub fn head_row(&self, layer: usize, head: usize) -> Option<&[f32]> {
        let m = self.layers.get(layer.checked_sub(1)?)?;
        if head >= self.n_heads {
            return None;
        }
        m.get(head * self.seq_len..(head + 1) * self.seq_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnembedBlock {
    /// `[vocab_size x d_model]`, row-major.
    pub unembed: Vec<f32>,
    pub final_norm_weight: Vec<f32>,
    pub final_norm_bias: Option<Vec<f32>>,
}

impl UnembedBlock {
    pub fn row(&self, token: usize, d_model: usize) -> &[f32] {
        &self.unembed[token * d_model..(token + 1) * d_model]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehavioralRecord {
    pub final_output_text: String,
    pub parsed_integer: Option<i64>,
    pub decoding: String,
}

impl BehavioralRecord {
    pub const GREEDY: &'static str = "greedy";

    /// Record a greedy continuation, parsing its first integer literal.
    pub fn from_text(text: impl Into<String>) -> Self {
        let final_output_text = text.into();
        let parsed_integer = parse_first_integer(&final_output_text);
        Self {
            final_output_text,
            parsed_integer,
            decoding: Self::GREEDY.to_string(),
        }
    }
}

/// First integer literal in `text`, if any. A `-` directly before the
/// digits makes it negative.
pub fn parse_first_integer(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |k| start + k);
    let magnitude: i64 = text[start..end].parse().ok()?;
    if start > 0 && bytes[start - 1] == b'-' {
        Some(-magnitude)
    } else {
        Some(magnitude)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub meta: ModelMeta,
    pub tokens: TokenRecord,
    pub states: LayerStates,
    pub attn: AttentionRows,
    pub unembed: UnembedBlock,
    pub digits: DigitVocab,
    pub behavior: Option<BehavioralRecord>,
    pub prompt_label: String,
    /// Relative continuity tolerance; capture tools may relax it per model.
    pub continuity_tolerance: f64,
}

/// Outcome of comparing the list span against the expected word count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizationCheck {
    pub span_length: usize,
    pub expected_word_count: usize,
    pub pass: bool,
    pub delta: i64,
}

/// Compares the tokenized list length with the number of words in the payload.
pub fn verify_tokenization(tokens: &TokenRecord, expected_word_count: usize) -> TokenizationCheck {
    let span_length = tokens.list_span.len();
    TokenizationCheck {
        span_length,
        expected_word_count,
        pass: span_length == expected_word_count,
        delta: span_length as i64 - expected_word_count as i64,
    }
}

fn check_len(field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::validation(
            field,
            format!("expected length {want}, got {got}"),
        ));
    }
    Ok(())
}

fn check_finite(field: &str, xs: &[f32]) -> Result<()> {
    if let Some(k) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::data(
            field,
            format!("non-finite value {} at index {k}", xs[k]),
        ));
    }
    Ok(())
}

fn l2(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / ||b||`, with the denominator floored so zero states compare
/// absolutely.
pub fn relative_l2_distance(a: &[f32], b: &[f32]) -> f64 {
    let diff = l2(a.iter().zip(b).map(|(x, y)| f64::from(*x) - f64::from(*y)));
    let norm = l2(b.iter().map(|y| f64::from(*y)));
    diff / norm.max(1e-12)
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.meta.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.meta.d_model
    }

    /// The count the prompt asks for: list length minus intruders.
    pub fn expected_count(&self) -> i64 {
        self.tokens.list_span.len() as i64 - self.tokens.intruder_positions.len() as i64
    }

    pub fn verify_tokenization(&self, expected_word_count: usize) -> TokenizationCheck {
        verify_tokenization(&self.tokens, expected_word_count)
    }

    /// Checks every invariant of the trace and its parts.
    pub fn validate(&self) -> Result<()> {
        self.validate_meta()?;
        self.validate_tokens()?;
        self.validate_digits()?;
        self.validate_unembed()?;
        self.validate_states()?;
        self.validate_attention()?;
        self.validate_behavior()?;
        Ok(())
    }

    fn validate_meta(&self) -> Result<()> {
        let m = &self.meta;
        for (field, v) in [
            ("meta.n_layers", m.n_layers),
            ("meta.d_model", m.d_model),
            ("meta.n_heads", m.n_heads),
            ("meta.vocab_size", m.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !(m.norm_eps.is_finite() && m.norm_eps > 0.0) {
            return Err(Error::validation(
                "meta.norm_eps",
                "must be a positive real",
            ));
        }
        if !(self.continuity_tolerance.is_finite() && self.continuity_tolerance > 0.0) {
            return Err(Error::validation(
                "continuity_tolerance",
                "must be a positive real",
            ));
        }
        Ok(())
    }

    fn validate_tokens(&self) -> Result<()> {
        let t = &self.tokens;
        let seq_len = t.seq_len();
        check_len("tokens.token_texts", t.token_texts.len(), seq_len)?;
        if let Some(&bad) = t
            .token_ids
            .iter()
            .find(|&&id| id as usize >= self.meta.vocab_size)
        {
            return Err(Error::validation(
                "tokens.token_ids",
                format!("token id {bad} outside vocab of {}", self.meta.vocab_size),
            ));
        }
        let span = t.list_span;
        if !(span.start < span.end && span.end <= seq_len) {
            return Err(Error::validation(
                "tokens.list_span",
                format!(
                    "need 0 <= start < end <= seq_len ({seq_len}), got [{}, {})",
                    span.start, span.end
                ),
            ));
        }
        if let Some(bos) = t.bos_index {
            if bos >= seq_len || span.contains(bos) {
                return Err(Error::validation(
                    "tokens.bos_index",
                    format!("BOS index {bos} must lie in the sequence and outside the list span"),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for &p in &t.intruder_positions {
            if p >= span.len() {
                return Err(Error::validation(
                    "tokens.intruder_positions",
                    format!("position {p} outside list of length {}", span.len()),
                ));
            }
            if !seen.insert(p) {
                return Err(Error::validation(
                    "tokens.intruder_positions",
                    format!("duplicate position {p}"),
                ));
            }
        }
        Ok(())
    }

    fn validate_digits(&self) -> Result<()> {
        let mut values = BTreeSet::new();
        for e in self.digits.entries() {
            if !DIGIT_VALUE_RANGE.contains(&e.value) {
                return Err(Error::validation(
                    "digits",
                    format!("value {} outside 1..=19", e.value),
                ));
            }
            if !values.insert(e.value) {
                return Err(Error::validation(
                    "digits",
                    format!("duplicate value {}", e.value),
                ));
            }
            if let Some(id) = e
                .token_ids
                .iter()
                .find(|&&id| id as usize >= self.meta.vocab_size)
            {
                return Err(Error::validation(
                    "digits",
                    format!("token id {id} for value {} outside vocab", e.value),
                ));
            }
        }
        Ok(())
    }

    fn validate_unembed(&self) -> Result<()> {
        let d = self.meta.d_model;
        let u = &self.unembed;
        check_len("unembed", u.unembed.len(), self.meta.vocab_size * d)?;
        check_len("final_norm_weight", u.final_norm_weight.len(), d)?;
        check_finite("unembed", &u.unembed)?;
        check_finite("final_norm_weight", &u.final_norm_weight)?;
        if let Some(b) = &u.final_norm_bias {
            check_len("final_norm_bias", b.len(), d)?;
            check_finite("final_norm_bias", b)?;
        }
        Ok(())
    }

    fn validate_states(&self) -> Result<()> {
        let d = self.meta.d_model;
        let s = &self.states;
        check_len("states.embedding_out", s.embedding_out.len(), d)?;
        check_finite("states.embedding_out", &s.embedding_out)?;
        check_len("states.layers", s.layers.len(), self.meta.n_layers)?;
        for (k, layer) in s.layers.iter().enumerate() {
            let i = k + 1;
            for (name, v) in [
                ("h_before", &layer.h_before),
                ("h_post_attn", &layer.h_post_attn),
                ("h_post_layer", &layer.h_post_layer),
            ] {
                let field = format!("states.layer{i}.{name}");
                check_len(&field, v.len(), d)?;
                check_finite(&field, v)?;
            }
        }
        let mut prev = &s.embedding_out;
        for (k, layer) in s.layers.iter().enumerate() {
            let rel = relative_l2_distance(&layer.h_before, prev);
            if rel > self.continuity_tolerance {
                return Err(Error::validation(
                    format!("states.layer{}.h_before", k + 1),
                    format!(
                        "residual continuity violated: relative distance {rel:.3e} to previous \
                         post-layer state exceeds {:.1e}",
                        self.continuity_tolerance
                    ),
                ));
            }
            prev = &layer.h_post_layer;
        }
        Ok(())
    }

    fn validate_attention(&self) -> Result<()> {
        let a = &self.attn;
        let seq_len = self.tokens.seq_len();
        if a.n_heads != self.meta.n_heads {
            return Err(Error::validation(
                "attention",
                format!(
                    "n_heads {} != meta.n_heads {}",
                    a.n_heads, self.meta.n_heads
                ),
            ));
        }
        check_len("attention.seq_len", a.seq_len, seq_len)?;
        check_len("attention", a.layers.len(), self.meta.n_layers)?;
        for (k, m) in a.layers.iter().enumerate() {
            let field = format!("attention.layer{}", k + 1);
            check_len(&field, m.len(), a.n_heads * seq_len)?;
            check_finite(&field, m)?;
            for (h, row) in m.chunks_exact(seq_len).enumerate() {
                if let Some(p) = row.iter().position(|&w| w < 0.0) {
                    return Err(Error::validation(
                        format!("{field}.head{h}"),
                        format!("negative attention weight at position {p}"),
                    ));
                }
                let sum: f64 = row.iter().map(|&w| f64::from(w)).sum();
                if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
                    return Err(Error::validation(
                        format!("{field}.head{h}"),
                        format!("row sums to {sum}, expected 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_behavior(&self) -> Result<()> {
        if let Some(b) = &self.behavior {
            if b.decoding != BehavioralRecord::GREEDY {
                return Err(Error::validation(
                    "behavior.decoding",
                    format!("expected \"greedy\", got {:?}", b.decoding),
                ));
            }
            let parsed = parse_first_integer(&b.final_output_text);
            if b.parsed_integer.is_some() && b.parsed_integer != parsed {
                return Err(Error::validation(
                    "behavior.parsed_integer",
                    format!(
                        "{:?} does not match the integer in {:?}",
                        b.parsed_integer, b.final_output_text
                    ),
                ));
            }
        }
        Ok(())
    }
}
