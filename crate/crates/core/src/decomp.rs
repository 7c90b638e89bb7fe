// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sublayer attribution of the attractor digit.
//!
//! Each decoder layer contributes three lens readings: the residual entering
//! the layer, after attention, and after the MLP. Comparing where the
//! attractor digit appears or disappears tells which sublayer wrote or
//! erased it. Also holds per-`n` invariance checks at a writer layer,
//! ablation outcome comparison and the paraphrase diagnostic table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{project_layer, StateTag};
use crate::trace::{ActivationTrace, BehavioralRecord};

/// Top digits of the three residual states of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitTriple {
    pub before: Option<u32>,
    pub post_attn: Option<u32>,
    pub post_layer: Option<u32>,
}

impl DigitTriple {
    pub fn new(before: u32, post_attn: u32, post_layer: u32) -> Self {
        Self {
            before: Some(before),
            post_attn: Some(post_attn),
            post_layer: Some(post_layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WriterLabel {
    MlpWrites,
    AttnWrites,
    ErasedByMlp,
    ErasedByAttn,
    Stable,
}

impl WriterLabel {
    /// Label in the four-way scheme used by published decomposition tables,
    /// where both erasure attributions collapse to "MLP E".
    pub fn table_label(self) -> &'static str {
        match self {
            WriterLabel::MlpWrites => "MLP",
            WriterLabel::AttnWrites => "ATT",
            WriterLabel::ErasedByMlp | WriterLabel::ErasedByAttn => "MLP E",
            WriterLabel::Stable => "---",
        }
    }
}

impl fmt::Display for WriterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WriterLabel::MlpWrites => "MLP_WRITES",
            WriterLabel::AttnWrites => "ATTN_WRITES",
            WriterLabel::ErasedByMlp => "ERASED_BY_MLP",
            WriterLabel::ErasedByAttn => "ERASED_BY_ATTN",
            WriterLabel::Stable => "STABLE",
        })
    }
}

/// Attributes a change of the attractor digit to a sublayer. Rules are
/// checked in order; anything else is `Stable`.
pub fn classify(digits: DigitTriple, attractor: u32) -> WriterLabel {
    let p = |x: Option<u32>| x == Some(attractor);
    let (b, a, l) = (p(digits.before), p(digits.post_attn), p(digits.post_layer));
    match (b, a, l) {
        (false, true, _) => WriterLabel::AttnWrites,
        (false, false, true) => WriterLabel::MlpWrites,
        (true, false, _) => WriterLabel::ErasedByAttn,
        (true, true, false) => WriterLabel::ErasedByMlp,
        _ => WriterLabel::Stable,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompRecord {
    pub layer_index: usize,
    pub digits: DigitTriple,
    pub writer_label: WriterLabel,
}

/// Lens readings of a layer's three states.
pub fn layer_digits(trace: &ActivationTrace, layer: usize) -> Result<DigitTriple> {
    Ok(DigitTriple {
        before: project_layer(trace, layer, StateTag::Before)?.top_digit,
        post_attn: project_layer(trace, layer, StateTag::PostAttn)?.top_digit,
        post_layer: project_layer(trace, layer, StateTag::PostLayer)?.top_digit,
    })
}

/// One record per layer of `layers` (1-based, inclusive).
pub fn decompose_range(
    trace: &ActivationTrace,
    layers: std::ops::RangeInclusive<usize>,
    attractor: u32,
) -> Result<Vec<DecompRecord>> {
    if layers.is_empty() {
        return Ok(Vec::new());
    }
    if *layers.start() == 0 || *layers.end() > trace.n_layers() {
        return Err(Error::Usage(format!(
            "layer range {}..={} outside 1..={}",
            layers.start(),
            layers.end(),
            trace.n_layers()
        )));
    }
    layers
        .map(|layer| {
            let digits = layer_digits(trace, layer)?;
            Ok(DecompRecord {
                layer_index: layer,
                digits,
                writer_label: classify(digits, attractor),
            })
        })
        .collect()
}

/// First layer at or after `from` whose MLP writes the attractor.
pub fn primary_writer(records: &[DecompRecord], from: usize) -> Option<usize> {
    records
        .iter()
        .find(|r| r.layer_index >= from && r.writer_label == WriterLabel::MlpWrites)
        .map(|r| r.layer_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerNRow {
    pub n: i64,
    pub digits: DigitTriple,
    pub writer_fired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceVerdict {
    /// The writer's input projects to the same digit at every `n` where it fires.
    CountInvariantInput,
    CountDependentInput,
    InsufficientData,
    /// The writer never fired.
    WriterSilent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerNInvariance {
    pub writer_layer: usize,
    pub attractor: u32,
    pub rows: Vec<PerNRow>,
    pub verdict: InvarianceVerdict,
}

/// Invariance verdict from per-`n` digit triples at the writer layer.
pub fn per_n_invariance(
    rows: &[(i64, DigitTriple)],
    writer_layer: usize,
    attractor: u32,
) -> Result<PerNInvariance> {
    let mut seen = BTreeSet::new();
    for (n, _) in rows {
        if !seen.insert(*n) {
            return Err(Error::validation("per_n", format!("duplicate n = {n}")));
        }
    }
    let mut out: Vec<PerNRow> = rows
        .iter()
        .map(|&(n, digits)| PerNRow {
            n,
            digits,
            writer_fired: classify(digits, attractor) == WriterLabel::MlpWrites,
        })
        .collect();
    out.sort_by_key(|r| r.n);
    let verdict = if out.len() < 2 {
        InvarianceVerdict::InsufficientData
    } else {
        let fired: BTreeSet<Option<u32>> = out
            .iter()
            .filter(|r| r.writer_fired)
            .map(|r| r.digits.before)
            .collect();
        match fired.len() {
            0 => InvarianceVerdict::WriterSilent,
            1 => InvarianceVerdict::CountInvariantInput,
            _ => InvarianceVerdict::CountDependentInput,
        }
    };
    Ok(PerNInvariance {
        writer_layer,
        attractor,
        rows: out,
        verdict,
    })
}

/// Same as [`per_n_invariance`], reading the triples from traces. Each
/// trace's `n` is its list length.
pub fn per_n_invariance_from_traces(
    traces: &[ActivationTrace],
    writer_layer: usize,
    attractor: u32,
) -> Result<PerNInvariance> {
    if let Some(first) = traces.first() {
        if traces
            .iter()
            .any(|t| t.meta.n_layers != first.meta.n_layers || t.meta.d_model != first.meta.d_model)
        {
            return Err(Error::validation(
                "per_n",
                "traces do not share model metadata",
            ));
        }
    }
    let rows = traces
        .iter()
        .map(|t| {
            Ok((
                t.tokens.list_span.len() as i64,
                layer_digits(t, writer_layer)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    per_n_invariance(&rows, writer_layer, attractor)
}

/// Which sublayer an ablation zeroes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Mlp,
    Attn,
}

/// A zero-ablation to be executed by whatever runs forward passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub layer_index: usize,
    pub sublayer: Sublayer,
    pub mode: String,
}

impl AblationSpec {
    pub const ZERO: &'static str = "zero";

    pub fn zero(layer_index: usize, sublayer: Sublayer) -> Self {
        Self {
            layer_index,
            sublayer,
            mode: Self::ZERO.to_string(),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer_index == 0 || self.layer_index > n_layers {
            return Err(Error::validation(
                "ablation.layer_index",
                format!("{} outside 1..={n_layers}", self.layer_index),
            ));
        }
        if self.mode != Self::ZERO {
            return Err(Error::validation(
                "ablation.mode",
                "only \"zero\" is supported",
            ));
        }
        Ok(())
    }

    /// Parses `LAYER:mlp:zero` / `LAYER:attn:zero`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Usage(format!("ablation {s:?} is not LAYER:mlp|attn:zero"));
        let [layer, sub, mode] = parts.as_slice() else {
            return Err(bad());
        };
        let layer_index = layer.parse().map_err(|_| bad())?;
        let sublayer = match *sub {
            "mlp" => Sublayer::Mlp,
            "attn" => Sublayer::Attn,
            _ => return Err(bad()),
        };
        if *mode != Self::ZERO {
            return Err(bad());
        }
        Ok(Self::zero(layer_index, sublayer))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n: i64,
    pub normal_output: Option<i64>,
    pub ablated_output: Option<i64>,
    pub correct: i64,
    pub fixed: bool,
    pub shift: bool,
}

/// Compares normal and ablated outputs for each `n`.
pub fn compare_ablation(
    normal: &BTreeMap<i64, BehavioralRecord>,
    ablated: &BTreeMap<i64, BehavioralRecord>,
    correct: &BTreeMap<i64, i64>,
) -> Result<Vec<AblationRow>> {
    let keys = |m: &BTreeMap<i64, BehavioralRecord>| m.keys().copied().collect::<Vec<_>>();
    if keys(normal) != keys(ablated) {
        return Err(Error::validation(
            "ablation",
            format!(
                "normal n set {:?} differs from ablated {:?}",
                keys(normal),
                keys(ablated)
            ),
        ));
    }
    normal
        .iter()
        .map(|(&n, rec)| {
            let correct = *correct.get(&n).ok_or_else(|| {
                Error::validation("ablation", format!("no correct answer for n = {n}"))
            })?;
            let normal_output = rec.parsed_integer;
            let ablated_output = ablated[&n].parsed_integer;
            Ok(AblationRow {
                n,
                normal_output,
                ablated_output,
                correct,
                fixed: ablated_output == Some(correct),
                shift: ablated_output != normal_output,
            })
        })
        .collect()
}

/// Top digit before and after one layer (MLP included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPair {
    pub before: Option<u32>,
    pub post_mlp: Option<u32>,
}

impl LayerPair {
    pub fn new(before: u32, post_mlp: u32) -> Self {
        Self {
            before: Some(before),
            post_mlp: Some(post_mlp),
        }
    }

    pub fn from_trace(trace: &ActivationTrace, layer: usize) -> Result<Self> {
        let d = layer_digits(trace, layer)?;
        Ok(Self {
            before: d.before,
            post_mlp: d.post_layer,
        })
    }

    /// The layer turned the top digit into the attractor.
    pub fn writes(&self, attractor: u32) -> bool {
        self.before != Some(attractor) && self.post_mlp == Some(attractor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub paraphrase: String,
    pub early: LayerPair,
    pub late: LayerPair,
    pub output: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRow {
    pub paraphrase: String,
    pub early: LayerPair,
    pub late: LayerPair,
    pub output: Option<i64>,
    pub correct: bool,
    pub early_writer_fired: bool,
    pub writer_fired: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseTable {
    pub early_layer: usize,
    pub late_layer: usize,
    pub attractor: u32,
    pub rows: Vec<ParaphraseRow>,
}

pub fn paraphrase_table(
    records: &[ParaphraseRecord],
    early_layer: usize,
    late_layer: usize,
    attractor: u32,
    correct_answer: i64,
) -> Result<ParaphraseTable> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.paraphrase.as_str()) {
            return Err(Error::validation(
                "paraphrase",
                format!("duplicate paraphrase label {:?}", r.paraphrase),
            ));
        }
    }
    let rows = records
        .iter()
        .map(|r| ParaphraseRow {
            paraphrase: r.paraphrase.clone(),
            early: r.early,
            late: r.late,
            output: r.output,
            correct: r.output == Some(correct_answer),
            early_writer_fired: r.early.writes(attractor),
            writer_fired: r.late.writes(attractor),
        })
        .collect();
    Ok(ParaphraseTable {
        early_layer,
        late_layer,
        attractor,
        rows,
    })
}
