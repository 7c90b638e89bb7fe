// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report assembly: runs every analysis named in a run config, joins the
//! results into a [`DiagnosisReport`] and renders JSON, Markdown and CSV.
//!
//! Run config (JSON, paths relative to the config file):
//!
//! ```json
//! {
//!   "model_id": "llama-1b",
//!   "lambda": 1.0, "r2_threshold": 0.95, "ratio_threshold": 1.5,
//!   "probe": { "repeated": "probe/repeated", "unique": "probe/unique" },
//!   "lens": { "trace": "baseline.rscope" },
//!   "decomp": {
//!     "attractor": 8, "layers": [1, 28], "writer_layer": 22,
//!     "per_n": "per_n",
//!     "ablation": { "normal": "per_n", "ablated": "ablated" },
//!     "paraphrase": { "dir": "paraphrase", "early_layer": 11, "late_layer": 26 }
//!   },
//!   "attention": {
//!     "traces": "attention",
//!     "anomaly": { "p2": "attention/p2.rscope", "p1": "baseline.rscope", "layers": [28] }
//!   },
//!   "behavior": "behavior.json"
//! }
//! ```
//!
//! Every section is optional. A section whose inputs are absent is emitted
//! with `"status": "skipped"` and its reason.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attn::{
    anomaly_ratios, layer_summaries_with, AnomalyAttnSummary, AttnSummaries, HeadAggregation,
    DEFAULT_RATIO_THRESHOLD,
};
use crate::behavior::{
    accuracy_table, anomaly_summary, edge_case_checks, segment_attractors, AccuracyRecord,
    AccuracyTable, AnomalySummary, AttractorAnalysis, EdgeCaseRecord, EdgeCaseResult, SweepPoint,
};
use crate::container::{list_trace_files, read_trace, read_trace_dir};
use crate::decomp::{
    compare_ablation, decompose_range, paraphrase_table, per_n_invariance_from_traces,
    primary_writer, AblationRow, DecompRecord, LayerPair, ParaphraseRecord, ParaphraseTable,
    PerNInvariance, WriterLabel,
};
use crate::error::{Error, Result};
use crate::lens::{correct_in_top5, trajectory, LensTrajectory, Top5Presence};
use crate::probes::{
    probe_all_layers, probe_single_condition, ProbeCondition, ProbeDataset, ProbeTable,
    DEFAULT_LAMBDA,
};
use crate::trace::ActivationTrace;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_R2_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    RepresentationFailure,
    RoutingFailure,
    Solved,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RepresentationFailure => "representation_failure",
            Self::RoutingFailure => "routing_failure",
            Self::Solved => "solved",
            Self::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub claim: String,
    pub source: String,
}

fn evidence(claim: String, source: &str) -> Evidence {
    Evidence {
        claim,
        source: source.to_string(),
    }
}

/// A report section that either ran or was skipped for lack of input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Section<T> {
    Ok(T),
    Skipped { reason: String },
}

impl<T> Section<T> {
    pub fn get(&self) -> Option<&T> {
        match self {
            Section::Ok(t) => Some(t),
            Section::Skipped { .. } => None,
        }
    }

    fn skipped(reason: impl Into<String>) -> Self {
        Section::Skipped {
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub table: ProbeTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSection {
    pub prompt_label: String,
    pub trajectory: LensTrajectory,
    pub correct_answer: i64,
    pub output: Option<i64>,
    pub correct_in_top5: Top5Presence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompSection {
    pub prompt_label: String,
    pub attractor: u32,
    pub records: Vec<DecompRecord>,
    pub primary_writer: Option<usize>,
    pub per_n: Option<PerNInvariance>,
    pub ablation: Option<Vec<AblationRow>>,
    pub paraphrase: Option<ParaphraseTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAttention {
    pub prompt_label: String,
    pub summaries: AttnSummaries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSection {
    pub aggregation: HeadAggregation,
    pub traces: Vec<TraceAttention>,
    pub anomaly: Option<AnomalyAttnSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSection {
    pub accuracy: Option<AccuracyTable>,
    pub attractors: Option<AttractorAnalysis>,
    pub anomaly: Option<AnomalySummary>,
    pub edge_cases: Vec<EdgeCaseResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub lambda: f64,
    pub r2_threshold: f64,
    pub ratio_threshold: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            r2_threshold: DEFAULT_R2_THRESHOLD,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub report_version: u32,
    pub model_id: String,
    pub settings: Settings,
    pub probe_section: Section<ProbeSection>,
    pub lens_section: Section<LensSection>,
    pub decomp_section: Section<DecompSection>,
    pub attention_section: Section<AttentionSection>,
    pub behavior_section: Section<BehaviorSection>,
    pub verdict: Verdict,
    pub evidence: Vec<Evidence>,
    /// One entry per skipped section, naming the missing input.
    pub skipped: Vec<String>,
}

/// Joins probe, lens and decomposition results into a verdict.
///
/// A correct output is `solved` whatever the internals. A routing failure
/// needs a decodable count at the lock-in layer, a lock-in, and an MLP
/// writing the attractor at or after the first numeric layer. A
/// representation failure needs a wrong output and sub-threshold R² at every
/// late layer.
pub fn verdict(
    probe: Option<&ProbeTable>,
    traj: Option<&LensTrajectory>,
    decomp: Option<&[DecompRecord]>,
    behavior_correct: Option<bool>,
    r2_threshold: f64,
) -> (Verdict, Vec<Evidence>) {
    let mut ev = Vec::new();
    if behavior_correct == Some(true) {
        ev.push(evidence(
            "final output equals the expected count".into(),
            "lens",
        ));
        return (Verdict::Solved, ev);
    }
    if behavior_correct == Some(false) {
        ev.push(evidence(
            "final output differs from the expected count".into(),
            "lens",
        ));
    }
    let r2_at = |layer: usize| {
        probe.and_then(|p| {
            p.r2_at(ProbeCondition::Repeated, layer)
                .or_else(|| p.r2_at(ProbeCondition::Unique, layer))
        })
    };
    let numeric_from = traj.and_then(|t| t.numeric_from_layer).unwrap_or(1);

    if let (Some(t), Some(lockin)) = (traj, traj.and_then(|t| t.lockin_layer)) {
        let writer = decomp.and_then(|recs| primary_writer(recs, numeric_from));
        let r2 = r2_at(lockin);
        if let (Some(r2), Some(w)) = (r2, writer) {
            if r2 >= r2_threshold {
                ev.push(evidence(
                    format!(
                        "probe R² = {r2:.4} at lock-in layer {lockin} (threshold {r2_threshold})"
                    ),
                    "probe",
                ));
                ev.push(evidence(
                    format!(
                        "lock-in at layer {lockin} of {} ({:.2}% depth)",
                        t.n_layers,
                        t.lockin_depth_pct.unwrap_or(f64::NAN)
                    ),
                    "lens",
                ));
                ev.push(evidence(
                    format!(
                        "MLP writes the attractor at layer {w} (numeric from layer {numeric_from})"
                    ),
                    "decomp",
                ));
                return (Verdict::RoutingFailure, ev);
            }
        }
    }

    if behavior_correct == Some(false) {
        if let (Some(p), Some(t)) = (probe, traj) {
            let late_from = t.numeric_from_layer.unwrap_or(t.n_layers.div_ceil(2));
            let late: Vec<f64> = (late_from..=t.n_layers).filter_map(&r2_at).collect();
            if !late.is_empty() && late.iter().all(|&r| r < r2_threshold) {
                let best = late.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ev.push(evidence(
                    format!(
                        "probe R² below {r2_threshold} at every layer from {late_from} (best {best:.4}, lambda {})",
                        p.lambda
                    ),
                    "probe",
                ));
                return (Verdict::RepresentationFailure, ev);
            }
        }
    }
    ev.push(evidence(
        "joint routing condition not met and representation not ruled out".into(),
        "report",
    ));
    (Verdict::Inconclusive, ev)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeInputs {
    #[serde(default)]
    pub repeated: Option<PathBuf>,
    #[serde(default)]
    pub unique: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensInputs {
    pub trace: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationInputs {
    pub normal: PathBuf,
    pub ablated: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParaphraseInputs {
    pub dir: PathBuf,
    pub early_layer: usize,
    pub late_layer: usize,
    #[serde(default)]
    pub correct_answer: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompInputs {
    /// Defaults to the lens trace.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Inclusive 1-based layer range; defaults to every layer.
    #[serde(default)]
    pub layers: Option<(usize, usize)>,
    /// Defaults to the baseline trace's recorded output.
    #[serde(default)]
    pub attractor: Option<u32>,
    #[serde(default)]
    pub writer_layer: Option<usize>,
    #[serde(default)]
    pub per_n: Option<PathBuf>,
    #[serde(default)]
    pub ablation: Option<AblationInputs>,
    #[serde(default)]
    pub paraphrase: Option<ParaphraseInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyInputs {
    pub p2: PathBuf,
    pub p1: PathBuf,
    #[serde(default)]
    pub intruder_pos: Option<usize>,
    /// Layers that get a per-head ratio table.
    #[serde(default)]
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionInputs {
    #[serde(default)]
    pub traces: Option<PathBuf>,
    #[serde(default)]
    pub anomaly: Option<AnomalyInputs>,
    #[serde(default)]
    pub aggregation: HeadAggregation,
}

/// Behavioral outputs gathered by a capture run (or synthesized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorInput {
    #[serde(default)]
    pub accuracy: Vec<AccuracyRecord>,
    #[serde(default)]
    pub n_sweep: Vec<SweepEntry>,
    /// `(position, output)` pairs.
    #[serde(default)]
    pub intruder_positions: Vec<(usize, Option<i64>)>,
    /// `(count, output)` pairs.
    #[serde(default)]
    pub intruder_counts: Vec<(usize, Option<i64>)>,
    #[serde(default = "default_base")]
    pub expected_base: i64,
    #[serde(default)]
    pub edge_cases: Vec<EdgeCaseRecord>,
}

fn default_base() -> i64 {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub n: i64,
    pub output: Option<i64>,
    /// Defaults to `n`.
    #[serde(default)]
    pub expected: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub r2_threshold: Option<f64>,
    #[serde(default)]
    pub ratio_threshold: Option<f64>,
    #[serde(default)]
    pub probe: Option<ProbeInputs>,
    #[serde(default)]
    pub lens: Option<LensInputs>,
    #[serde(default)]
    pub decomp: Option<DecompInputs>,
    #[serde(default)]
    pub attention: Option<AttentionInputs>,
    #[serde(default)]
    pub behavior: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Config values over defaults.
    pub fn settings(&self) -> Settings {
        let d = Settings::default();
        Settings {
            lambda: self.lambda.unwrap_or(d.lambda),
            r2_threshold: self.r2_threshold.unwrap_or(d.r2_threshold),
            ratio_threshold: self.ratio_threshold.unwrap_or(d.ratio_threshold),
        }
    }
}

fn check_settings(s: &Settings) -> Result<()> {
    if !(s.lambda.is_finite() && s.lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    if !s.r2_threshold.is_finite() {
        return Err(Error::Config("r2_threshold must be finite".into()));
    }
    if !(s.ratio_threshold.is_finite() && s.ratio_threshold > 0.0) {
        return Err(Error::Config("ratio_threshold must be positive".into()));
    }
    Ok(())
}

/// Loads every trace in `dir`, or `None` when the directory is missing or
/// holds no traces.
fn traces_in(dir: &Path) -> Result<Option<Vec<ActivationTrace>>> {
    if !dir.is_dir() || list_trace_files(dir)?.is_empty() {
        return Ok(None);
    }
    read_trace_dir(dir).map(Some)
}

fn trace_at(path: &Path) -> Result<Option<ActivationTrace>> {
    if !path.is_file() {
        return Ok(None);
    }
    read_trace(path).map(Some)
}

fn missing(path: &Path) -> String {
    format!("missing traces: {}", path.display())
}

struct Runner<'a> {
    base: &'a Path,
    settings: Settings,
    skipped: Vec<String>,
}

impl Runner<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn skip<T>(&mut self, section: &str, reason: String) -> Section<T> {
        self.skipped.push(format!("{section}: {reason}"));
        Section::skipped(reason)
    }

    fn probe(&mut self, inputs: Option<&ProbeInputs>) -> Result<Section<ProbeSection>> {
        let Some(inputs) = inputs else {
            return Ok(self.skip("probe", "not configured".into()));
        };
        let mut load = |p: &Option<PathBuf>, c: ProbeCondition| -> Result<Option<ProbeDataset>> {
            let Some(p) = p else { return Ok(None) };
            let path = self.path(p);
            match traces_in(&path)? {
                Some(ts) => ProbeDataset::from_traces(c, &ts).map(Some),
                None => {
                    self.skipped
                        .push(format!("probe.{}: {}", c.as_str(), missing(&path)));
                    Ok(None)
                }
            }
        };
        let rep = load(&inputs.repeated, ProbeCondition::Repeated)?;
        let uni = load(&inputs.unique, ProbeCondition::Unique)?;
        let lambda = self.settings.lambda;
        let table = match (rep, uni) {
            (Some(r), Some(u)) => probe_all_layers(&r, &u, lambda)?,
            (Some(d), None) | (None, Some(d)) => probe_single_condition(&d, lambda)?,
            (None, None) => return Ok(Section::skipped("no probe traces found")),
        };
        Ok(Section::Ok(ProbeSection { table }))
    }

    fn lens(
        &mut self,
        baseline: Option<&(PathBuf, Option<ActivationTrace>)>,
    ) -> Result<Section<LensSection>> {
        let trace = match baseline {
            None => return Ok(self.skip("lens", "not configured".into())),
            Some((p, None)) => return Ok(self.skip("lens", missing(p))),
            Some((_, Some(t))) => t,
        };
        let traj = trajectory(trace)?;
        let correct = trace.expected_count();
        Ok(Section::Ok(LensSection {
            prompt_label: trace.prompt_label.clone(),
            correct_in_top5: correct_in_top5(&traj, &trace.digits, correct),
            trajectory: traj,
            correct_answer: correct,
            output: trace.behavior.as_ref().and_then(|b| b.parsed_integer),
        }))
    }

    fn decomp(
        &mut self,
        inputs: Option<&DecompInputs>,
        baseline: Option<&(PathBuf, Option<ActivationTrace>)>,
        numeric_from: Option<usize>,
    ) -> Result<Section<DecompSection>> {
        let default = DecompInputs::default();
        let inputs = inputs.unwrap_or(&default);
        let own;
        let trace = match (&inputs.trace, baseline) {
            (Some(p), _) => {
                let path = self.path(p);
                match trace_at(&path)? {
                    Some(t) => {
                        own = t;
                        &own
                    }
                    None => return Ok(self.skip("decomp", missing(&path))),
                }
            }
            (None, Some((_, Some(t)))) => t,
            (None, Some((p, None))) => return Ok(self.skip("decomp", missing(p))),
            (None, None) => return Ok(self.skip("decomp", "no trace configured".into())),
        };
        let attractor = match inputs.attractor {
            Some(a) => a,
            None => match trace.behavior.as_ref().and_then(|b| b.parsed_integer) {
                Some(v) if trace.digits.is_representable(v) => v as u32,
                _ => {
                    return Ok(self.skip(
                        "decomp",
                        "no attractor: recorded output is absent or not a single-token digit"
                            .into(),
                    ))
                }
            },
        };
        let (lo, hi) = inputs.layers.unwrap_or((1, trace.n_layers()));
        let records = decompose_range(trace, lo..=hi, attractor)?;
        let writer = primary_writer(&records, numeric_from.unwrap_or(1));
        let writer_layer = inputs.writer_layer.or(writer);

        let per_n = match (&inputs.per_n, writer_layer) {
            (Some(p), Some(w)) => {
                let path = self.path(p);
                match traces_in(&path)? {
                    Some(ts) => Some(per_n_invariance_from_traces(&ts, w, attractor)?),
                    None => {
                        self.skipped
                            .push(format!("decomp.per_n: {}", missing(&path)));
                        None
                    }
                }
            }
            (Some(_), None) => {
                self.skipped
                    .push("decomp.per_n: no writer layer found or configured".into());
                None
            }
            (None, _) => None,
        };

        let ablation = match &inputs.ablation {
            Some(a) => {
                let (np, ap) = (self.path(&a.normal), self.path(&a.ablated));
                match (traces_in(&np)?, traces_in(&ap)?) {
                    (Some(normal), Some(ablated)) => Some(ablation_rows(&normal, &ablated)?),
                    (n, _) => {
                        let p = if n.is_none() { np } else { ap };
                        self.skipped
                            .push(format!("decomp.ablation: {}", missing(&p)));
                        None
                    }
                }
            }
            None => None,
        };

        let paraphrase = match &inputs.paraphrase {
            Some(pi) => {
                let path = self.path(&pi.dir);
                match traces_in(&path)? {
                    Some(ts) => {
                        let correct = pi.correct_answer.unwrap_or(ts[0].expected_count());
                        let recs = ts
                            .iter()
                            .map(|t| {
                                Ok(ParaphraseRecord {
                                    paraphrase: paraphrase_name(&t.prompt_label),
                                    early: LayerPair::from_trace(t, pi.early_layer)?,
                                    late: LayerPair::from_trace(t, pi.late_layer)?,
                                    output: t.behavior.as_ref().and_then(|b| b.parsed_integer),
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(paraphrase_table(
                            &recs,
                            pi.early_layer,
                            pi.late_layer,
                            attractor,
                            correct,
                        )?)
                    }
                    None => {
                        self.skipped
                            .push(format!("decomp.paraphrase: {}", missing(&path)));
                        None
                    }
                }
            }
            None => None,
        };

        Ok(Section::Ok(DecompSection {
            prompt_label: trace.prompt_label.clone(),
            attractor,
            records,
            primary_writer: writer,
            per_n,
            ablation,
            paraphrase,
        }))
    }

    fn attention(&mut self, inputs: Option<&AttentionInputs>) -> Result<Section<AttentionSection>> {
        let Some(inputs) = inputs else {
            return Ok(self.skip("attention", "not configured".into()));
        };
        let mut traces = Vec::new();
        if let Some(p) = &inputs.traces {
            let path = self.path(p);
            match traces_in(&path)? {
                Some(ts) => {
                    for t in &ts {
                        traces.push(TraceAttention {
                            prompt_label: t.prompt_label.clone(),
                            summaries: layer_summaries_with(t, inputs.aggregation)?,
                        });
                    }
                }
                None => self
                    .skipped
                    .push(format!("attention.traces: {}", missing(&path))),
            }
        }
        let anomaly = match &inputs.anomaly {
            Some(a) => {
                let (p2, p1) = (self.path(&a.p2), self.path(&a.p1));
                match (trace_at(&p2)?, trace_at(&p1)?) {
                    (Some(t2), Some(t1)) => Some(anomaly_ratios(
                        &t2,
                        &t1,
                        a.intruder_pos,
                        &a.layers,
                        self.settings.ratio_threshold,
                    )?),
                    (t2, _) => {
                        let p = if t2.is_none() { p2 } else { p1 };
                        self.skipped
                            .push(format!("attention.anomaly: {}", missing(&p)));
                        None
                    }
                }
            }
            None => None,
        };
        if traces.is_empty() && anomaly.is_none() {
            return Ok(Section::skipped("no attention traces found"));
        }
        Ok(Section::Ok(AttentionSection {
            aggregation: inputs.aggregation,
            traces,
            anomaly,
        }))
    }

    fn behavior(&mut self, input: Option<&PathBuf>) -> Result<Section<BehaviorSection>> {
        let Some(p) = input else {
            return Ok(self.skip("behavior", "not configured".into()));
        };
        let path = self.path(p);
        if !path.is_file() {
            return Ok(self.skip("behavior", format!("missing file: {}", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let input: BehaviorInput = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Section::Ok(behavior_section(&input)?))
    }
}

/// Runs the behavioral analytics over one input record.
pub fn behavior_section(input: &BehaviorInput) -> Result<BehaviorSection> {
    let accuracy = (!input.accuracy.is_empty()).then(|| accuracy_table(&input.accuracy));
    let attractors = if input.n_sweep.is_empty() {
        None
    } else {
        let pts: Vec<SweepPoint> = input
            .n_sweep
            .iter()
            .map(|e| SweepPoint::with_expected(e.n, e.output, e.expected.unwrap_or(e.n)))
            .collect();
        Some(segment_attractors(&pts)?)
    };
    let anomaly = if input.intruder_positions.is_empty() && input.intruder_counts.is_empty() {
        None
    } else {
        Some(anomaly_summary(
            &input.intruder_positions,
            &input.intruder_counts,
            input.expected_base,
        )?)
    };
    Ok(BehaviorSection {
        accuracy,
        attractors,
        anomaly,
        edge_cases: edge_case_checks(&input.edge_cases),
    })
}

/// `paraphrase.how_many.n10` → `how_many`; other labels pass through.
pub fn paraphrase_name(label: &str) -> String {
    let rest = label.strip_prefix("paraphrase.").unwrap_or(label);
    match rest.rsplit_once('.') {
        Some((name, tail)) if tail.starts_with('n') && tail[1..].parse::<u64>().is_ok() => {
            name.to_string()
        }
        _ => rest.to_string(),
    }
}

/// Pairs normal and ablated traces by list length.
pub fn ablation_rows(
    normal: &[ActivationTrace],
    ablated: &[ActivationTrace],
) -> Result<Vec<AblationRow>> {
    let index = |ts: &[ActivationTrace]| -> Result<BTreeMap<i64, crate::trace::BehavioralRecord>> {
        let mut m = BTreeMap::new();
        for t in ts {
            let n = t.tokens.list_span.len() as i64;
            let b = t.behavior.clone().ok_or_else(|| {
                Error::validation(
                    "ablation",
                    format!("trace {} has no behavior", t.prompt_label),
                )
            })?;
            if m.insert(n, b).is_some() {
                return Err(Error::validation("ablation", format!("duplicate n = {n}")));
            }
        }
        Ok(m)
    };
    let correct: BTreeMap<i64, i64> = normal
        .iter()
        .map(|t| (t.tokens.list_span.len() as i64, t.expected_count()))
        .collect();
    compare_ablation(&index(normal)?, &index(ablated)?, &correct)
}

/// Runs every configured analysis. Paths resolve against `base_dir`.
pub fn run_config(
    config: &RunConfig,
    base_dir: &Path,
    settings: Settings,
) -> Result<DiagnosisReport> {
    check_settings(&settings)?;
    let mut r = Runner {
        base: base_dir,
        settings: settings.clone(),
        skipped: Vec::new(),
    };
    let baseline = match &config.lens {
        Some(l) => {
            let p = r.path(&l.trace);
            let t = trace_at(&p)?;
            Some((p, t))
        }
        None => None,
    };
    let probe_section = r.probe(config.probe.as_ref())?;
    let lens_section = r.lens(baseline.as_ref())?;
    let numeric_from = lens_section
        .get()
        .and_then(|l| l.trajectory.numeric_from_layer);
    let decomp_section = r.decomp(config.decomp.as_ref(), baseline.as_ref(), numeric_from)?;
    let attention_section = r.attention(config.attention.as_ref())?;
    let behavior_section = r.behavior(config.behavior.as_ref())?;

    let behavior_correct = lens_section
        .get()
        .map(|l| l.output == Some(l.correct_answer));
    let (verdict, evidence) = verdict(
        probe_section.get().map(|p| &p.table),
        lens_section.get().map(|l| &l.trajectory),
        decomp_section.get().map(|d| d.records.as_slice()),
        behavior_correct,
        settings.r2_threshold,
    );
    let model_id = config
        .model_id
        .clone()
        .or_else(|| {
            baseline
                .as_ref()
                .and_then(|(_, t)| t.as_ref())
                .map(|t| t.meta.model_id.clone())
        })
        .unwrap_or_else(|| "unknown".into());
    Ok(DiagnosisReport {
        report_version: REPORT_VERSION,
        model_id,
        settings,
        probe_section,
        lens_section,
        decomp_section,
        attention_section,
        behavior_section,
        verdict,
        evidence,
        skipped: r.skipped,
    })
}

/// Loads a run config, runs it, and writes `report.json` and `report.md`
/// into `out_dir`.
pub fn run(
    config_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    overrides: &SettingsOverride,
) -> Result<DiagnosisReport> {
    let config_path = config_path.as_ref();
    let config = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let settings = overrides.apply(config.settings());
    let report = run_config(&config, base, settings)?;
    write_report(&report, out_dir)?;
    Ok(report)
}

/// Command-line overrides applied on top of config values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SettingsOverride {
    pub lambda: Option<f64>,
    pub r2_threshold: Option<f64>,
    pub ratio_threshold: Option<f64>,
}

impl SettingsOverride {
    pub fn apply(&self, s: Settings) -> Settings {
        Settings {
            lambda: self.lambda.unwrap_or(s.lambda),
            r2_threshold: self.r2_threshold.unwrap_or(s.r2_threshold),
            ratio_threshold: self.ratio_threshold.unwrap_or(s.ratio_threshold),
        }
    }
}

pub fn to_json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_report(report: &DiagnosisReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("report.json");
    fs::write(&json, to_json(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let md = out.join("report.md");
    fs::write(&md, to_markdown(report)).map_err(|e| Error::io(&md, e))?;
    Ok(())
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}

fn digit(x: Option<u32>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn skipped_line<T>(out: &mut String, s: &Section<T>) -> bool {
    if let Section::Skipped { reason } = s {
        let _ = writeln!(out, "_skipped: {reason}_\n");
        return true;
    }
    false
}

pub fn probe_markdown(t: &ProbeTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "lambda = {}\n", t.lambda);
    let _ = writeln!(
        out,
        "| Layer | R² repeated | MAE repeated | R² unique | MAE unique |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|");
    let n = t.repeated.len().max(t.unique.len());
    for i in 0..n {
        let r = t.repeated.get(i);
        let u = t.unique.get(i);
        let layer = r.or(u).map(|x| x.layer_index).unwrap_or(i);
        let _ = writeln!(
            out,
            "| {layer} | {} | {} | {} | {} |",
            opt(r.map(|x| f4(x.r2))),
            opt(r.map(|x| f4(x.mae))),
            opt(u.map(|x| f4(x.r2))),
            opt(u.map(|x| f4(x.mae))),
        );
    }
    if !t.dissociation_layers.is_empty() {
        let _ = writeln!(
            out,
            "\nRepeated decodes better than unique at layers {:?}.",
            t.dissociation_layers
        );
    }
    out
}

pub fn lens_markdown(l: &LensSection) -> String {
    let t = &l.trajectory;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Prompt `{}`: output {}, correct {}.\n",
        l.prompt_label,
        opt(l.output),
        l.correct_answer
    );
    let _ = writeln!(
        out,
        "Numeric from layer {} ({}%), lock-in layer {} ({}%).\n",
        opt(t.numeric_from_layer),
        opt(t.numeric_from_depth_pct.map(|d| format!("{d:.2}"))),
        opt(t.lockin_layer),
        opt(t.lockin_depth_pct.map(|d| format!("{d:.2}"))),
    );
    let flags = match &l.correct_in_top5 {
        Top5Presence::Layers(v) => Some(v),
        Top5Presence::Unrepresentable => None,
    };
    let _ = writeln!(
        out,
        "| Layer | Top digit | Top-5 digits | Numeric top-1 | Correct outranked in top-5 |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|");
    for (i, p) in t.layers.iter().enumerate() {
        let top5: Vec<String> = p.top5.iter().map(|(d, _)| d.to_string()).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            p.layer_index,
            digit(p.top_digit),
            top5.join(" "),
            yes_no(p.numeric_top1),
            flags.map_or("n/a", |f| yes_no(f[i])),
        );
    }
    out
}

pub fn decomp_markdown(d: &DecompSection) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Prompt `{}`, attractor {}.\n",
        d.prompt_label, d.attractor
    );
    let _ = writeln!(out, "| Layer | Before | Post-attn | Post-layer | Writer |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for r in &d.records {
        let _ = writeln!(
            out,
            "| L{} | {} | {} | {} | {} |",
            r.layer_index,
            digit(r.digits.before),
            digit(r.digits.post_attn),
            digit(r.digits.post_layer),
            r.writer_label.table_label()
        );
    }
    let _ = writeln!(
        out,
        "\nPrimary writer: {}.",
        opt(d.primary_writer.map(|l| format!("L{l}")))
    );
    if let Some(p) = &d.per_n {
        let _ = writeln!(
            out,
            "\n### Per-n at L{} ({:?})\n",
            p.writer_layer, p.verdict
        );
        let _ = writeln!(
            out,
            "| n | h_before | Post-attn | Post-MLP | Writer fired |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|");
        for r in &p.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.n,
                digit(r.digits.before),
                digit(r.digits.post_attn),
                digit(r.digits.post_layer),
                yes_no(r.writer_fired)
            );
        }
    }
    if let Some(rows) = &d.ablation {
        let _ = writeln!(out, "\n### Ablation\n");
        let _ = writeln!(out, "| n | Normal | Ablated | Correct | Fixed? | Shift? |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for r in rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                r.n,
                opt(r.normal_output),
                opt(r.ablated_output),
                r.correct,
                yes_no(r.fixed),
                yes_no(r.shift)
            );
        }
    }
    if let Some(p) = &d.paraphrase {
        let _ = writeln!(out, "\n### Paraphrases (attractor {})\n", p.attractor);
        let _ = writeln!(
            out,
            "| Paraphrase | L{e} before | L{e} post-MLP | L{l} before | L{l} post-MLP | Output | Correct | Writer fired |",
            e = p.early_layer,
            l = p.late_layer
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        for r in &p.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.paraphrase,
                digit(r.early.before),
                digit(r.early.post_mlp),
                digit(r.late.before),
                digit(r.late.post_mlp),
                opt(r.output),
                yes_no(r.correct),
                yes_no(r.writer_fired)
            );
        }
    }
    out
}

pub fn attention_markdown(a: &AttentionSection) -> String {
    let mut out = String::new();
    if !a.traces.is_empty() {
        let _ = writeln!(
            out,
            "| Trace | Mean entropy | Mean uniformity | BOS-dominant layers |"
        );
        let _ = writeln!(out, "|---|---|---|---|");
        for t in &a.traces {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {}/{} |",
                t.prompt_label,
                f4(t.summaries.mean_entropy),
                f4(t.summaries.mean_uniformity),
                t.summaries.bos_dominant_layers,
                t.summaries.layers.len()
            );
        }
    }
    if let Some(an) = &a.anomaly {
        let _ = writeln!(
            out,
            "\nIntruder at list position {}; over-attended (ratio > {}) at layers {:?}.\n",
            an.intruder_pos, an.threshold, an.over_attended_layers
        );
        let _ = writeln!(out, "| Layer | Ratio | Entropy P2 | Entropy P1 | Delta |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for l in &an.layers {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                l.layer_index,
                f4(l.ratio),
                f4(l.entropy_p2),
                f4(l.entropy_p1),
                f4(l.entropy_delta)
            );
        }
        for h in &an.per_head {
            let heads: Vec<String> = h
                .heads
                .iter()
                .map(|x| format!("H{}={}", x.head, f4(x.ratio)))
                .collect();
            let _ = writeln!(
                out,
                "\nL{} head ratios (mean {}): {}",
                h.layer_index,
                f4(h.mean_ratio),
                heads.join(", ")
            );
        }
    }
    out
}

pub fn behavior_markdown(b: &BehaviorSection) -> String {
    let mut out = String::new();
    if let Some(t) = &b.accuracy {
        let _ = writeln!(out, "| Condition | Delimiter | Accuracy | Runs |");
        let _ = writeln!(out, "|---|---|---|---|");
        for c in &t.cells {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                c.condition,
                c.delimiter.as_str(),
                c.display(),
                c.runs
            );
        }
        let _ = writeln!(out, "\nModel type: {:?}.", t.model_type);
        for w in &t.integrity_warnings {
            let _ = writeln!(out, "\nWarning: {w}");
        }
    }
    if let Some(a) = &b.attractors {
        let _ = writeln!(out, "\nFirst failing n: {}.\n", opt(a.first_failing_n));
        let _ = writeln!(out, "| Output | n range | Points | Wrong | Attractor |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for s in &a.segments {
            let _ = writeln!(
                out,
                "| {} | {}-{} | {} | {} | {} |",
                opt(s.value),
                s.n_start,
                s.n_end,
                s.points,
                s.wrong_points,
                yes_no(s.attractor)
            );
        }
    }
    if let Some(a) = &b.anomaly {
        let _ = writeln!(
            out,
            "\nIntruder detected at positions {:?}; fewest intruders detected: {}; recency: {}.",
            a.detected_positions,
            opt(a.min_intruders),
            yes_no(a.recency)
        );
    }
    if !b.edge_cases.is_empty() {
        let _ = writeln!(out, "\n| Edge case | Output | Expected | Pass |");
        let _ = writeln!(out, "|---|---|---|---|");
        for e in &b.edge_cases {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                e.label,
                opt(e.output),
                e.expected,
                yes_no(e.pass)
            );
        }
    }
    out
}

/// Markdown projection of a report. Every number shown comes from the JSON.
pub fn to_markdown(r: &DiagnosisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Diagnosis: {}\n", r.model_id);
    let _ = writeln!(out, "Verdict: **{}**\n", r.verdict.as_str());
    for e in &r.evidence {
        let _ = writeln!(out, "- {} ({})", e.claim, e.source);
    }
    let _ = writeln!(
        out,
        "\nSettings: lambda {}, R² threshold {}, ratio threshold {}.\n",
        r.settings.lambda, r.settings.r2_threshold, r.settings.ratio_threshold
    );
    let _ = writeln!(out, "## Probes\n");
    if !skipped_line(&mut out, &r.probe_section) {
        out += &probe_markdown(&r.probe_section.get().expect("present").table);
    }
    let _ = writeln!(out, "\n## Logit lens\n");
    if !skipped_line(&mut out, &r.lens_section) {
        out += &lens_markdown(r.lens_section.get().expect("present"));
    }
    let _ = writeln!(out, "\n## Sublayer decomposition\n");
    if !skipped_line(&mut out, &r.decomp_section) {
        out += &decomp_markdown(r.decomp_section.get().expect("present"));
    }
    let _ = writeln!(out, "\n## Attention\n");
    if !skipped_line(&mut out, &r.attention_section) {
        out += &attention_markdown(r.attention_section.get().expect("present"));
    }
    let _ = writeln!(out, "\n## Behavior\n");
    if !skipped_line(&mut out, &r.behavior_section) {
        out += &behavior_markdown(r.behavior_section.get().expect("present"));
    }
    if !r.skipped.is_empty() {
        let _ = writeln!(out, "\n## Skipped inputs\n");
        for s in &r.skipped {
            let _ = writeln!(out, "- {s}");
        }
    }
    out
}

pub fn probe_csv(t: &ProbeTable) -> String {
    let mut out = String::from("condition,layer,r2,mae,n_samples\n");
    for (c, rows) in [("repeated", &t.repeated), ("unique", &t.unique)] {
        for r in rows {
            let _ = writeln!(
                out,
                "{c},{},{},{},{}",
                r.layer_index, r.r2, r.mae, r.n_samples
            );
        }
    }
    out
}

pub fn lens_csv(t: &LensTrajectory) -> String {
    let mut out = String::from("layer,top_digit,top5,top_token,numeric_top1\n");
    for p in &t.layers {
        let top5: Vec<String> = p.top5.iter().map(|(d, _)| d.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.layer_index,
            digit(p.top_digit),
            top5.join(" "),
            p.top_token,
            p.numeric_top1
        );
    }
    out
}

pub fn decomp_csv(records: &[DecompRecord]) -> String {
    let mut out = String::from("layer,before,post_attn,post_layer,writer_label\n");
    for r in records {
        let label = match r.writer_label {
            WriterLabel::MlpWrites => "MLP_WRITES",
            WriterLabel::AttnWrites => "ATTN_WRITES",
            WriterLabel::ErasedByAttn => "ERASED_BY_ATTN",
            WriterLabel::ErasedByMlp => "ERASED_BY_MLP",
            WriterLabel::Stable => "STABLE",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{label}",
            r.layer_index,
            digit(r.digits.before),
            digit(r.digits.post_attn),
            digit(r.digits.post_layer)
        );
    }
    out
}

pub fn attention_csv(a: &AttentionSection) -> String {
    let mut out = String::from(
        "prompt_label,layer,entropy,uniformity,argmax_list_pos,span_mass,bos_dominant\n",
    );
    for t in &a.traces {
        for l in &t.summaries.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.prompt_label,
                l.layer_index,
                l.entropy,
                l.uniformity,
                l.argmax_list_pos,
                l.span_mass,
                l.bos_dominant
            );
        }
    }
    out
}

pub fn anomaly_csv(a: &AnomalyAttnSummary) -> String {
    let mut out = String::from("layer,ratio,entropy_p2,entropy_p1,entropy_delta,over_attended\n");
    for l in &a.layers {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.layer_index,
            l.ratio,
            l.entropy_p2,
            l.entropy_p1,
            l.entropy_delta,
            l.ratio > a.threshold
        );
    }
    out
}

/// Attractor segments of the n-sweep; empty body when no sweep was given.
pub fn behavior_csv(b: &BehaviorSection) -> String {
    let mut out = String::from("value,n_start,n_end,points,wrong_points,all_wrong,attractor\n");
    for s in b.attractors.iter().flat_map(|a| &a.segments) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            opt(s.value),
            s.n_start,
            s.n_end,
            s.points,
            s.wrong_points,
            s.all_wrong,
            s.attractor
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{DigitProjection, FinalAnswerSource, StateTag};
    use crate::probes::ProbeLayerResult;

    fn table(r2: f64, layers: usize) -> ProbeTable {
        ProbeTable {
            lambda: 1.0,
            repeated: (0..=layers)
                .map(|l| ProbeLayerResult {
                    layer_index: l,
                    mae: 0.1,
                    r2,
                    n_samples: 13,
                })
                .collect(),
            unique: Vec::new(),
            dissociation_layers: Vec::new(),
        }
    }

    fn traj(lockin: Option<usize>, n: usize) -> LensTrajectory {
        LensTrajectory {
            n_layers: n,
            layers: (1..=n)
                .map(|l| DigitProjection {
                    layer_index: l,
                    state_tag: StateTag::PostLayer,
                    top_digit: Some(8),
                    top5: vec![(8, 1.0)],
                    top_token: 8,
                    numeric_top1: true,
                })
                .collect(),
            numeric_from_layer: Some(1),
            numeric_from_depth_pct: Some(100.0 / n as f64),
            lockin_layer: lockin,
            lockin_depth_pct: lockin.map(|l| 100.0 * l as f64 / n as f64),
            final_answer_digit: Some(8),
            final_answer_source: FinalAnswerSource::Behavior,
        }
    }

    fn writer_at(layer: usize) -> Vec<DecompRecord> {
        use crate::decomp::DigitTriple;
        vec![DecompRecord {
            layer_index: layer,
            digits: DigitTriple::new(10, 10, 8),
            writer_label: WriterLabel::MlpWrites,
        }]
    }

    #[test]
    fn routing_failure() {
        let (v, ev) = verdict(
            Some(&table(0.99, 4)),
            Some(&traj(Some(3), 4)),
            Some(&writer_at(3)),
            Some(false),
            0.95,
        );
        assert_eq!(v, Verdict::RoutingFailure);
        assert!(ev.iter().any(|e| e.source == "decomp"));
    }

    #[test]
    fn representation_failure() {
        let (v, _) = verdict(
            Some(&table(0.3, 4)),
            Some(&traj(None, 4)),
            Some(&[]),
            Some(false),
            0.95,
        );
        assert_eq!(v, Verdict::RepresentationFailure);
    }

    #[test]
    fn correct_output_is_solved() {
        let (v, _) = verdict(
            Some(&table(0.99, 4)),
            Some(&traj(Some(3), 4)),
            Some(&writer_at(3)),
            Some(true),
            0.95,
        );
        assert_eq!(v, Verdict::Solved);
    }

    #[test]
    fn low_r2_at_lockin_is_not_routing() {
        let (v, _) = verdict(
            Some(&table(0.5, 4)),
            Some(&traj(Some(3), 4)),
            Some(&writer_at(3)),
            None,
            0.95,
        );
        assert_eq!(v, Verdict::Inconclusive);
    }

    #[test]
    fn paraphrase_names() {
        assert_eq!(paraphrase_name("paraphrase.how_many.n10"), "how_many");
        assert_eq!(paraphrase_name("tally"), "tally");
        assert_eq!(paraphrase_name("paraphrase.list_first"), "list_first");
    }

    #[test]
    fn empty_config_skips_everything() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_config(&RunConfig::default(), dir.path(), Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.skipped.len(), 5);
        let md = to_markdown(&r);
        assert!(md.contains("_skipped: not configured_"));
    }

    #[test]
    fn unknown_config_field_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"probes": {}}"#);
        assert!(e.is_err());
    }
}
