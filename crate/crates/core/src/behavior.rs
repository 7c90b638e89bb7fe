// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioral analytics: accuracy cells, attractor runs in `n`-sweeps and
//! intruder-detection sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{Condition, Delimiter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub condition: Condition,
    pub delimiter: Delimiter,
    pub output: Option<i64>,
    pub expected: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub condition: Condition,
    pub delimiter: Delimiter,
    pub accuracy_pct: f64,
    /// The deterministic wrong output, set when accuracy is 0%.
    pub wrong_value: Option<i64>,
    pub runs: usize,
    pub runs_agree: bool,
}

impl AccuracyCell {
    /// `100%` or `0% ("8")` style rendering.
    pub fn display(&self) -> String {
        match (self.accuracy_pct, self.wrong_value) {
            (0.0, Some(w)) => format!("0% (\"{w}\")"),
            (a, _) => format!("{a}%"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    /// Fails the repeated-token baseline.
    TypeC,
    /// Solves the baseline but misses the intruder.
    TypeA,
    Solved,
    /// Fails only the unique-word control.
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub cells: Vec<AccuracyCell>,
    pub model_type: ModelType,
    pub integrity_warnings: Vec<String>,
}

impl AccuracyTable {
    pub fn cell(&self, condition: Condition, delimiter: Delimiter) -> Option<&AccuracyCell> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.delimiter == delimiter)
    }
}

/// Collapses repeated runs per (condition, delimiter) cell. Greedy decoding
/// should make every run of a cell identical; disagreement is reported as
/// an integrity warning.
pub fn accuracy_table(records: &[AccuracyRecord]) -> AccuracyTable {
    let mut groups: BTreeMap<(Condition, Delimiter), Vec<&AccuracyRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.condition, r.delimiter))
            .or_default()
            .push(r);
    }
    let mut warnings = Vec::new();
    let cells: Vec<AccuracyCell> = groups
        .into_iter()
        .map(|((condition, delimiter), runs)| {
            let correct = runs.iter().filter(|r| r.output == Some(r.expected)).count();
            let runs_agree = runs
                .iter()
                .all(|r| r.output == runs[0].output && r.expected == runs[0].expected);
            if !runs_agree {
                warnings.push(format!(
                    "{condition:?}/{delimiter:?}: runs disagree under greedy decoding"
                ));
            }
            let accuracy_pct = 100.0 * correct as f64 / runs.len() as f64;
            AccuracyCell {
                condition,
                delimiter,
                accuracy_pct,
                wrong_value: if correct == 0 && runs_agree {
                    runs[0].output
                } else {
                    None
                },
                runs: runs.len(),
                runs_agree,
            }
        })
        .collect();
    let fails = |c: Condition| {
        cells
            .iter()
            .any(|cell| cell.condition == c && cell.accuracy_pct < 100.0)
    };
    let model_type = if fails(Condition::P1) {
        ModelType::TypeC
    } else if fails(Condition::P2) {
        ModelType::TypeA
    } else if fails(Condition::P3) {
        ModelType::Other
    } else {
        ModelType::Solved
    };
    AccuracyTable {
        cells,
        model_type,
        integrity_warnings: warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: i64,
    pub output: Option<i64>,
    pub correct: bool,
}

impl SweepPoint {
    /// A point of a repeated-token sweep, where the answer is `n` itself.
    pub fn new(n: i64, output: Option<i64>) -> Self {
        Self::with_expected(n, output, n)
    }

    pub fn with_expected(n: i64, output: Option<i64>, expected: i64) -> Self {
        Self {
            n,
            output,
            correct: output == Some(expected),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttractorSegment {
    pub value: Option<i64>,
    /// Inclusive range of sampled `n`.
    pub n_start: i64,
    pub n_end: i64,
    pub points: usize,
    pub wrong_points: usize,
    pub all_wrong: bool,
    /// Constant output that is wrong at a strict majority of its points.
    pub attractor: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttractorAnalysis {
    /// Maximal constant-output runs, in `n` order; they partition the sweep.
    pub segments: Vec<AttractorSegment>,
    pub first_failing_n: Option<i64>,
}

impl AttractorAnalysis {
    pub fn attractors(&self) -> impl Iterator<Item = &AttractorSegment> {
        self.segments.iter().filter(|s| s.attractor)
    }

    pub fn attractor_values(&self) -> Vec<i64> {
        self.attractors().filter_map(|s| s.value).collect()
    }
}

pub fn segment_attractors(sweep: &[SweepPoint]) -> Result<AttractorAnalysis> {
    if sweep.windows(2).any(|w| w[1].n <= w[0].n) {
        return Err(Error::Usage(
            "sweep n values must be strictly increasing".into(),
        ));
    }
    let mut segments: Vec<AttractorSegment> = Vec::new();
    for p in sweep {
        match segments.last_mut() {
            Some(s) if s.value == p.output => {
                s.n_end = p.n;
                s.points += 1;
                s.wrong_points += usize::from(!p.correct);
            }
            _ => segments.push(AttractorSegment {
                value: p.output,
                n_start: p.n,
                n_end: p.n,
                points: 1,
                wrong_points: usize::from(!p.correct),
                all_wrong: false,
                attractor: false,
            }),
        }
    }
    for s in &mut segments {
        s.all_wrong = s.wrong_points == s.points;
        s.attractor = s.value.is_some() && 2 * s.wrong_points > s.points;
    }
    Ok(AttractorAnalysis {
        segments,
        first_failing_n: sweep.iter().find(|p| !p.correct).map(|p| p.n),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySummary {
    pub expected_base: i64,
    pub detected_positions: Vec<usize>,
    pub min_intruders: Option<usize>,
    /// Every detected position sits in the back half of the list.
    pub recency: bool,
}

/// Summarizes intruder-position and intruder-count sweeps. A position (or
/// count) is "detected" when the output moves off `expected_base`.
pub fn anomaly_summary(
    position_sweep: &[(usize, Option<i64>)],
    count_sweep: &[(usize, Option<i64>)],
    expected_base: i64,
) -> Result<AnomalySummary> {
    if let Some(&(p, _)) = position_sweep
        .iter()
        .find(|&&(p, _)| p as i64 >= expected_base)
    {
        return Err(Error::Usage(format!(
            "intruder position {p} outside a list of {expected_base}"
        )));
    }
    if count_sweep.iter().any(|&(k, _)| k == 0) {
        return Err(Error::Usage("intruder counts start at 1".into()));
    }
    let mut detected_positions: Vec<usize> = position_sweep
        .iter()
        .filter(|&&(_, out)| out != Some(expected_base))
        .map(|&(p, _)| p)
        .collect();
    detected_positions.sort_unstable();
    detected_positions.dedup();
    let min_intruders = count_sweep
        .iter()
        .filter(|&&(_, out)| out != Some(expected_base))
        .map(|&(k, _)| k)
        .min();
    let half = (expected_base as usize).div_ceil(2);
    let recency = !detected_positions.is_empty() && detected_positions.iter().all(|&p| p >= half);
    Ok(AnomalySummary {
        expected_base,
        detected_positions,
        min_intruders,
        recency,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCaseRecord {
    pub label: String,
    pub output: Option<i64>,
    pub expected: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCaseResult {
    pub label: String,
    pub output: Option<i64>,
    pub expected: i64,
    pub pass: bool,
}

/// Sanity prompts (all intruders, one token) that confirm counting itself works.
pub fn edge_case_checks(records: &[EdgeCaseRecord]) -> Vec<EdgeCaseResult> {
    records
        .iter()
        .map(|r| EdgeCaseResult {
            label: r.label.clone(),
            output: r.output,
            expected: r.expected,
            pass: r.output == Some(r.expected),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(c: Condition, d: Delimiter, out: i64, exp: i64) -> AccuracyRecord {
        AccuracyRecord {
            condition: c,
            delimiter: d,
            output: Some(out),
            expected: exp,
        }
    }

    #[test]
    fn all_correct_is_solved() {
        let t = accuracy_table(&[
            rec(Condition::P1, Delimiter::Space, 10, 10),
            rec(Condition::P2, Delimiter::Space, 9, 9),
            rec(Condition::P3, Delimiter::Space, 10, 10),
        ]);
        assert_eq!(t.model_type, ModelType::Solved);
        assert!(t.cells.iter().all(|c| c.accuracy_pct == 100.0));
    }

    #[test]
    fn seed_disagreement_is_flagged() {
        let t = accuracy_table(&[
            rec(Condition::P1, Delimiter::Space, 10, 10),
            rec(Condition::P1, Delimiter::Space, 8, 10),
        ]);
        assert_eq!(t.integrity_warnings.len(), 1);
        assert_eq!(t.cells[0].accuracy_pct, 50.0);
        assert_eq!(t.cells[0].wrong_value, None);
    }

    #[test]
    fn fully_correct_sweep_has_no_attractors() {
        let sweep: Vec<SweepPoint> = (5..=12).map(|n| SweepPoint::new(n, Some(n))).collect();
        let a = segment_attractors(&sweep).unwrap();
        assert_eq!(a.attractors().count(), 0);
        assert_eq!(a.first_failing_n, None);
        assert_eq!(a.segments.len(), 8);
    }

    #[test]
    fn empty_sweep() {
        let a = segment_attractors(&[]).unwrap();
        assert!(a.segments.is_empty());
        assert!(a.first_failing_n.is_none());
    }

    #[test]
    fn unordered_sweep_rejected() {
        let sweep = [SweepPoint::new(6, Some(6)), SweepPoint::new(5, Some(5))];
        assert!(segment_attractors(&sweep).is_err());
    }

    #[test]
    fn every_position_detected_is_not_recency() {
        let pos: Vec<(usize, Option<i64>)> = (0..10).map(|p| (p, Some(9))).collect();
        let s = anomaly_summary(&pos, &[], 10).unwrap();
        assert_eq!(s.detected_positions.len(), 10);
        assert!(!s.recency);
        assert_eq!(s.min_intruders, None);
    }

    #[test]
    fn edge_cases() {
        let r = edge_case_checks(&[
            EdgeCaseRecord {
                label: "all_intruders".into(),
                output: Some(0),
                expected: 0,
            },
            EdgeCaseRecord {
                label: "single".into(),
                output: Some(2),
                expected: 1,
            },
        ]);
        assert!(r[0].pass);
        assert!(!r[1].pass);
    }
}
