// SPDX-License-Identifier: MIT OR Apache-2.0

//! Last-token attention over the word-list span.
//!
//! Rows are restricted to the list positions (BOS and prompt tokens drop
//! out) and renormalized. By default heads are averaged first and the mean
//! row is renormalized; [`HeadAggregation::PerHead`] renormalizes each head
//! before averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ActivationTrace;

pub const DEFAULT_RATIO_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    MeanThenNormalize,
    PerHead,
}

/// Natural-log entropy; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `min(p) / max(p)`: 1 for a uniform distribution, 0 when any position is empty.
pub fn uniformity(p: &[f64]) -> f64 {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return Err(Error::Degenerate(format!(
            "{what}: zero attention mass on the list span"
        )));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(v)
}

fn head_span(trace: &ActivationTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    let row = trace
        .attn
        .head_row(layer, head)
        .ok_or_else(|| Error::Usage(format!("layer {layer} / head {head} not in trace")))?;
    let span = trace.tokens.list_span;
    Ok(row[span.start..span.end]
        .iter()
        .map(|&w| f64::from(w))
        .collect())
}

/// Head-mean attention restricted to the span, before renormalization.
fn raw_mean_span(trace: &ActivationTrace, layer: usize) -> Result<Vec<f64>> {
    let span_len = trace.tokens.list_span.len();
    if span_len == 0 {
        return Err(Error::Precondition("list span is empty".into()));
    }
    let h = trace.meta.n_heads;
    let mut acc = vec![0.0; span_len];
    for head in 0..h {
        for (a, v) in acc.iter_mut().zip(head_span(trace, layer, head)?) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= h as f64);
    Ok(acc)
}

/// Renormalized last-token attention over list positions.
pub fn span_distribution(trace: &ActivationTrace, layer: usize) -> Result<Vec<f64>> {
    span_distribution_with(trace, layer, HeadAggregation::MeanThenNormalize)
}

pub fn span_distribution_with(
    trace: &ActivationTrace,
    layer: usize,
    aggregation: HeadAggregation,
) -> Result<Vec<f64>> {
    let what = format!("layer {layer}");
    match aggregation {
        HeadAggregation::MeanThenNormalize => normalize(raw_mean_span(trace, layer)?, &what),
        HeadAggregation::PerHead => {
            let h = trace.meta.n_heads;
            let mut acc = vec![0.0; trace.tokens.list_span.len()];
            let mut used = 0usize;
            for head in 0..h {
                // Heads with no span mass have no distribution to contribute.
                if let Ok(p) = normalize(head_span(trace, layer, head)?, &what) {
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                    used += 1;
                }
            }
            if used == 0 {
                return Err(Error::Degenerate(format!(
                    "{what}: zero attention mass on the list span"
                )));
            }
            acc.iter_mut().for_each(|a| *a /= used as f64);
            Ok(acc)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnLayerSummary {
    pub layer_index: usize,
    pub entropy: f64,
    pub uniformity: f64,
    pub argmax_list_pos: usize,
    /// Head-mean attention mass on the span before renormalization.
    pub span_mass: f64,
    /// Head-mean row puts its global maximum on BOS.
    pub bos_dominant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnSummaries {
    pub layers: Vec<AttnLayerSummary>,
    pub mean_entropy: f64,
    pub mean_uniformity: f64,
    pub bos_dominant_layers: usize,
}

fn global_mean_row(trace: &ActivationTrace, layer: usize) -> Vec<f64> {
    let seq_len = trace.attn.seq_len;
    let h = trace.meta.n_heads;
    let mut acc = vec![0.0; seq_len];
    for head in 0..h {
        if let Some(row) = trace.attn.head_row(layer, head) {
            acc.iter_mut()
                .zip(row)
                .for_each(|(a, &w)| *a += f64::from(w));
        }
    }
    acc.iter_mut().for_each(|a| *a /= h as f64);
    acc
}

pub fn layer_summary(
    trace: &ActivationTrace,
    layer: usize,
    aggregation: HeadAggregation,
) -> Result<AttnLayerSummary> {
    let raw = raw_mean_span(trace, layer)?;
    let p = span_distribution_with(trace, layer, aggregation)?;
    let bos_dominant = trace
        .tokens
        .bos_index
        .is_some_and(|bos| argmax(&global_mean_row(trace, layer)) == bos);
    Ok(AttnLayerSummary {
        layer_index: layer,
        entropy: entropy(&p),
        uniformity: uniformity(&p),
        argmax_list_pos: argmax(&p),
        span_mass: raw.iter().sum(),
        bos_dominant,
    })
}

pub fn layer_summaries(trace: &ActivationTrace) -> Result<AttnSummaries> {
    layer_summaries_with(trace, HeadAggregation::default())
}

pub fn layer_summaries_with(
    trace: &ActivationTrace,
    aggregation: HeadAggregation,
) -> Result<AttnSummaries> {
    let layers: Vec<AttnLayerSummary> = (1..=trace.n_layers())
        .map(|l| layer_summary(trace, l, aggregation))
        .collect::<Result<_>>()?;
    let k = layers.len() as f64;
    Ok(AttnSummaries {
        mean_entropy: layers.iter().map(|s| s.entropy).sum::<f64>() / k,
        mean_uniformity: layers.iter().map(|s| s.uniformity).sum::<f64>() / k,
        bos_dominant_layers: layers.iter().filter(|s| s.bos_dominant).count(),
        layers,
    })
}

/// Intruder weight over the mean weight of the other span positions.
pub fn intruder_ratio(p: &[f64], intruder_pos: usize) -> Result<f64> {
    if intruder_pos >= p.len() || p.len() < 2 {
        return Err(Error::Precondition(format!(
            "intruder position {intruder_pos} not inside a list of {}",
            p.len()
        )));
    }
    let others: f64 = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != intruder_pos)
        .map(|(_, &v)| v)
        .sum::<f64>()
        / (p.len() - 1) as f64;
    if others <= 0.0 {
        return Err(Error::Degenerate(
            "no attention on non-intruder positions".into(),
        ));
    }
    Ok(p[intruder_pos] / others)
}

/// Layers (as given) whose ratio exceeds `threshold`.
pub fn over_attended(ratios: &[(usize, f64)], threshold: f64) -> Vec<usize> {
    ratios
        .iter()
        .filter(|&&(_, r)| r > threshold)
        .map(|&(l, _)| l)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRatio {
    pub head: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeadRatios {
    pub layer_index: usize,
    pub mean_ratio: f64,
    pub heads: Vec<HeadRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLayer {
    pub layer_index: usize,
    pub ratio: f64,
    pub entropy_p2: f64,
    pub entropy_p1: f64,
    pub entropy_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyAttnSummary {
    pub intruder_pos: usize,
    pub threshold: f64,
    pub layers: Vec<AnomalyLayer>,
    pub over_attended_layers: Vec<usize>,
    pub per_head: Vec<LayerHeadRatios>,
}

/// Intruder-vs-rest attention ratios on a P2 trace, with entropy deltas
/// against the matching P1 trace.
pub fn anomaly_ratios(
    p2: &ActivationTrace,
    p1: &ActivationTrace,
    intruder_pos: Option<usize>,
    selected_layers: &[usize],
    threshold: f64,
) -> Result<AnomalyAttnSummary> {
    let intruder_pos = match intruder_pos {
        Some(p) => p,
        None => *p2
            .tokens
            .intruder_positions
            .first()
            .ok_or_else(|| Error::Precondition("P2 trace has no intruder positions".into()))?,
    };
    if p1.n_layers() != p2.n_layers() {
        return Err(Error::validation(
            "attention",
            "P1 and P2 traces have different depth",
        ));
    }
    let mut layers = Vec::with_capacity(p2.n_layers());
    for l in 1..=p2.n_layers() {
        let q = span_distribution(p2, l)?;
        let p = span_distribution(p1, l)?;
        let (h2, h1) = (entropy(&q), entropy(&p));
        layers.push(AnomalyLayer {
            layer_index: l,
            ratio: intruder_ratio(&q, intruder_pos)?,
            entropy_p2: h2,
            entropy_p1: h1,
            entropy_delta: h2 - h1,
        });
    }
    let ratios: Vec<(usize, f64)> = layers.iter().map(|a| (a.layer_index, a.ratio)).collect();
    let per_head = selected_layers
        .iter()
        .map(|&l| {
            let heads = (0..p2.meta.n_heads)
                .map(|h| {
                    let p = normalize(head_span(p2, l, h)?, &format!("layer {l} head {h}"))?;
                    Ok(HeadRatio {
                        head: h,
                        ratio: intruder_ratio(&p, intruder_pos)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerHeadRatios {
                layer_index: l,
                mean_ratio: intruder_ratio(&span_distribution(p2, l)?, intruder_pos)?,
                heads,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyAttnSummary {
        intruder_pos,
        threshold,
        over_attended_layers: over_attended(&ratios, threshold),
        layers,
        per_head,
    })
}

/// The `k` layers with the smallest intruder ratio, ascending by ratio.
pub fn most_ignoring_layers(summary: &AnomalyAttnSummary, k: usize) -> Vec<usize> {
    let mut v: Vec<&AnomalyLayer> = summary.layers.iter().collect();
    v.sort_by(|a, b| {
        a.ratio
            .total_cmp(&b.ratio)
            .then(a.layer_index.cmp(&b.layer_index))
    });
    v.into_iter().take(k).map(|a| a.layer_index).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_extremes() {
        let u = vec![0.1; 10];
        assert!((entropy(&u) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(uniformity(&u), 1.0);
        let mut one = vec![0.0; 10];
        one[3] = 1.0;
        assert_eq!(entropy(&one), 0.0);
        assert_eq!(uniformity(&one), 0.0);
        assert_eq!(argmax(&one), 3);
    }

    #[test]
    fn two_point_entropy_delta() {
        // Moving mass between two positions of an otherwise uniform row.
        let p1 = vec![0.1; 10];
        let mut p2 = p1.clone();
        p2[0] = 0.15;
        p2[1] = 0.05;
        let closed = -(0.15f64 * 0.15f64.ln() + 0.05 * 0.05f64.ln()) + 2.0 * 0.1 * 0.1f64.ln();
        assert!((entropy(&p2) - entropy(&p1) - closed).abs() < 1e-12);
    }

    #[test]
    fn uniform_ratio_is_one() {
        for pos in 0..10 {
            assert!((intruder_ratio(&[0.1; 10], pos).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(intruder_ratio(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let r = [(1, 1.5), (2, 1.5000001), (3, 0.2)];
        assert_eq!(over_attended(&r, 1.5), vec![2]);
    }
}
