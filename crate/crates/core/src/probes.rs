// SPDX-License-Identifier: MIT OR Apache-2.0

//! Leave-one-out ridge probes for the count.
//!
//! For every held-out sample a ridge model is refit on the remaining
//! samples. Features and targets are centered with the training-fold means
//! and the intercept is not penalized. When the state dimension exceeds the
//! number of training samples the fit is done in dual form on the Gram
//! matrix; otherwise the primal normal equations are solved. Both paths use
//! a Cholesky factorization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ActivationTrace;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCondition {
    Repeated,
    Unique,
}

impl ProbeCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeCondition::Repeated => "repeated",
            ProbeCondition::Unique => "unique",
        }
    }

    /// Infers the condition from a prompt label: labels mentioning `unique`
    /// or starting with `P3` are the unique-word condition.
    pub fn from_label(label: &str) -> Self {
        if label.contains("unique") || label.starts_with("P3") {
            ProbeCondition::Unique
        } else {
            ProbeCondition::Repeated
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub label: String,
    pub n: f64,
    /// Post-layer states, index 0 = embedding output.
    pub states: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub condition: ProbeCondition,
    pub samples: Vec<ProbeSample>,
    pub n_layers: usize,
    pub d_model: usize,
}

impl ProbeDataset {
    pub fn new(condition: ProbeCondition, samples: Vec<ProbeSample>) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::validation(
                "probe.samples",
                format!("need at least 3 samples, got {}", samples.len()),
            ));
        }
        let n_states = samples[0].states.len();
        if n_states == 0 {
            return Err(Error::validation(
                "probe.samples",
                "samples carry no states",
            ));
        }
        let d_model = samples[0].states[0].len();
        for s in &samples {
            if s.states.len() != n_states || s.states.iter().any(|v| v.len() != d_model) {
                return Err(Error::validation(
                    "probe.samples",
                    format!("sample {:?} has mismatched dimensions", s.label),
                ));
            }
        }
        let first = samples[0].n;
        if samples.iter().all(|s| s.n == first) {
            return Err(Error::Degenerate(
                "all probe labels are identical; R^2 is undefined".into(),
            ));
        }
        Ok(Self {
            condition,
            samples,
            n_layers: n_states - 1,
            d_model,
        })
    }

    /// Builds a dataset from traces, labelling each with its expected count.
    pub fn from_traces(condition: ProbeCondition, traces: &[ActivationTrace]) -> Result<Self> {
        let samples = traces
            .iter()
            .map(|t| ProbeSample {
                label: t.prompt_label.clone(),
                n: t.expected_count() as f64,
                states: (0..=t.n_layers())
                    .map(|i| t.states.post_layer(i).expect("layer in range").to_vec())
                    .collect(),
            })
            .collect();
        Self::new(condition, samples)
    }

    fn features(&self, layer: usize) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.states[layer].iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayerResult {
    pub layer_index: usize,
    pub mae: f64,
    pub r2: f64,
    pub n_samples: usize,
}

fn column_means(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in rows {
        for (acc, v) in m.iter_mut().zip(r.iter()) {
            *acc += v;
        }
    }
    let k = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= k);
    m
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))
}

/// Ridge prediction for `query` from a training set.
fn ridge_predict(train_x: &[&[f64]], train_y: &[f64], query: &[f64], lambda: f64) -> Result<f64> {
    let m = train_x.len();
    let d = query.len();
    let x_mean = column_means(train_x, d);
    let y_mean = train_y.iter().sum::<f64>() / m as f64;
    let xc = DMatrix::from_fn(m, d, |i, j| train_x[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(m, train_y.iter().map(|y| y - y_mean));
    let q = DVector::from_iterator(d, query.iter().zip(&x_mean).map(|(a, b)| a - b));

    let offset = if d > m {
        let mut gram = &xc * xc.transpose();
        for i in 0..m {
            gram[(i, i)] += lambda;
        }
        let alpha = solve_spd(gram, yc)?;
        let k = &xc * &q;
        k.dot(&alpha)
    } else {
        let mut cov = xc.transpose() * &xc;
        for i in 0..d {
            cov[(i, i)] += lambda;
        }
        let w = solve_spd(cov, xc.transpose() * yc)?;
        w.dot(&q)
    };
    Ok(y_mean + offset)
}

/// Leave-one-out predictions: entry `i` comes from a model fit without sample `i`.
pub fn loo_ridge_predictions(
    features: &[Vec<f64>],
    targets: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if features.len() != targets.len() || features.len() < 2 {
        return Err(Error::validation(
            "probe.samples",
            "need matching features and targets with at least two samples",
        ));
    }
    (0..features.len())
        .map(|i| {
            let train_x: Vec<&[f64]> = features
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, x)| x.as_slice())
                .collect();
            let train_y: Vec<f64> = targets
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &y)| y)
                .collect();
            ridge_predict(&train_x, &train_y, &features[i], lambda)
        })
        .collect()
}

/// MAE and R^2 of predictions; `R^2` uses the mean of all labels.
pub fn score(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("all labels equal; R^2 undefined".into()));
    }
    let mae = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n;
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).powi(2))
        .sum();
    Ok((mae, 1.0 - ss_res / ss_tot))
}

pub fn probe_layer(
    dataset: &ProbeDataset,
    layer_index: usize,
    lambda: f64,
) -> Result<ProbeLayerResult> {
    if layer_index > dataset.n_layers {
        return Err(Error::Usage(format!(
            "layer {layer_index} outside 0..={}",
            dataset.n_layers
        )));
    }
    let targets = dataset.targets();
    let preds = loo_ridge_predictions(&dataset.features(layer_index), &targets, lambda)?;
    let (mae, r2) = score(&preds, &targets)?;
    Ok(ProbeLayerResult {
        layer_index,
        mae,
        r2,
        n_samples: targets.len(),
    })
}

/// One condition's per-layer results, layers `0..=n_layers`.
pub fn probe_every_layer(dataset: &ProbeDataset, lambda: f64) -> Result<Vec<ProbeLayerResult>> {
    (0..=dataset.n_layers)
        .map(|l| probe_layer(dataset, l, lambda))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub lambda: f64,
    pub repeated: Vec<ProbeLayerResult>,
    pub unique: Vec<ProbeLayerResult>,
    /// Layers where the repeated condition decodes with lower MAE than unique.
    pub dissociation_layers: Vec<usize>,
}

impl ProbeTable {
    pub fn r2_at(&self, condition: ProbeCondition, layer: usize) -> Option<f64> {
        let rows = match condition {
            ProbeCondition::Repeated => &self.repeated,
            ProbeCondition::Unique => &self.unique,
        };
        rows.iter().find(|r| r.layer_index == layer).map(|r| r.r2)
    }
}

pub fn probe_all_layers(
    repeated: &ProbeDataset,
    unique: &ProbeDataset,
    lambda: f64,
) -> Result<ProbeTable> {
    let rep = probe_every_layer(repeated, lambda)?;
    let uni = probe_every_layer(unique, lambda)?;
    let dissociation_layers = rep
        .iter()
        .zip(&uni)
        .filter(|(r, u)| r.mae < u.mae)
        .map(|(r, _)| r.layer_index)
        .collect();
    Ok(ProbeTable {
        lambda,
        repeated: rep,
        unique: uni,
        dissociation_layers,
    })
}

/// Probe table for a single condition (the other side left empty).
pub fn probe_single_condition(dataset: &ProbeDataset, lambda: f64) -> Result<ProbeTable> {
    let rows = probe_every_layer(dataset, lambda)?;
    let (repeated, unique) = match dataset.condition {
        ProbeCondition::Repeated => (rows, Vec::new()),
        ProbeCondition::Unique => (Vec::new(), rows),
    };
    Ok(ProbeTable {
        lambda,
        repeated,
        unique,
        dissociation_layers: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: f64, state: Vec<f32>) -> ProbeSample {
        ProbeSample {
            label: format!("n{n}"),
            n,
            states: vec![state.clone(), state],
        }
    }

    #[test]
    fn collinear_three_samples_are_exact_in_small_lambda_limit() {
        let ds = ProbeDataset::new(
            ProbeCondition::Repeated,
            vec![
                sample(3.0, vec![3.0, 6.0]),
                sample(4.0, vec![4.0, 8.0]),
                sample(5.0, vec![5.0, 10.0]),
            ],
        )
        .unwrap();
        let r = probe_layer(&ds, 1, 1e-9).unwrap();
        assert!((r.r2 - 1.0).abs() < 1e-6, "r2 {}", r.r2);
        assert!(r.mae < 1e-6);
    }

    #[test]
    fn identical_labels_are_degenerate() {
        let err = ProbeDataset::new(
            ProbeCondition::Unique,
            vec![
                sample(4.0, vec![1.0]),
                sample(4.0, vec![2.0]),
                sample(4.0, vec![3.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn too_few_samples_and_mismatched_dims_rejected() {
        assert!(ProbeDataset::new(
            ProbeCondition::Repeated,
            vec![sample(1.0, vec![1.0]), sample(2.0, vec![2.0])]
        )
        .is_err());
        let err = ProbeDataset::new(
            ProbeCondition::Repeated,
            vec![
                sample(1.0, vec![1.0]),
                sample(2.0, vec![2.0, 1.0]),
                sample(3.0, vec![3.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn r2_of_mean_predictor_is_negative() {
        // Constant states: every fold predicts its training mean.
        let ds = ProbeDataset::new(
            ProbeCondition::Repeated,
            (3..=15).map(|n| sample(n as f64, vec![1.0, 2.0])).collect(),
        )
        .unwrap();
        let r = probe_layer(&ds, 0, 1.0).unwrap();
        // LOO mean predictor: residual_i = (y_i - mean) * N/(N-1).
        let n = 13.0f64;
        let expected = 1.0 - (n / (n - 1.0)).powi(2);
        assert!((r.r2 - expected).abs() < 1e-12, "{} vs {expected}", r.r2);
    }

    #[test]
    fn symmetric_conditions_have_no_dissociation() {
        let samples: Vec<ProbeSample> = (3..=9)
            .map(|n| sample(n as f64, vec![n as f32, (n * n) as f32 * 0.1]))
            .collect();
        let a = ProbeDataset::new(ProbeCondition::Repeated, samples.clone()).unwrap();
        let b = ProbeDataset::new(ProbeCondition::Unique, samples).unwrap();
        let t = probe_all_layers(&a, &b, 1.0).unwrap();
        assert!(t.dissociation_layers.is_empty());
        assert_eq!(t.repeated.len(), 2);
    }

    #[test]
    fn label_conditions() {
        assert_eq!(
            ProbeCondition::from_label("probe.unique.n05"),
            ProbeCondition::Unique
        );
        assert_eq!(
            ProbeCondition::from_label("P3.space.n10"),
            ProbeCondition::Unique
        );
        assert_eq!(
            ProbeCondition::from_label("probe.repeated.n05"),
            ProbeCondition::Repeated
        );
    }

    #[test]
    fn nonpositive_lambda_rejected() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(loo_ridge_predictions(&x, &[1.0, 2.0, 3.0], 0.0).is_err());
    }
}
