//! Linear flow decoder: standardised metric subsets mapped to flow intensity
//! by least squares, scored by leave-one-out cross-validation.

mod ols;

use serde::{Deserialize, Serialize};

pub use ols::{solve as least_squares, LeastSquares};

use crate::error::{Error, Result};
use crate::metrics::{single_trial_metrics, MetricKind, MetricsVector, ScaleParams};
use crate::task::TrialRecord;

/// Largest number of metrics a decoder may use.
pub const MAX_SUBSET_SIZE: usize = 4;

/// The three probe questions, shown verbatim to participants.
pub const PROBE_QUESTIONS: [&str; 3] = [
    "My thoughts/activities run fluidly and smoothly.",
    "I have no difficulty concentrating.",
    "I do not notice time passing.",
];

/// One self-report event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProbe {
    /// 1-based probe number.
    pub probe_index: usize,
    /// 0-based index of the main-session trial after which the probe fired.
    pub trial_index: usize,
    pub responses: [u8; 3],
    /// Mean of the three responses.
    pub intensity: f64,
}

impl FlowProbe {
    pub fn new(probe_index: usize, trial_index: usize, responses: [u8; 3]) -> Result<Self> {
        if let Some(r) = responses.iter().find(|r| !(1..=7).contains(*r)) {
            return Err(Error::invalid(format!("probe response {r} outside 1..7")));
        }
        let intensity = responses.iter().map(|&r| r as f64).sum::<f64>() / 3.0;
        Ok(Self {
            probe_index,
            trial_index,
            responses,
            intensity,
        })
    }
}

pub fn probe_intensities(probes: &[FlowProbe]) -> Vec<f64> {
    probes.iter().map(|p| p.intensity).collect()
}

/// Fitted decoder. Metrics are standardised with the stored parameters before
/// the weights are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderModel {
    pub subset: Vec<MetricKind>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardization: Vec<ScaleParams>,
}

impl DecoderModel {
    /// Standardised subset values of `metrics`.
    pub fn features(&self, metrics: &MetricsVector) -> Vec<f64> {
        self.subset
            .iter()
            .zip(&self.standardization)
            .map(|(k, s)| s.apply(metrics.get(*k)))
            .collect()
    }

    /// Prediction from already standardised features.
    pub fn predict_standardized(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.intercept
    }
}

fn check_subset(subset: &[MetricKind]) -> Result<()> {
    if subset.is_empty() || subset.len() > MAX_SUBSET_SIZE {
        return Err(Error::invalid(format!(
            "subset must hold 1..={MAX_SUBSET_SIZE} metrics, got {}",
            subset.len()
        )));
    }
    if subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("subset must be strictly ordered without repeats"));
    }
    Ok(())
}

/// Least-squares fit of `labels` on the standardised `subset` of `metrics`.
pub fn fit(labels: &[f64], metrics: &[MetricsVector], subset: &[MetricKind]) -> Result<DecoderModel> {
    check_subset(subset)?;
    if labels.len() != metrics.len() {
        return Err(Error::invalid("labels and metrics differ in length"));
    }
    if labels.len() < subset.len() + 2 {
        return Err(Error::insufficient(format!(
            "{} probes for a {}-metric decoder (need {})",
            labels.len(),
            subset.len(),
            subset.len() + 2
        )));
    }
    let standardization = subset
        .iter()
        .map(|k| {
            let column: Vec<f64> = metrics.iter().map(|m| m.get(*k)).collect();
            let s = ScaleParams::fit(&column)?;
            if s.is_degenerate() {
                return Err(Error::DegenerateFit(format!("metric {k} is constant across probes")));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = metrics
        .iter()
        .map(|m| {
            let mut row: Vec<f64> = subset.iter().zip(&standardization).map(|(k, s)| s.apply(m.get(*k))).collect();
            row.push(1.0);
            row
        })
        .collect();
    let sol = ols::solve(&rows, labels)?;
    let mut weights = sol.coefficients;
    let intercept = weights.pop().expect("intercept column");
    if weights.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
        return Err(Error::DegenerateFit("non-finite coefficients".into()));
    }
    Ok(DecoderModel {
        subset: subset.to_vec(),
        weights,
        intercept,
        standardization,
    })
}

/// Predicted intensity for one metrics vector. Not clamped to the probe scale.
pub fn predict(model: &DecoderModel, metrics: &MetricsVector) -> f64 {
    model.predict_standardized(&model.features(metrics))
}

/// Normalised root-mean-square error: `sqrt(Σ(p - t)² / Σ t²)`.
pub fn nrmse(truth: &[f64], predicted: &[f64]) -> Result<f64> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::invalid("nrmse needs equal, non-zero lengths"));
    }
    let denom: f64 = truth.iter().map(|t| t * t).sum();
    if !(denom > 0.0) {
        return Err(Error::Undefined("nrmse of an all-zero reference".into()));
    }
    let num: f64 = truth.iter().zip(predicted).map(|(t, p)| (p - t).powi(2)).sum();
    Ok((num / denom).sqrt())
}

/// Held-out predictions of a leave-one-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub subset: Vec<MetricKind>,
    pub predictions: Vec<f64>,
    pub nrmse: f64,
}

/// Leave-one-out cross-validation: each label is predicted by a decoder fitted
/// on all the others.
pub fn loocv(labels: &[f64], metrics: &[MetricsVector], subset: &[MetricKind]) -> Result<CrossValidation> {
    check_subset(subset)?;
    let n = labels.len();
    if n != metrics.len() {
        return Err(Error::invalid("labels and metrics differ in length"));
    }
    if n < subset.len() + 3 {
        return Err(Error::insufficient(format!(
            "{n} probes cannot support leave-one-out with {} metrics",
            subset.len()
        )));
    }
    let mut train_labels = Vec::with_capacity(n - 1);
    let mut train_metrics = Vec::with_capacity(n - 1);
    let mut predictions = Vec::with_capacity(n);
    for held in 0..n {
        train_labels.clear();
        train_metrics.clear();
        for i in (0..n).filter(|&i| i != held) {
            train_labels.push(labels[i]);
            train_metrics.push(metrics[i]);
        }
        let model = fit(&train_labels, &train_metrics, subset).map_err(|e| match e {
            Error::DegenerateFit(msg) => Error::DegenerateFit(format!("fold {held}: {msg}")),
            other => other,
        })?;
        predictions.push(predict(&model, &metrics[held]));
    }
    let nrmse = nrmse(labels, &predictions)?;
    Ok(CrossValidation {
        subset: subset.to_vec(),
        predictions,
        nrmse,
    })
}

/// All subsets of the eight metrics with 1..=`max_size` members, by size and
/// then in lexicographic metric order.
pub fn candidate_subsets(max_size: usize) -> Vec<Vec<MetricKind>> {
    fn extend(start: usize, size: usize, current: &mut Vec<MetricKind>, out: &mut Vec<Vec<MetricKind>>) {
        if current.len() == size {
            out.push(current.clone());
            return;
        }
        for i in start..MetricKind::ALL.len() {
            current.push(MetricKind::ALL[i]);
            extend(i + 1, size, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=max_size.min(MetricKind::ALL.len()) {
        extend(0, size, &mut Vec::with_capacity(size), &mut out);
    }
    out
}

/// Result of the exhaustive subset search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub subset: Vec<MetricKind>,
    /// Decoder refitted on every probe with the winning subset.
    pub model: DecoderModel,
    pub cross_validation: CrossValidation,
    pub candidates: usize,
    /// Candidates skipped because a fold was degenerate.
    pub degenerate: usize,
}

/// Exhaustive search for the subset with the lowest leave-one-out NRMSE.
/// Ties go to the smaller subset, then to the lexicographically first one.
pub fn select_subset(labels: &[f64], metrics: &[MetricsVector], max_size: usize) -> Result<Selection> {
    if max_size == 0 || max_size > MAX_SUBSET_SIZE {
        return Err(Error::invalid(format!("max subset size must be 1..={MAX_SUBSET_SIZE}")));
    }
    let candidates = candidate_subsets(max_size);
    let mut best: Option<CrossValidation> = None;
    let mut degenerate = 0;
    for subset in &candidates {
        match loocv(labels, metrics, subset) {
            Ok(cv) => {
                if best.as_ref().is_none_or(|b| cv.nrmse < b.nrmse) {
                    best = Some(cv);
                }
            }
            Err(Error::DegenerateFit(_)) | Err(Error::InsufficientData(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    let cross_validation =
        best.ok_or_else(|| Error::DegenerateFit(format!("all {} candidate subsets are degenerate", candidates.len())))?;
    let model = fit(labels, metrics, &cross_validation.subset)?;
    Ok(Selection {
        subset: cross_validation.subset.clone(),
        model,
        cross_validation,
        candidates: candidates.len(),
        degenerate,
    })
}

/// Share of each metric in the absolute weight total.
pub fn relative_contributions(model: &DecoderModel) -> Result<Vec<(MetricKind, f64)>> {
    let total: f64 = model.weights.iter().map(|w| w.abs()).sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("all decoder weights are zero".into()));
    }
    Ok(model
        .subset
        .iter()
        .zip(&model.weights)
        .map(|(k, w)| (*k, w.abs() / total))
        .collect())
}

/// Per-trial metrics with the success indicator as `success_rate`.
pub fn per_trial_metrics(trials: &[TrialRecord]) -> Result<Vec<MetricsVector>> {
    trials.iter().map(single_trial_metrics).collect()
}

/// Mean of the `window` per-trial vectors ending at `index`.
pub fn window_metrics(per_trial: &[MetricsVector], index: usize, window: usize) -> Result<MetricsVector> {
    if window == 0 || index >= per_trial.len() {
        return Err(Error::invalid("window index out of range"));
    }
    if index + 1 < window {
        return Err(Error::insufficient(format!("trial {index} has fewer than {window} preceding trials")));
    }
    Ok(MetricsVector::mean(&per_trial[index + 1 - window..=index]).expect("non-empty window"))
}

/// One decoded point of a flow time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedPoint {
    pub trial_index: usize,
    pub intensity: f64,
}

/// Decodes one intensity per trial from the rolling `window` of trials ending
/// at it; the first `window - 1` trials have no estimate.
pub fn decode_timeseries(model: &DecoderModel, trials: &[TrialRecord], window: usize) -> Result<Vec<DecodedPoint>> {
    let per_trial = per_trial_metrics(trials)?;
    decode_from_metrics(model, &per_trial, window)
}

/// [`decode_timeseries`] on precomputed per-trial metrics.
pub fn decode_from_metrics(model: &DecoderModel, per_trial: &[MetricsVector], window: usize) -> Result<Vec<DecodedPoint>> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    if per_trial.len() < window {
        return Err(Error::insufficient(format!(
            "{} trials for a {window}-trial window",
            per_trial.len()
        )));
    }
    (window - 1..per_trial.len())
        .map(|k| {
            let m = window_metrics(per_trial, k, window)?;
            Ok(DecodedPoint {
                trial_index: k,
                intensity: predict(model, &m),
            })
        })
        .collect()
}
