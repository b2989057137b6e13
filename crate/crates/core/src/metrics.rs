//! The eight performance metrics extracted from force traces, their
//! probe-window aggregates and per-subject z-standardisation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{ForceTrace, TrialRecord};

/// Number of trials preceding (and including) a probe that its metrics
/// summarise.
pub const DEFAULT_PROBE_WINDOW: usize = 5;

/// Identifies one of the eight metrics. The declaration order is the
/// canonical order used for columns, tie-breaking and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ReactionTime,
    ArrivingTime,
    CompletingTime,
    InRangeTime,
    ForceOvershoot,
    AverageDeviation,
    AverageAdjustRate,
    SuccessRate,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::ReactionTime,
        MetricKind::ArrivingTime,
        MetricKind::CompletingTime,
        MetricKind::InRangeTime,
        MetricKind::ForceOvershoot,
        MetricKind::AverageDeviation,
        MetricKind::AverageAdjustRate,
        MetricKind::SuccessRate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ReactionTime => "reaction_time",
            MetricKind::ArrivingTime => "arriving_time",
            MetricKind::CompletingTime => "completing_time",
            MetricKind::InRangeTime => "in_range_time",
            MetricKind::ForceOvershoot => "force_overshoot",
            MetricKind::AverageDeviation => "average_deviation",
            MetricKind::AverageAdjustRate => "average_adjust_rate",
            MetricKind::SuccessRate => "success_rate",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Performance metrics for one trial or one probe window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsVector {
    /// s
    pub reaction_time: f64,
    /// s
    pub arriving_time: f64,
    /// s
    pub completing_time: f64,
    /// s
    pub in_range_time: f64,
    /// dimensionless
    pub force_overshoot: f64,
    /// N
    pub average_deviation: f64,
    /// N/s
    pub average_adjust_rate: f64,
    /// fraction
    pub success_rate: f64,
}

impl MetricsVector {
    pub fn get(&self, kind: MetricKind) -> f64 {
        self.to_array()[kind.index()]
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.reaction_time,
            self.arriving_time,
            self.completing_time,
            self.in_range_time,
            self.force_overshoot,
            self.average_deviation,
            self.average_adjust_rate,
            self.success_rate,
        ]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        Self {
            reaction_time: v[0],
            arriving_time: v[1],
            completing_time: v[2],
            in_range_time: v[3],
            force_overshoot: v[4],
            average_deviation: v[5],
            average_adjust_rate: v[6],
            success_rate: v[7],
        }
    }

    /// Element-wise arithmetic mean.
    pub fn mean(vectors: &[MetricsVector]) -> Option<MetricsVector> {
        if vectors.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(v.to_array()) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        Some(MetricsVector::from_array(acc.map(|a| a / n)))
    }
}

/// Metrics of a single trial, with `success_rate` computed over
/// `trailing_window` (which should include `record` itself).
pub fn trial_metrics(record: &TrialRecord, trailing_window: &[TrialRecord]) -> Result<MetricsVector> {
    if trailing_window.is_empty() {
        return Err(Error::insufficient("success rate needs a non-empty trailing window"));
    }
    let mut m = single_trial_metrics(record)?;
    let hits = trailing_window.iter().filter(|r| r.success).count();
    m.success_rate = hits as f64 / trailing_window.len() as f64;
    Ok(m)
}

/// Metrics of one trial with `success_rate` equal to the trial's own outcome
/// (1 or 0).
///
/// Absent events are censored: reaction and completing time to the trial
/// duration, arriving time to the remainder of the trial after onset.
/// Deviation and adjusting rate are taken from press onset to trial end (the
/// whole trace when no press occurs).
pub fn single_trial_metrics(record: &TrialRecord) -> Result<MetricsVector> {
    record.check_invariants()?;
    let trace = &record.trace;
    if trace.is_empty() {
        return Err(Error::invalid("trial record has an empty trace"));
    }
    let cfg = &record.config;
    let duration = cfg.trial_duration;
    let target = cfg.target_force;

    let onset_index = record.onset_index();
    if onset_index.map(|i| trace.time_of(i)) != record.press_onset {
        return Err(Error::invalid("record is not evaluated against its own trace"));
    }

    let reaction_time = record.press_onset.unwrap_or(duration);
    let arriving_time = match (record.press_onset, record.band_entry) {
        (Some(onset), Some(entry)) => entry - onset,
        (Some(onset), None) => duration - onset,
        _ => duration,
    };
    let completing_time = record.success_latch.unwrap_or(duration);
    let in_band = trace.samples.iter().filter(|&&f| cfg.in_band(f)).count();
    let in_range_time = in_band as f64 * trace.dt;

    let peak = trace.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let force_overshoot = (peak - target).abs() / target;

    let span = &trace.samples[onset_index.unwrap_or(0)..];
    let average_deviation = average_deviation(span, target);
    let average_adjust_rate = average_adjust_rate(span, trace.dt);

    Ok(MetricsVector {
        reaction_time,
        arriving_time,
        completing_time,
        in_range_time,
        force_overshoot,
        average_deviation,
        average_adjust_rate,
        success_rate: if record.success { 1.0 } else { 0.0 },
    })
}

/// Mean absolute deviation from `target` over `samples`.
pub fn average_deviation(samples: &[f64], target: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|f| (f - target).abs()).sum::<f64>() / samples.len() as f64
}

/// Total variation of `samples` divided by their time span.
pub fn average_adjust_rate(samples: &[f64], dt: f64) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let variation: f64 = samples.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    variation / ((samples.len() - 1) as f64 * dt)
}

/// Metrics for the probe placed after trial `probe_trial_index` (0-based into
/// `records`): the mean of the `window` trials ending at that trial, with the
/// success rate taken over the window.
pub fn probe_metrics(records: &[TrialRecord], probe_trial_index: usize, window: usize) -> Result<MetricsVector> {
    if window == 0 {
        return Err(Error::invalid("probe window must be positive"));
    }
    if probe_trial_index >= records.len() {
        return Err(Error::invalid(format!(
            "probe trial {probe_trial_index} beyond the {} recorded trials",
            records.len()
        )));
    }
    if probe_trial_index + 1 < window {
        return Err(Error::insufficient(format!(
            "probe at trial {probe_trial_index} has fewer than {window} preceding trials"
        )));
    }
    let span = &records[probe_trial_index + 1 - window..=probe_trial_index];
    let per_trial = span.iter().map(single_trial_metrics).collect::<Result<Vec<_>>>()?;
    Ok(MetricsVector::mean(&per_trial).expect("window is non-empty"))
}

/// Mean and sample standard deviation of one metric across a subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub mean: f64,
    pub sd: f64,
}

impl ScaleParams {
    /// Fits mean and sample (n-1) standard deviation.
    pub fn fit(values: &[f64]) -> Result<ScaleParams> {
        if values.len() < 2 {
            return Err(Error::insufficient("standardisation needs at least two values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(ScaleParams { mean, sd: var.sqrt() })
    }

    /// True when the spread is too small to standardise against.
    pub fn is_degenerate(&self) -> bool {
        !(self.sd > 1e-12 * self.mean.abs().max(1.0))
    }

    /// z-score of `value`; zero for degenerate scales.
    pub fn apply(&self, value: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (value - self.mean) / self.sd
        }
    }
}

/// Output of [`zstandardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub vectors: Vec<MetricsVector>,
    pub params: [ScaleParams; 8],
    /// Metrics with zero variance; these are mapped to all-zeros.
    pub degenerate: Vec<MetricKind>,
}

/// z-standardises every metric across one subject's vectors.
pub fn zstandardize(vectors: &[MetricsVector]) -> Result<Standardized> {
    if vectors.len() < 2 {
        return Err(Error::insufficient("standardisation needs at least two vectors"));
    }
    let mut params = [ScaleParams { mean: 0.0, sd: 0.0 }; 8];
    let mut degenerate = Vec::new();
    for kind in MetricKind::ALL {
        let column: Vec<f64> = vectors.iter().map(|v| v.get(kind)).collect();
        let p = ScaleParams::fit(&column)?;
        if p.is_degenerate() {
            tracing::warn!(metric = %kind, "zero-variance metric standardised to zeros");
            degenerate.push(kind);
        }
        params[kind.index()] = p;
    }
    let out = vectors
        .iter()
        .map(|v| {
            let a = v.to_array();
            MetricsVector::from_array(std::array::from_fn(|i| params[i].apply(a[i])))
        })
        .collect();
    Ok(Standardized {
        vectors: out,
        params,
        degenerate,
    })
}

/// z-scores of a plain series (sample sd). Degenerate series map to zeros.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    let p = ScaleParams::fit(values)?;
    Ok(values.iter().map(|&v| p.apply(v)).collect())
}

/// Linearly resamples a uniformly sampled trace onto a new period, keeping
/// the same time origin and covering the same duration.
pub fn resample(trace: &ForceTrace, dt: f64) -> Result<ForceTrace> {
    trace.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("target sample period must be positive"));
    }
    if trace.is_empty() {
        return Ok(ForceTrace { dt, samples: Vec::new() });
    }
    if (trace.dt - dt).abs() <= 1e-15 {
        return Ok(trace.clone());
    }
    let times: Vec<f64> = (0..trace.len()).map(|i| trace.time_of(i)).collect();
    let span = trace.len() as f64 * trace.dt;
    let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    ForceTrace::new(dt, interpolate(&times, &trace.samples, dt, n))
}

/// Samples the piecewise-linear curve through `(times, values)` at
/// `i * dt` for `i < n`. Times before the first point take the first value
/// and times past the last point hold the last value.
pub fn interpolate(times: &[f64], values: &[f64], dt: f64, n: usize) -> Vec<f64> {
    debug_assert_eq!(times.len(), values.len());
    let mut out = Vec::with_capacity(n);
    let mut j = 0usize;
    for i in 0..n {
        let t = i as f64 * dt;
        while j + 1 < times.len() && times[j + 1] <= t {
            j += 1;
        }
        let v = if t <= times[0] {
            values[0]
        } else if j + 1 >= times.len() {
            values[times.len() - 1]
        } else {
            let (t0, t1) = (times[j], times[j + 1]);
            let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
            values[j] + w * (values[j + 1] - values[j])
        };
        out.push(v);
    }
    out
}
