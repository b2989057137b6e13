//! Statistical validation: group splits, paired tests, correlations, false
//! discovery rate, label-randomisation significance tests, subject quality
//! control and spectral analysis of decoded series.

use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::SessionData;
use crate::decoder::{loocv, probe_intensities};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricsVector};

/// Outcome of a paired t-test or correlation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Cohen's d for paired tests, r for correlations.
    pub effect_size: f64,
    pub df: f64,
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn two_tailed_p(t: f64, df: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

/// Median split of probe intensities. `in_flow[i]` is true when intensity `i`
/// is strictly above the median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSplit {
    pub median: f64,
    pub in_flow: Vec<bool>,
    /// Every value sits at the median, so the in-flow group is empty.
    pub degenerate: bool,
}

pub fn median_split(intensities: &[f64]) -> Result<MedianSplit> {
    if intensities.len() < 2 {
        return Err(Error::insufficient("median split needs at least two probes"));
    }
    let median = median(intensities).expect("non-empty");
    let in_flow: Vec<bool> = intensities.iter().map(|&v| v > median).collect();
    let degenerate = !in_flow.iter().any(|&b| b);
    if degenerate {
        tracing::warn!("all probe intensities equal the median; every probe is out-flow");
    }
    Ok(MedianSplit {
        median,
        in_flow,
        degenerate,
    })
}

/// Two-tailed paired t-test of `x - y`.
pub fn paired_t(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::invalid("paired samples differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::insufficient("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&diffs).expect("non-empty");
    let sd = sample_sd(&diffs).expect("n >= 2");
    if !(sd > 0.0) {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let n = diffs.len() as f64;
    let df = n - 1.0;
    let t = m / (sd / n.sqrt());
    Ok(TestResult {
        statistic: t,
        p_value: two_tailed_p(t, df)?,
        effect_size: m / sd,
        df,
    })
}

/// Pearson correlation with a two-tailed t-based p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::invalid("correlation samples differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::insufficient("correlation needs at least three pairs"));
    }
    let mx = mean(x).expect("non-empty");
    let my = mean(y).expect("non-empty");
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("correlation with a zero-variance sample".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = x.len() as f64 - 2.0;
    let (t, p) = if 1.0 - r.abs() < 1e-15 {
        (f64::INFINITY.copysign(r), 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        (t, two_tailed_p(t, df)?)
    };
    Ok(TestResult {
        statistic: t,
        p_value: p,
        effect_size: r,
        df,
    })
}

/// Benjamini-Hochberg adjusted p-values, in input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    let n = p_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; n];
    let mut running = 1.0_f64;
    for rank in (0..n).rev() {
        let i = order[rank];
        running = running.min(p_values[i] * n as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

/// How random-test labels are drawn from the subject's report range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDraw {
    /// Uniform on the continuous interval `[min, max]`.
    #[default]
    Continuous,
    /// Uniform over the reachable values of a three-question Likert mean
    /// (multiples of 1/3) inside `[min, max]`.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceOptions {
    pub replicates: usize,
    pub seed: u64,
    pub label_draw: LabelDraw,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
}

impl Default for SignificanceOptions {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0,
            label_draw: LabelDraw::Continuous,
            jobs: 1,
        }
    }
}

/// Null distribution of cross-validated error and the resulting p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub true_nrmse: f64,
    /// Fraction of valid replicates with error strictly below `true_nrmse`.
    pub p_value: f64,
    pub null_nrmse: Vec<f64>,
    pub requested: usize,
    /// Replicates skipped because a fold could not be fitted.
    pub dropped: usize,
    /// The replicate labels cannot differ from the true labels.
    pub degenerate: bool,
}

impl SignificanceResult {
    pub fn null_mean(&self) -> Option<f64> {
        mean(&self.null_nrmse)
    }
}

fn run_replicates(
    labels: &[f64],
    metrics: &[MetricsVector],
    subset: &[MetricKind],
    opts: &SignificanceOptions,
    draw: impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
) -> Result<SignificanceResult> {
    let true_nrmse = loocv(labels, metrics, subset)?.nrmse;
    let replicate = |r: usize| -> Result<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, r as u64));
        let fake = draw(&mut rng);
        match loocv(&fake, metrics, subset) {
            Ok(cv) => Ok(Some(cv.nrmse)),
            Err(Error::DegenerateFit(_)) | Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let jobs = NonZeroUsize::new(opts.jobs).map_or(1, |j| j.get()).min(opts.replicates.max(1));
    let outcomes: Vec<Result<Option<f64>>> = if jobs == 1 {
        (0..opts.replicates).map(replicate).collect()
    } else {
        let chunk = opts.replicates.div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let replicate = &replicate;
                    let range = (j * chunk)..((j + 1) * chunk).min(opts.replicates);
                    s.spawn(move || range.map(replicate).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("replicate worker panicked"))
                .collect()
        })
    };
    let mut null_nrmse = Vec::with_capacity(opts.replicates);
    let mut dropped = 0;
    for o in outcomes {
        match o? {
            Some(e) => null_nrmse.push(e),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        tracing::warn!(dropped, requested = opts.replicates, "significance replicates dropped");
    }
    let p_value = if null_nrmse.is_empty() {
        1.0
    } else {
        null_nrmse.iter().filter(|&&e| e < true_nrmse).count() as f64 / null_nrmse.len() as f64
    };
    Ok(SignificanceResult {
        true_nrmse,
        p_value,
        null_nrmse,
        requested: opts.replicates,
        dropped,
        degenerate: false,
    })
}

/// Compares the true-label error with decoders trained on labels drawn
/// uniformly from the range of the true labels. The subset stays fixed.
pub fn random_test(
    labels: &[f64],
    metrics: &[MetricsVector],
    subset: &[MetricKind],
    opts: &SignificanceOptions,
) -> Result<SignificanceResult> {
    if labels.is_empty() {
        return Err(Error::insufficient("random test needs probes"));
    }
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = labels.len();
    let grid: Vec<f64> = (3..=21)
        .map(|k| k as f64 / 3.0)
        .filter(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9)
        .collect();
    let draw_kind = if opts.label_draw == LabelDraw::Grid && grid.is_empty() {
        LabelDraw::Continuous
    } else {
        opts.label_draw
    };
    let mut result = run_replicates(labels, metrics, subset, opts, |rng| match draw_kind {
        LabelDraw::Continuous if hi > lo => (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
        LabelDraw::Continuous => vec![lo; n],
        LabelDraw::Grid => (0..n).map(|_| grid[rng.random_range(0..grid.len())]).collect(),
    })?;
    if hi <= lo {
        tracing::warn!("constant probe intensities; random test is degenerate");
        result.degenerate = true;
        result.p_value = 1.0;
    }
    Ok(result)
}

/// Compares the true-label error with decoders trained on shuffled labels.
/// The subset stays fixed.
pub fn permutation_test(
    labels: &[f64],
    metrics: &[MetricsVector],
    subset: &[MetricKind],
    opts: &SignificanceOptions,
) -> Result<SignificanceResult> {
    let constant = labels.windows(2).all(|w| w[0] == w[1]);
    let mut result = run_replicates(labels, metrics, subset, opts, |rng| {
        let mut v = labels.to_vec();
        v.shuffle(rng);
        v
    })?;
    if constant {
        tracing::warn!("constant probe intensities; every permutation is identical");
        result.degenerate = true;
        result.p_value = 1.0;
    }
    Ok(result)
}

pub const QC_MAX_SUCCESS_RATE: f64 = 0.9;
pub const QC_MIN_INTENSITY_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcReason {
    SuccessTooHigh,
    IntensityRangeTooSmall,
    NoTrials,
    NoProbes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcVerdict {
    pub pass: bool,
    pub success_rate: Option<f64>,
    pub intensity_range: Option<f64>,
    pub reasons: Vec<QcReason>,
}

/// Subject exclusion rules: main-session success above 90% or a report range
/// narrower than one scale point.
pub fn qc_subject(session: &SessionData) -> QcVerdict {
    let mut reasons = Vec::new();
    let success_rate = session.success_rate();
    match success_rate {
        None => reasons.push(QcReason::NoTrials),
        Some(s) if s > QC_MAX_SUCCESS_RATE => reasons.push(QcReason::SuccessTooHigh),
        _ => {}
    }
    let intensities = probe_intensities(&session.probes);
    let intensity_range = (!intensities.is_empty()).then(|| {
        let lo = intensities.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = intensities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    });
    match intensity_range {
        None => reasons.push(QcReason::NoProbes),
        // Likert means are multiples of 1/3; the tolerance keeps 1.0 passing.
        Some(r) if r < QC_MIN_INTENSITY_RANGE - 1e-9 => reasons.push(QcReason::IntensityRangeTooSmall),
        _ => {}
    }
    QcVerdict {
        pass: reasons.is_empty(),
        success_rate,
        intensity_range,
        reasons,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            // Periodic Hann, the usual choice for spectral estimation.
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detrend {
    /// Subtract the series mean before segmenting.
    #[default]
    Mean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchParams {
    /// Defaults to the largest power of two not above a quarter of the series.
    pub segment_length: Option<usize>,
    pub overlap: f64,
    pub window: Window,
    pub detrend: Detrend,
}

impl Default for WelchParams {
    fn default() -> Self {
        Self {
            segment_length: None,
            overlap: 0.5,
            window: Window::Hann,
            detrend: Detrend::Mean,
        }
    }
}

pub const MIN_SEGMENT_LENGTH: usize = 8;

pub fn default_segment_length(n: usize) -> Option<usize> {
    let quarter = n / 4;
    if quarter < MIN_SEGMENT_LENGTH {
        return None;
    }
    Some(1 << (usize::BITS - 1 - quarter.leading_zeros()))
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub frequencies: Vec<f64>,
    pub density: Vec<f64>,
    pub segment_length: usize,
    pub segments: usize,
    pub overlap: f64,
    pub window: Window,
    pub sample_rate: f64,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        self.sample_rate / self.segment_length as f64
    }

    /// Integral of the density over frequency.
    pub fn total_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.resolution()
    }

    pub fn peak_frequency(&self) -> f64 {
        let (k, _) = self
            .density
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, f64::NEG_INFINITY), |acc, (k, &d)| if d > acc.1 { (k, d) } else { acc });
        self.frequencies[k]
    }
}

/// Welch estimate: average of windowed periodograms over overlapping
/// segments, scaled so that the density integrates to the series variance.
pub fn welch_psd(series: &[f64], fs: f64, params: &WelchParams) -> Result<PsdEstimate> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if !(0.0..1.0).contains(&params.overlap) {
        return Err(Error::invalid("overlap must be in [0, 1)"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let len = match params.segment_length {
        Some(l) => l,
        None => default_segment_length(series.len()).ok_or_else(|| {
            Error::insufficient(format!(
                "{} values are too few for a {MIN_SEGMENT_LENGTH}-point segment",
                series.len()
            ))
        })?,
    };
    if len < MIN_SEGMENT_LENGTH {
        return Err(Error::invalid(format!("segment length must be at least {MIN_SEGMENT_LENGTH}")));
    }
    if series.len() < len {
        return Err(Error::insufficient(format!(
            "series of {} is shorter than the {len}-point segment",
            series.len()
        )));
    }
    let offset = match params.detrend {
        Detrend::Mean => mean(series).expect("non-empty"),
        Detrend::None => 0.0,
    };
    let w = params.window.coefficients(len);
    let w_energy: f64 = w.iter().map(|x| x * x).sum();
    let step = ((len as f64 * (1.0 - params.overlap)).round() as usize).max(1);
    let fft = FftPlanner::new().plan_fft_forward(len);
    let bins = len / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let mut segments = 0;
    let mut start = 0;
    while start + len <= series.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new((series[start + i] - offset) * w[i], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (fs * w_energy * segments as f64);
    let density: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || (len % 2 == 0 && k == len / 2) { 1.0 } else { 2.0 };
            p * scale * one_sided
        })
        .collect();
    let frequencies = (0..bins).map(|k| k as f64 * fs / len as f64).collect();
    Ok(PsdEstimate {
        frequencies,
        density,
        segment_length: len,
        segments,
        overlap: params.overlap,
        window: params.window,
        sample_rate: fs,
    })
}

/// Timescale `1/f*` where `f*` is the highest frequency bin such that the
/// bins from `f*` up to Nyquist still hold `fraction` of the non-DC power.
pub fn power_timescale(psd: &PsdEstimate, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("power fraction must be in (0, 1]"));
    }
    let ac = &psd.density[1..];
    let total: f64 = ac.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("no power outside the DC bin".into()));
    }
    let mut tail = 0.0;
    for k in (0..ac.len()).rev() {
        tail += ac[k];
        if tail >= fraction * total * (1.0 - 1e-12) {
            return Ok(1.0 / psd.frequencies[k + 1]);
        }
    }
    unreachable!("the full tail holds all non-DC power")
}
