//! End-to-end analysis of recorded or simulated sessions: decoder selection,
//! significance tests, spectral timescale and cohort statistics.
//!
//! The command-line tool and the live service both produce their reports
//! through [`analyze_cohort`], so the same sessions and settings always give
//! the same bytes.

use serde::{Deserialize, Serialize};

use crate::dataio::{SessionData, SCHEMA_VERSION};
use crate::decoder::{
    decode_from_metrics, per_trial_metrics, probe_intensities, relative_contributions, select_subset, window_metrics,
    DecoderModel, MAX_SUBSET_SIZE,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{zstandardize, MetricKind, MetricsVector};
use crate::stats::{
    bh_fdr, mean, median_split, paired_t, pearson, permutation_test, power_timescale, qc_subject, random_test,
    sample_sd, welch_psd, LabelDraw, PsdEstimate, QcReason, QcVerdict, SignificanceOptions, SignificanceResult,
    TestResult, WelchParams,
};

/// Significance level for pass/fail verdicts.
pub const ALPHA: f64 = 0.05;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_POWER_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    pub seed: u64,
    /// Replicates for each of the random and permutation tests.
    pub replicates: usize,
    pub label_draw: LabelDraw,
    pub max_subset_size: usize,
    /// Trials per decoded point of the series used for spectral analysis.
    /// A rolling mean is a low-pass filter and shifts the timescale, so the
    /// default decodes every trial on its own.
    pub timeseries_window: usize,
    pub welch: WelchParams,
    pub power_fraction: f64,
    /// Sample rate of the decoded series; one point per trial duration when
    /// unset.
    pub flow_sample_rate: Option<f64>,
    /// Exclude subjects failing quality control.
    pub apply_qc: bool,
    /// Worker threads. Results do not depend on this, so it is not recorded.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: DEFAULT_REPLICATES,
            label_draw: LabelDraw::Continuous,
            max_subset_size: MAX_SUBSET_SIZE,
            timeseries_window: 1,
            welch: WelchParams::default(),
            power_fraction: DEFAULT_POWER_FRACTION,
            flow_sample_rate: None,
            apply_qc: true,
            jobs: 1,
        }
    }
}

impl AnalysisSettings {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be positive"));
        }
        if self.max_subset_size == 0 || self.max_subset_size > MAX_SUBSET_SIZE {
            return Err(Error::invalid(format!("max_subset_size must be 1..={MAX_SUBSET_SIZE}")));
        }
        if self.timeseries_window == 0 {
            return Err(Error::invalid("timeseries_window must be positive"));
        }
        if !(self.power_fraction > 0.0 && self.power_fraction <= 1.0) {
            return Err(Error::invalid("power_fraction must be in (0, 1]"));
        }
        if self.flow_sample_rate.is_some_and(|f| !(f > 0.0)) {
            return Err(Error::invalid("flow_sample_rate must be positive"));
        }
        Ok(())
    }
}

/// FNV-1a hash of a subject id, so per-subject random streams do not depend
/// on cohort composition or order.
pub fn subject_stream(subject_id: &str) -> u64 {
    subject_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_index: usize,
    pub trial_index: usize,
    pub reported: f64,
    /// Leave-one-out prediction.
    pub predicted: Option<f64>,
    pub metrics: MetricsVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub metric: MetricKind,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub subset: Vec<MetricKind>,
    pub model: DecoderModel,
    pub contributions: Vec<Contribution>,
    /// Leave-one-out error of the selected subset.
    pub nrmse: f64,
    pub candidates: usize,
    pub degenerate_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSummary {
    pub p_value: f64,
    pub passed: bool,
    pub true_nrmse: f64,
    pub null_mean: Option<f64>,
    pub null_sd: Option<f64>,
    pub replicates: usize,
    pub dropped: usize,
    pub degenerate: bool,
}

impl From<&SignificanceResult> for SignificanceSummary {
    fn from(r: &SignificanceResult) -> Self {
        Self {
            p_value: r.p_value,
            passed: !r.degenerate && r.p_value < ALPHA,
            true_nrmse: r.true_nrmse,
            null_mean: r.null_mean(),
            null_sd: sample_sd(&r.null_nrmse),
            replicates: r.null_nrmse.len(),
            dropped: r.dropped,
            degenerate: r.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdSummary {
    pub timescale_s: f64,
    pub peak_frequency_hz: f64,
    pub sample_rate_hz: f64,
    pub segment_length: usize,
    pub segments: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    pub source: String,
    pub trials: usize,
    /// Fewer trials than the configured protocol.
    pub partial: bool,
    pub band_width: Option<f64>,
    pub qc: QcVerdict,
    pub probes: Vec<ProbeReport>,
    pub decoder: Option<DecoderReport>,
    /// Reported vs leave-one-out predicted intensity.
    pub pearson: Option<TestResult>,
    pub random_test: Option<SignificanceSummary>,
    pub permutation_test: Option<SignificanceSummary>,
    pub psd: Option<PsdSummary>,
    /// Correlation of the probe-window decoded series with the ground-truth
    /// flow; simulated subjects only.
    pub ground_truth_r: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reasons: Vec<QcReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEffect {
    pub metric: MetricKind,
    /// Subject means of z-scored probe metrics, in-flow minus out-flow.
    pub paired_t: Option<TestResult>,
    pub paired_p_fdr: Option<f64>,
    /// Pooled correlation of z-scored metric with reported intensity.
    pub pearson: Option<TestResult>,
    pub pearson_p_fdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: usize,
    pub decoded: usize,
    pub pooled_pearson: Option<TestResult>,
    pub nrmse_mean: Option<f64>,
    pub nrmse_sd: Option<f64>,
    pub random_test_passed: usize,
    pub permutation_test_passed: usize,
    pub true_vs_random: Option<TestResult>,
    pub true_vs_permuted: Option<TestResult>,
    pub random_vs_permuted: Option<TestResult>,
    pub timescale_mean_s: Option<f64>,
    pub timescale_sd_s: Option<f64>,
    pub metric_effects: Vec<MetricEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub schema_version: u32,
    pub settings: AnalysisSettings,
    pub notes: Vec<String>,
    pub subjects: Vec<SubjectReport>,
    pub excluded: Vec<Exclusion>,
    pub summary: CohortSummary,
}

/// Probe-window metrics for every probe of a session.
pub fn session_probe_metrics(session: &SessionData, per_trial: &[MetricsVector]) -> Result<Vec<MetricsVector>> {
    session
        .probes
        .iter()
        .map(|p| window_metrics(per_trial, p.trial_index, session.config.probe_window))
        .collect()
}

/// Decoded series used for spectral analysis.
pub fn decoded_series(model: &DecoderModel, per_trial: &[MetricsVector], window: usize) -> Result<Vec<f64>> {
    Ok(decode_from_metrics(model, per_trial, window)?
        .into_iter()
        .map(|p| p.intensity)
        .collect())
}

fn flow_sample_rate(session: &SessionData, settings: &AnalysisSettings) -> f64 {
    settings
        .flow_sample_rate
        .unwrap_or(1.0 / session.config.trial_duration)
}

/// Welch spectrum of the decoded series and its power timescale.
pub fn decoded_spectrum(
    session: &SessionData,
    model: &DecoderModel,
    per_trial: &[MetricsVector],
    settings: &AnalysisSettings,
) -> Result<(PsdSummary, PsdEstimate)> {
    let series = decoded_series(model, per_trial, settings.timeseries_window)?;
    let fs = flow_sample_rate(session, settings);
    let est = welch_psd(&series, fs, &settings.welch)?;
    let summary = PsdSummary {
        timescale_s: power_timescale(&est, settings.power_fraction)?,
        peak_frequency_hz: est.peak_frequency(),
        sample_rate_hz: fs,
        segment_length: est.segment_length,
        segments: est.segments,
        points: series.len(),
    };
    Ok((summary, est))
}

/// Analyses one subject. Failures of individual steps become warnings.
pub fn analyze_subject(session: &SessionData, settings: &AnalysisSettings, jobs: usize) -> Result<SubjectReport> {
    settings.validate()?;
    session.validate()?;
    let mut warnings = Vec::new();
    let qc = qc_subject(session);
    let per_trial = per_trial_metrics(&session.trials)?;
    let probe_metrics = session_probe_metrics(session, &per_trial)?;
    let labels = probe_intensities(&session.probes);
    let mut probes: Vec<ProbeReport> = session
        .probes
        .iter()
        .zip(&probe_metrics)
        .map(|(p, m)| ProbeReport {
            probe_index: p.probe_index,
            trial_index: p.trial_index,
            reported: p.intensity,
            predicted: None,
            metrics: *m,
        })
        .collect();

    let mut report = SubjectReport {
        subject_id: session.subject_id.clone(),
        source: session.provenance.source.clone(),
        trials: session.trials.len(),
        partial: session.trials.len() < session.config.total_trials(),
        band_width: session.config.band_width,
        qc,
        probes: Vec::new(),
        decoder: None,
        pearson: None,
        random_test: None,
        permutation_test: None,
        psd: None,
        ground_truth_r: None,
        warnings: Vec::new(),
    };

    let selection = match select_subset(&labels, &probe_metrics, settings.max_subset_size) {
        Ok(s) => s,
        Err(e) => {
            warnings.push(format!("decoder not fitted: {e}"));
            report.probes = probes;
            report.warnings = warnings;
            return Ok(report);
        }
    };
    for (p, pred) in probes.iter_mut().zip(&selection.cross_validation.predictions) {
        p.predicted = Some(*pred);
    }
    let contributions = match relative_contributions(&selection.model) {
        Ok(c) => c.into_iter().map(|(metric, share)| Contribution { metric, share }).collect(),
        Err(e) => {
            warnings.push(format!("contributions undefined: {e}"));
            Vec::new()
        }
    };
    match pearson(&labels, &selection.cross_validation.predictions) {
        Ok(r) => report.pearson = Some(r),
        Err(e) => warnings.push(format!("correlation undefined: {e}")),
    }

    let base = derive_seed(settings.seed, subject_stream(&session.subject_id));
    let opts = |stream: u64| SignificanceOptions {
        replicates: settings.replicates,
        seed: derive_seed(base, stream),
        label_draw: settings.label_draw,
        jobs,
    };
    match random_test(&labels, &probe_metrics, &selection.subset, &opts(1)) {
        Ok(r) => report.random_test = Some((&r).into()),
        Err(e) => warnings.push(format!("random test failed: {e}")),
    }
    match permutation_test(&labels, &probe_metrics, &selection.subset, &opts(2)) {
        Ok(r) => report.permutation_test = Some((&r).into()),
        Err(e) => warnings.push(format!("permutation test failed: {e}")),
    }

    match decoded_spectrum(session, &selection.model, &per_trial, settings) {
        Ok((p, _)) => report.psd = Some(p),
        Err(e) => warnings.push(format!("spectral timescale unavailable: {e}")),
    }

    if let Some(truth) = &session.ground_truth_flow {
        let window = session.config.probe_window;
        let r = decode_from_metrics(&selection.model, &per_trial, window).and_then(|points| {
            let decoded: Vec<f64> = points.iter().map(|p| p.intensity).collect();
            let aligned: Vec<f64> = points.iter().map(|p| truth[p.trial_index]).collect();
            pearson(&decoded, &aligned)
        });
        match r {
            Ok(r) => report.ground_truth_r = Some(r.effect_size),
            Err(e) => warnings.push(format!("ground-truth correlation undefined: {e}")),
        }
    }

    report.decoder = Some(DecoderReport {
        subset: selection.subset.clone(),
        model: selection.model,
        contributions,
        nrmse: selection.cross_validation.nrmse,
        candidates: selection.candidates,
        degenerate_candidates: selection.degenerate,
    });
    report.probes = probes;
    report.warnings = warnings;
    Ok(report)
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    (mean(values), sample_sd(values))
}

fn metric_effects(subjects: &[SubjectReport]) -> Vec<MetricEffect> {
    // Per subject: z-score probe metrics, split probes at the median report.
    let mut group_means: Vec<([f64; 8], [f64; 8])> = Vec::new();
    let mut pooled_metrics: Vec<[f64; 8]> = Vec::new();
    let mut pooled_reports: Vec<f64> = Vec::new();
    for s in subjects {
        let vectors: Vec<MetricsVector> = s.probes.iter().map(|p| p.metrics).collect();
        let reports: Vec<f64> = s.probes.iter().map(|p| p.reported).collect();
        let (Ok(z), Ok(split)) = (zstandardize(&vectors), median_split(&reports)) else {
            continue;
        };
        if split.degenerate {
            continue;
        }
        let mut sums = ([0.0; 8], [0.0; 8]);
        let mut counts = (0usize, 0usize);
        for (v, &in_flow) in z.vectors.iter().zip(&split.in_flow) {
            let a = v.to_array();
            let (target, count) = if in_flow {
                (&mut sums.0, &mut counts.0)
            } else {
                (&mut sums.1, &mut counts.1)
            };
            for i in 0..8 {
                target[i] += a[i];
            }
            *count += 1;
        }
        group_means.push((
            sums.0.map(|x| x / counts.0 as f64),
            sums.1.map(|x| x / counts.1 as f64),
        ));
        pooled_metrics.extend(z.vectors.iter().map(|v| v.to_array()));
        pooled_reports.extend(reports);
    }
    let mut effects: Vec<MetricEffect> = MetricKind::ALL
        .iter()
        .map(|&metric| {
            let i = metric.index();
            let inflow: Vec<f64> = group_means.iter().map(|g| g.0[i]).collect();
            let outflow: Vec<f64> = group_means.iter().map(|g| g.1[i]).collect();
            let column: Vec<f64> = pooled_metrics.iter().map(|m| m[i]).collect();
            MetricEffect {
                metric,
                paired_t: paired_t(&inflow, &outflow).ok(),
                paired_p_fdr: None,
                pearson: pearson(&column, &pooled_reports).ok(),
                pearson_p_fdr: None,
            }
        })
        .collect();
    let adjust = |effects: &mut Vec<MetricEffect>,
                  get: fn(&MetricEffect) -> Option<f64>,
                  set: fn(&mut MetricEffect, f64)| {
        let idx: Vec<usize> = (0..effects.len()).filter(|&i| get(&effects[i]).is_some()).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| get(&effects[i]).expect("filtered")).collect();
        if let Ok(adj) = bh_fdr(&ps) {
            for (&i, a) in idx.iter().zip(adj) {
                set(&mut effects[i], a);
            }
        }
    };
    adjust(&mut effects, |e| e.paired_t.map(|t| t.p_value), |e, p| e.paired_p_fdr = Some(p));
    adjust(&mut effects, |e| e.pearson.map(|t| t.p_value), |e, p| e.pearson_p_fdr = Some(p));
    effects
}

fn summarize(subjects: &[SubjectReport]) -> CohortSummary {
    let decoded: Vec<&SubjectReport> = subjects.iter().filter(|s| s.decoder.is_some()).collect();
    let mut reported = Vec::new();
    let mut predicted = Vec::new();
    for s in &decoded {
        for p in &s.probes {
            if let Some(pred) = p.predicted {
                reported.push(p.reported);
                predicted.push(pred);
            }
        }
    }
    let nrmse: Vec<f64> = decoded.iter().filter_map(|s| s.decoder.as_ref().map(|d| d.nrmse)).collect();
    let (nrmse_mean, nrmse_sd) = mean_sd(&nrmse);
    let timescales: Vec<f64> = subjects.iter().filter_map(|s| s.psd.as_ref().map(|p| p.timescale_s)).collect();
    let (timescale_mean_s, timescale_sd_s) = mean_sd(&timescales);

    // Paired comparisons of the true error against each null mean, over
    // subjects with both tests available.
    let both: Vec<(f64, f64, f64)> = decoded
        .iter()
        .filter_map(|s| {
            let r = s.random_test.as_ref()?;
            let p = s.permutation_test.as_ref()?;
            Some((r.true_nrmse, r.null_mean?, p.null_mean?))
        })
        .collect();
    let col = |f: fn(&(f64, f64, f64)) -> f64| both.iter().map(f).collect::<Vec<f64>>();
    let (t, r, p) = (col(|x| x.0), col(|x| x.1), col(|x| x.2));

    CohortSummary {
        subjects: subjects.len(),
        decoded: decoded.len(),
        pooled_pearson: pearson(&reported, &predicted).ok(),
        nrmse_mean,
        nrmse_sd,
        random_test_passed: subjects
            .iter()
            .filter(|s| s.random_test.as_ref().is_some_and(|r| r.passed))
            .count(),
        permutation_test_passed: subjects
            .iter()
            .filter(|s| s.permutation_test.as_ref().is_some_and(|r| r.passed))
            .count(),
        true_vs_random: paired_t(&t, &r).ok(),
        true_vs_permuted: paired_t(&t, &p).ok(),
        random_vs_permuted: paired_t(&r, &p).ok(),
        timescale_mean_s,
        timescale_sd_s,
        metric_effects: metric_effects(subjects),
    }
}

/// Analyses a cohort. Subjects keep their input order; quality-control
/// failures are listed in `excluded` unless `apply_qc` is off.
pub fn analyze_cohort(sessions: &[SessionData], settings: &AnalysisSettings) -> Result<CohortReport> {
    settings.validate()?;
    if sessions.is_empty() {
        return Err(Error::insufficient("no sessions to analyse"));
    }
    let mut ids: Vec<&str> = sessions.iter().map(|s| s.subject_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate subject id `{}`", w[0])));
    }

    let mut notes = Vec::new();
    if settings.replicates < DEFAULT_REPLICATES {
        notes.push(format!(
            "significance tests use {} replicates instead of {DEFAULT_REPLICATES}",
            settings.replicates
        ));
    }
    if !settings.apply_qc {
        notes.push("quality control disabled; no subjects excluded".into());
    }

    let mut excluded = Vec::new();
    let mut selected = Vec::new();
    for s in sessions {
        let qc = qc_subject(s);
        if settings.apply_qc && !qc.pass {
            tracing::info!(subject = %s.subject_id, reasons = ?qc.reasons, "subject excluded by quality control");
            excluded.push(Exclusion {
                subject_id: s.subject_id.clone(),
                reasons: qc.reasons,
            });
        } else {
            selected.push(s);
        }
    }

    let jobs = settings.jobs.max(1);
    let subjects: Vec<SubjectReport> = if selected.len() == 1 || jobs == 1 {
        selected
            .iter()
            .map(|s| analyze_subject(s, settings, if selected.len() == 1 { jobs } else { 1 }))
            .collect::<Result<_>>()?
    } else {
        let chunk = selected.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = selected
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| analyze_subject(s, settings, 1))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("analysis worker panicked"))
                .collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };

    Ok(CohortReport {
        schema_version: SCHEMA_VERSION,
        settings: settings.clone(),
        notes,
        summary: summarize(&subjects),
        subjects,
        excluded,
    })
}
