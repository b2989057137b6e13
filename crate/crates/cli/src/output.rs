//! Human and machine-readable output of the subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowtrace_core::dataio::SessionData;
use flowtrace_core::decoder::per_trial_metrics;
use flowtrace_core::metrics::{MetricKind, MetricsVector};
use flowtrace_core::pipeline::{session_probe_metrics, CohortReport, CohortSummary};
use flowtrace_core::stats::PsdEstimate;
use serde::Serialize;

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
pub struct SimulatedSubject {
    pub subject_id: String,
    pub band_width: Option<f64>,
    pub trials: usize,
    pub success_rate: Option<f64>,
    pub probes: usize,
    pub file: PathBuf,
}

pub fn print_simulated(rows: &[SimulatedSubject]) {
    println!("{:<10} {:>9} {:>7} {:>8} {:>7}", "subject", "band_N", "trials", "success", "probes");
    for r in rows {
        println!(
            "{:<10} {:>9.5} {:>7} {:>8.3} {:>7}",
            r.subject_id,
            r.band_width.unwrap_or(f64::NAN),
            r.trials,
            r.success_rate.unwrap_or(f64::NAN),
            r.probes
        );
    }
}

fn metric_header(first: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain(MetricKind::ALL.iter().map(|k| k.name().to_string()))
        .collect()
}

fn metric_fields(m: &MetricsVector) -> impl Iterator<Item = String> + '_ {
    MetricKind::ALL.iter().map(move |&k| m.get(k).to_string())
}

pub fn write_metrics_csv(sink: impl Write, sessions: &[SessionData], probes: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if probes {
        w.write_record(metric_header(&["subject_id", "probe_index", "trial_index", "reported"]))?;
    } else {
        w.write_record(metric_header(&["subject_id", "trial_index", "band_width", "success"]))?;
    }
    for s in sessions {
        let per_trial = per_trial_metrics(&s.trials).with_context(|| format!("metrics of {}", s.subject_id))?;
        if probes {
            let windows = session_probe_metrics(s, &per_trial)?;
            for (p, m) in s.probes.iter().zip(&windows) {
                let head = [
                    s.subject_id.clone(),
                    p.probe_index.to_string(),
                    p.trial_index.to_string(),
                    p.intensity.to_string(),
                ];
                w.write_record(head.into_iter().chain(metric_fields(m)))?;
            }
        } else {
            for (i, (t, m)) in s.trials.iter().zip(&per_trial).enumerate() {
                let head = [
                    s.subject_id.clone(),
                    i.to_string(),
                    t.config.band_width.to_string(),
                    u8::from(t.success).to_string(),
                ];
                w.write_record(head.into_iter().chain(metric_fields(m)))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_psd_csv(path: &Path, est: &PsdEstimate) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["frequency_hz", "power"])?;
    for (f, p) in est.frequencies.iter().zip(&est.density) {
        w.write_record([f.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct DecodeSubject<'a> {
    pub subject_id: &'a str,
    pub subset: Vec<MetricKind>,
    pub nrmse: Option<f64>,
    pub r: Option<f64>,
    pub random_p: Option<f64>,
    pub permutation_p: Option<f64>,
    pub timescale_s: Option<f64>,
    pub warnings: &'a [String],
}

#[derive(Serialize)]
pub struct DecodeSummary<'a> {
    pub report: &'a Path,
    pub notes: &'a [String],
    pub excluded: Vec<&'a str>,
    pub subjects: Vec<DecodeSubject<'a>>,
    pub summary: &'a CohortSummary,
}

impl<'a> DecodeSummary<'a> {
    pub fn new(report: &'a CohortReport, path: &'a Path) -> Self {
        Self {
            report: path,
            notes: &report.notes,
            excluded: report.excluded.iter().map(|e| e.subject_id.as_str()).collect(),
            subjects: report
                .subjects
                .iter()
                .map(|s| DecodeSubject {
                    subject_id: &s.subject_id,
                    subset: s.decoder.as_ref().map(|d| d.subset.clone()).unwrap_or_default(),
                    nrmse: s.decoder.as_ref().map(|d| d.nrmse),
                    r: s.pearson.map(|t| t.effect_size),
                    random_p: s.random_test.as_ref().map(|t| t.p_value),
                    permutation_p: s.permutation_test.as_ref().map(|t| t.p_value),
                    timescale_s: s.psd.as_ref().map(|p| p.timescale_s),
                    warnings: &s.warnings,
                })
                .collect(),
            summary: &report.summary,
        }
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn print_decode(report: &CohortReport, path: &Path) {
    let summary = DecodeSummary::new(report, path);
    for n in summary.notes {
        println!("note: {n}");
    }
    println!(
        "{:<10} {:>7} {:>6} {:>8} {:>8} {:>9}  subset",
        "subject", "nrmse", "r", "p_rand", "p_perm", "tscale_s"
    );
    for s in &summary.subjects {
        let subset: Vec<&str> = s.subset.iter().map(|k| k.name()).collect();
        println!(
            "{:<10} {:>7} {:>6} {:>8} {:>8} {:>9}  {}",
            s.subject_id,
            opt(s.nrmse, 4),
            opt(s.r, 3),
            opt(s.random_p, 3),
            opt(s.permutation_p, 3),
            opt(s.timescale_s, 2),
            subset.join("+")
        );
        for w in s.warnings {
            println!("  warning: {w}");
        }
    }
    if !summary.excluded.is_empty() {
        println!("excluded by quality control: {}", summary.excluded.join(", "));
    }
    let c = &report.summary;
    println!("pooled r: {}", opt(c.pooled_pearson.map(|t| t.effect_size), 3));
    println!("mean nrmse: {} (sd {})", opt(c.nrmse_mean, 4), opt(c.nrmse_sd, 4));
    println!(
        "random test passed: {}/{}, permutation test passed: {}/{}",
        c.random_test_passed, c.subjects, c.permutation_test_passed, c.subjects
    );
    println!("timescale: {} ± {} s", opt(c.timescale_mean_s, 2), opt(c.timescale_sd_s, 2));
    println!("report written to {}", path.display());
}
