//! Session, trace and report persistence.
//!
//! Traces are CSV (`t_s,force_n`); sessions and reports are single JSON
//! documents with a fixed key order, so identical inputs produce identical
//! bytes. Every write goes to a temporary file that is renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::FlowProbe;
use crate::error::{Error, Result};
use crate::task::{ForceTrace, ProbeSchedule, StaircaseParams, StaircaseState, TrialConfig, TrialRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRACE_HEADER: &str = "t_s,force_n";

/// Layout of one experiment: trial mechanics, skill measurement and the main
/// sessions with their probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub target_force: f64,
    /// Fixed band for the main sessions; measured by the staircase when unset.
    pub band_width: Option<f64>,
    pub trial_duration: f64,
    pub hold_duration: f64,
    pub rest_duration: f64,
    pub press_threshold: f64,
    pub k1: f64,
    pub k2: f64,
    pub initial_band: f64,
    pub skill_trials: usize,
    pub sessions: usize,
    pub trials_per_session: usize,
    pub probes_per_session: usize,
    pub min_probe_gap: usize,
    pub probe_window: usize,
    /// Rate at which traces are stored and metrics computed, in Hz.
    pub sample_rate_hz: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let trial = TrialConfig::default();
        let stair = StaircaseParams::default();
        Self {
            target_force: trial.target_force,
            band_width: None,
            trial_duration: trial.trial_duration,
            hold_duration: trial.hold_duration,
            rest_duration: trial.rest_duration,
            press_threshold: trial.press_threshold,
            k1: stair.k1,
            k2: stair.k2,
            initial_band: stair.initial_band,
            skill_trials: 50,
            sessions: 3,
            trials_per_session: 100,
            probes_per_session: 4,
            min_probe_gap: 12,
            probe_window: 5,
            sample_rate_hz: 1000.0,
        }
    }
}

impl SessionConfig {
    pub fn trial_config(&self, band_width: f64) -> TrialConfig {
        TrialConfig {
            target_force: self.target_force,
            band_width,
            trial_duration: self.trial_duration,
            hold_duration: self.hold_duration,
            rest_duration: self.rest_duration,
            press_threshold: self.press_threshold,
        }
    }

    pub fn staircase_params(&self) -> StaircaseParams {
        StaircaseParams {
            k1: self.k1,
            k2: self.k2,
            initial_band: self.initial_band,
        }
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn total_trials(&self) -> usize {
        self.sessions * self.trials_per_session
    }

    pub fn validate(&self) -> Result<()> {
        self.trial_config(self.band_width.unwrap_or(self.initial_band)).validate()?;
        self.staircase_params().validate()?;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("sample_rate_hz must be positive"));
        }
        if self.sessions == 0 || self.trials_per_session == 0 {
            return Err(Error::invalid("sessions and trials_per_session must be positive"));
        }
        if self.probe_window == 0 || self.probe_window > self.min_probe_gap {
            return Err(Error::invalid("probe_window must be in 1..=min_probe_gap"));
        }
        if self.probes_per_session * self.min_probe_gap > self.trials_per_session {
            return Err(Error::invalid(format!(
                "{} probes with gap {} do not fit in {} trials",
                self.probes_per_session, self.min_probe_gap, self.trials_per_session
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `simulated`, `live` or `imported`.
    pub source: String,
    pub seed: Option<u64>,
    pub tool_version: String,
}

impl Provenance {
    pub fn simulated(seed: u64) -> Self {
        Self {
            source: "simulated".into(),
            seed: Some(seed),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn live(seed: u64) -> Self {
        Self {
            source: "live".into(),
            seed: Some(seed),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Everything recorded for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionData {
    pub schema_version: u32,
    pub subject_id: String,
    pub config: SessionConfig,
    pub schedule: ProbeSchedule,
    pub staircase: Option<StaircaseState>,
    /// Main-session trials, sessions concatenated in order.
    pub trials: Vec<TrialRecord>,
    pub probes: Vec<FlowProbe>,
    /// Per-trial ground-truth intensity; simulated subjects only.
    pub ground_truth_flow: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl SessionData {
    pub fn validate(&self) -> Result<()> {
        for p in &self.probes {
            if p.trial_index >= self.trials.len() {
                return Err(Error::invalid(format!(
                    "probe {} refers to trial {} of {}",
                    p.probe_index,
                    p.trial_index,
                    self.trials.len()
                )));
            }
        }
        if self.trials.len() > self.config.total_trials() {
            return Err(Error::invalid("more trials than the configured sessions hold"));
        }
        Ok(())
    }

    pub fn success_rate(&self) -> Option<f64> {
        if self.trials.is_empty() {
            return None;
        }
        Some(self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len() as f64)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn trace_csv(trace: &ForceTrace) -> String {
    let mut out = String::with_capacity(trace.len() * 24 + 16);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (i, f) in trace.samples.iter().enumerate() {
        out.push_str(&format!("{},{}\n", trace.time_of(i), f));
    }
    out
}

pub fn write_trace(trace: &ForceTrace, path: &Path) -> Result<()> {
    trace.validate()?;
    write_atomic(path, trace_csv(trace).as_bytes())
}

/// Reads a trace CSV. The sample period is taken from the first two rows and
/// must hold for every row.
pub fn read_trace(path: &Path) -> Result<ForceTrace> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_trace(BufReader::new(file))
}

pub fn parse_trace(reader: impl BufRead) -> Result<ForceTrace> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == TRACE_HEADER => {}
        Some(Ok(h)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{TRACE_HEADER}`, found `{h}`"),
            })
        }
        Some(Err(e)) => return Err(e.into()),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(t), Some(f), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected two comma-separated fields".into(),
            });
        };
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("`{s}`: {e}"),
            })
        };
        let (t, f) = (parse(t)?, parse(f)?);
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Format(format!("line {line_no}: time {t} not after {prev}")));
            }
        }
        times.push(t);
        samples.push(f);
    }
    if times.len() < 2 {
        return Err(Error::Format("a trace needs at least two rows to define its sample period".into()));
    }
    if times[0].abs() > 1e-12 {
        return Err(Error::Format(format!("trace must start at t=0, starts at {}", times[0])));
    }
    let dt = times[1] - times[0];
    for (i, &t) in times.iter().enumerate() {
        if (t - i as f64 * dt).abs() > 1e-6 * dt.max(1e-3) {
            return Err(Error::Format(format!("row {} at t={t} is off the {dt} s grid", i + 2)));
        }
    }
    ForceTrace::new(dt, samples)
}

/// How traces are stored in a session document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceStorage {
    #[default]
    Inline,
    /// One CSV per trial in a directory next to the session file.
    Referenced,
    /// As `Referenced`, but trace files that already exist are kept. Suited to
    /// sessions that only ever append trials.
    ReferencedAppend,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TraceDoc {
    Inline { dt: f64, samples: Vec<f64> },
    File { path: String },
}

#[derive(Serialize, Deserialize)]
struct TrialDoc {
    config: TrialConfig,
    success: bool,
    press_onset: Option<f64>,
    band_entry: Option<f64>,
    success_latch: Option<f64>,
    trace: TraceDoc,
}

#[derive(Serialize, Deserialize)]
struct SessionDoc {
    schema_version: u32,
    subject_id: String,
    config: SessionConfig,
    schedule: ProbeSchedule,
    staircase: Option<StaircaseState>,
    trials: Vec<TrialDoc>,
    probes: Vec<FlowProbe>,
    ground_truth_flow: Option<Vec<f64>>,
    provenance: Provenance,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn trace_dir_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PathBuf::from(format!("{stem}_traces"))
}

/// Serialises a session to JSON bytes with inline traces.
pub fn session_to_json(session: &SessionData) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(session)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_session(session: &SessionData, path: &Path, storage: TraceStorage) -> Result<()> {
    session.validate()?;
    match storage {
        TraceStorage::Inline => write_atomic(path, &session_to_json(session)?),
        TraceStorage::Referenced | TraceStorage::ReferencedAppend => {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let rel_dir = trace_dir_for(path);
            fs::create_dir_all(base.join(&rel_dir))?;
            let mut trials = Vec::with_capacity(session.trials.len());
            for (i, t) in session.trials.iter().enumerate() {
                let rel = rel_dir.join(format!("trial_{i:04}.csv"));
                let full = base.join(&rel);
                if storage == TraceStorage::Referenced || !full.exists() {
                    write_trace(&t.trace, &full)?;
                }
                trials.push(TrialDoc {
                    config: t.config,
                    success: t.success,
                    press_onset: t.press_onset,
                    band_entry: t.band_entry,
                    success_latch: t.success_latch,
                    trace: TraceDoc::File {
                        path: rel.to_string_lossy().replace('\\', "/"),
                    },
                });
            }
            let doc = SessionDoc {
                schema_version: session.schema_version,
                subject_id: session.subject_id.clone(),
                config: session.config.clone(),
                schedule: session.schedule.clone(),
                staircase: session.staircase.clone(),
                trials,
                probes: session.probes.clone(),
                ground_truth_flow: session.ground_truth_flow.clone(),
                provenance: session.provenance.clone(),
            };
            let mut bytes = serde_json::to_vec(&doc)?;
            bytes.push(b'\n');
            write_atomic(path, &bytes)
        }
    }
}

/// Reads a session; referenced traces are resolved relative to the session
/// file.
pub fn read_session(path: &Path) -> Result<SessionData> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let version: VersionProbe = serde_json::from_slice(&bytes)?;
    if version.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: version.schema_version,
        });
    }
    let doc: SessionDoc = serde_json::from_slice(&bytes)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let trials = doc
        .trials
        .into_iter()
        .map(|t| {
            let trace = match t.trace {
                TraceDoc::Inline { dt, samples } => ForceTrace::new(dt, samples)?,
                TraceDoc::File { path } => {
                    let full = base.join(&path);
                    if !full.exists() {
                        return Err(Error::MissingFile(full));
                    }
                    read_trace(&full)?
                }
            };
            let record = TrialRecord {
                config: t.config,
                trace,
                success: t.success,
                press_onset: t.press_onset,
                band_entry: t.band_entry,
                success_latch: t.success_latch,
            };
            record.check_invariants()?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    let session = SessionData {
        schema_version: doc.schema_version,
        subject_id: doc.subject_id,
        config: doc.config,
        schedule: doc.schedule,
        staircase: doc.staircase,
        trials,
        probes: doc.probes,
        ground_truth_flow: doc.ground_truth_flow,
        provenance: doc.provenance,
    };
    session.validate()?;
    Ok(session)
}

/// Session files (`*.json`) in a directory, sorted by name.
pub fn list_sessions(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

/// Serialises any report with pretty printing and a trailing newline.
pub fn report_to_json<T: Serialize>(report: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    write_atomic(path, &report_to_json(report)?)
}
