//! Protocol state of one live session, independent of the transport.

use std::fmt;

use flowtrace_core::dataio::{Provenance, SessionConfig, SessionData, SCHEMA_VERSION};
use flowtrace_core::decoder::{
    predict, probe_intensities, select_subset, window_metrics, DecoderModel, FlowProbe, MAX_SUBSET_SIZE,
    PROBE_QUESTIONS,
};
use flowtrace_core::metrics::{interpolate, single_trial_metrics, MetricKind, MetricsVector};
use flowtrace_core::pipeline::session_probe_metrics;
use flowtrace_core::task::{evaluate_trial, schedule_probes, ForceTrace, StaircaseState, TrialConfig};
use flowtrace_core::{derive_seed, Error, Result};
use serde::{Deserialize, Serialize};

/// Answered probes needed before the first live decoder fit.
pub const MIN_PROBES_FOR_DECODER: usize = 5;

/// Relative distance to a grid point below which a timestamp is snapped onto
/// it, so streams already on the metric grid pass through unchanged.
const SNAP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Practice,
    SkillMeasurement,
    /// Main session, 1-based.
    Main(usize),
    Rest,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Practice => f.write_str("practice"),
            Phase::SkillMeasurement => f.write_str("skill_measurement"),
            Phase::Main(k) => write!(f, "main_{k}"),
            Phase::Rest => f.write_str("rest"),
            Phase::Done => f.write_str("done"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "practice" => Phase::Practice,
            "skill_measurement" => Phase::SkillMeasurement,
            "rest" => Phase::Rest,
            "done" => Phase::Done,
            other => match other.strip_prefix("main_").and_then(|k| k.parse().ok()) {
                Some(k) if k > 0 => Phase::Main(k),
                _ => return Err(format!("unknown phase `{other}`")),
            },
        })
    }
}

impl Serialize for Phase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Sample { t: f64, force: f64 },
    ProbeResponse { r1: u8, r2: u8, r3: u8 },
    /// Leaves the practice or rest phase.
    Advance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    TrialStart {
        index: usize,
        band_width: f64,
        target_force: f64,
    },
    TrialEnd {
        index: usize,
        success: bool,
        metrics: MetricsVector,
    },
    ProbeRequest {
        questions: Vec<String>,
        probe_index: usize,
        trial_index: usize,
    },
    PhaseChange {
        phase: Phase,
    },
    FlowUpdate {
        trial_index: usize,
        intensity: f64,
    },
    Notice {
        message: String,
    },
    Error {
        message: String,
    },
}

/// Persisted protocol position. Together with the session document this is
/// enough to resume after a restart; a trial in progress is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveState {
    pub id: String,
    pub seed: u64,
    pub phase: Phase,
    pub finalized: bool,
    /// Trial index whose probe awaits an answer.
    pub pending_probe: Option<usize>,
    /// Client time before which the next trial may not open.
    pub not_before: Option<f64>,
    pub last_t: Option<f64>,
}

#[derive(Debug, Clone)]
struct RunningTrial {
    index: usize,
    config: TrialConfig,
    t0: f64,
    times: Vec<f64>,
    forces: Vec<f64>,
}

/// Result of handling one client message.
#[derive(Debug, Default)]
pub struct Outcome {
    pub messages: Vec<ServerMessage>,
    /// Session data or protocol position changed and should be written out.
    pub persist: bool,
}

impl Outcome {
    fn error(message: impl Into<String>) -> Self {
        Self {
            messages: vec![ServerMessage::Error { message: message.into() }],
            persist: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStatus {
    pub id: String,
    pub subject_id: String,
    pub seed: u64,
    pub phase: Phase,
    pub finalized: bool,
    pub config: SessionConfig,
    pub skill_trials_completed: usize,
    pub trials_completed: usize,
    pub total_trials: usize,
    pub probes_answered: usize,
    pub pending_probe: Option<usize>,
    pub decoder_subset: Option<Vec<MetricKind>>,
}

#[derive(Debug)]
pub struct LiveSession {
    pub state: LiveState,
    pub data: SessionData,
    running: Option<RunningTrial>,
    per_trial: Vec<MetricsVector>,
    decoder: Option<DecoderModel>,
    /// A notice for the current run of ignored samples was already sent.
    ignoring: bool,
}

impl LiveSession {
    pub fn create(id: String, subject_id: String, config: SessionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = schedule_probes(
            config.sessions,
            config.trials_per_session,
            config.probes_per_session,
            config.min_probe_gap,
            derive_seed(seed, 1),
        )?;
        let staircase = match config.band_width {
            Some(_) => None,
            None => Some(StaircaseState::new(config.staircase_params())?),
        };
        let data = SessionData {
            schema_version: SCHEMA_VERSION,
            subject_id,
            config,
            schedule,
            staircase,
            trials: Vec::new(),
            probes: Vec::new(),
            ground_truth_flow: None,
            provenance: Provenance::live(seed),
        };
        let state = LiveState {
            id,
            seed,
            phase: Phase::Practice,
            finalized: false,
            pending_probe: None,
            not_before: None,
            last_t: None,
        };
        Self::restore(state, data)
    }

    /// Rebuilds the in-memory caches from persisted state.
    pub fn restore(state: LiveState, data: SessionData) -> Result<Self> {
        data.validate()?;
        let per_trial = data.trials.iter().map(single_trial_metrics).collect::<Result<Vec<_>>>()?;
        let mut session = Self {
            state,
            data,
            running: None,
            per_trial,
            decoder: None,
            ignoring: false,
        };
        session.refit();
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.state.id
    }

    pub fn decoder(&self) -> Option<&DecoderModel> {
        self.decoder.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus {
            id: self.state.id.clone(),
            subject_id: self.data.subject_id.clone(),
            seed: self.state.seed,
            phase: self.state.phase,
            finalized: self.state.finalized,
            config: self.data.config.clone(),
            skill_trials_completed: self.data.staircase.as_ref().map_or(0, |s| s.history.len()),
            trials_completed: self.data.trials.len(),
            total_trials: self.data.config.total_trials(),
            probes_answered: self.data.probes.len(),
            pending_probe: self.state.pending_probe,
            decoder_subset: self.decoder.as_ref().map(|d| d.subset.clone()),
        }
    }

    /// Messages a newly connected client needs to catch up.
    pub fn greeting(&self) -> Vec<ServerMessage> {
        let mut out = vec![ServerMessage::PhaseChange { phase: self.state.phase }];
        if let Some(k) = self.state.pending_probe {
            out.push(self.probe_request(k));
        }
        out
    }

    /// Ends the session early. Any trial in progress is discarded.
    pub fn finalize(&mut self) -> Vec<ServerMessage> {
        self.running = None;
        self.state.pending_probe = None;
        self.state.finalized = true;
        if self.state.phase != Phase::Done {
            self.state.phase = Phase::Done;
            vec![ServerMessage::PhaseChange { phase: Phase::Done }]
        } else {
            Vec::new()
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Outcome {
        match msg {
            ClientMessage::Sample { t, force } => self.sample(t, force),
            ClientMessage::ProbeResponse { r1, r2, r3 } => self.answer_probe([r1, r2, r3]),
            ClientMessage::Advance => self.advance(),
        }
    }

    fn advance(&mut self) -> Outcome {
        let next = match self.state.phase {
            Phase::Practice if self.data.config.band_width.is_some() => Phase::Main(1),
            Phase::Practice => Phase::SkillMeasurement,
            Phase::Rest => Phase::Main(self.data.trials.len() / self.data.config.trials_per_session + 1),
            other => return Outcome::error(format!("cannot advance from phase {other}")),
        };
        self.state.phase = next;
        self.state.not_before = None;
        self.ignoring = false;
        Outcome {
            messages: vec![ServerMessage::PhaseChange { phase: next }],
            persist: true,
        }
    }

    fn ignore(&mut self, why: &str) -> Outcome {
        if self.ignoring {
            return Outcome::default();
        }
        self.ignoring = true;
        Outcome {
            messages: vec![ServerMessage::Notice {
                message: format!("samples ignored: {why}"),
            }],
            persist: false,
        }
    }

    fn current_trial_config(&self) -> Option<(usize, TrialConfig)> {
        match self.state.phase {
            Phase::SkillMeasurement => {
                let stair = self.data.staircase.as_ref()?;
                Some((stair.history.len(), self.data.config.trial_config(stair.current_band)))
            }
            Phase::Main(_) => {
                let band = self.data.config.band_width?;
                Some((self.data.trials.len(), self.data.config.trial_config(band)))
            }
            _ => None,
        }
    }

    fn sample(&mut self, t: f64, force: f64) -> Outcome {
        if !(t.is_finite() && force.is_finite() && force >= 0.0) {
            return Outcome::error(format!("sample needs finite t and non-negative force, got t={t} force={force}"));
        }
        if let Some(last) = self.state.last_t {
            if t < last {
                return Outcome::error(format!("timestamp regression: {t} after {last}"));
            }
        }
        self.state.last_t = Some(t);

        if self.running.is_some() {
            return self.continue_trial(t, force);
        }
        match self.state.phase {
            Phase::Practice => return Outcome::default(),
            Phase::Rest => return self.ignore("rest between sessions"),
            Phase::Done => return self.ignore("session finished"),
            _ => {}
        }
        if self.state.pending_probe.is_some() {
            return self.ignore("waiting for the probe answer");
        }
        if self.state.not_before.is_some_and(|nb| t < nb) {
            return self.ignore("rest between trials");
        }
        let Some((index, config)) = self.current_trial_config() else {
            return Outcome::error("no trial configuration for this phase");
        };
        if force > config.press_threshold {
            return self.ignore("release the press before the trial starts");
        }
        self.ignoring = false;
        self.running = Some(RunningTrial {
            index,
            config,
            t0: t,
            times: vec![0.0],
            forces: vec![force],
        });
        Outcome {
            messages: vec![ServerMessage::TrialStart {
                index,
                band_width: config.band_width,
                target_force: config.target_force,
            }],
            persist: false,
        }
    }

    fn continue_trial(&mut self, t: f64, force: f64) -> Outcome {
        let dt = self.data.config.sample_period();
        let trial = self.running.as_mut().expect("trial running");
        let mut tau = t - trial.t0;
        let k = (tau / dt).round();
        if (tau - k * dt).abs() < SNAP_TOLERANCE * dt {
            tau = k * dt;
        }
        trial.times.push(tau);
        trial.forces.push(force);
        let n = trial.config.samples_per_trial(dt);
        if tau < (n - 1) as f64 * dt {
            return Outcome::default();
        }
        let trial = self.running.take().expect("trial running");
        match self.complete_trial(trial, dt, n) {
            Ok(out) => out,
            Err(e) => Outcome::error(format!("trial discarded: {e}")),
        }
    }

    fn complete_trial(&mut self, trial: RunningTrial, dt: f64, n: usize) -> Result<Outcome> {
        let samples = interpolate(&trial.times, &trial.forces, dt, n);
        let record = evaluate_trial(ForceTrace::new(dt, samples)?, trial.config)?;
        let metrics = single_trial_metrics(&record)?;
        let mut messages = vec![ServerMessage::TrialEnd {
            index: trial.index,
            success: record.success,
            metrics,
        }];
        self.state.not_before = Some(trial.t0 + trial.config.trial_duration + trial.config.rest_duration);

        if self.state.phase == Phase::SkillMeasurement {
            let stair = self.data.staircase.as_mut().ok_or_else(|| Error::Protocol("no staircase".into()))?;
            stair.record(&record)?;
            let done = stair.history.len();
            let target = self.data.config.skill_trials.max(1);
            let skill = match stair.measured_skill() {
                Ok(s) if done >= target => Some(s),
                _ if done >= 3 * target => {
                    let bands = stair.transition_bands();
                    let tail = &bands[bands.len().saturating_sub(10)..];
                    let fallback = if tail.is_empty() {
                        stair.current_band
                    } else {
                        tail.iter().sum::<f64>() / tail.len() as f64
                    };
                    messages.push(ServerMessage::Notice {
                        message: format!(
                            "staircase did not reach 10 transitions in {done} trials; using {fallback:.4} N"
                        ),
                    });
                    Some(fallback)
                }
                _ => None,
            };
            if let Some(band) = skill {
                self.data.config.band_width = Some(band);
                self.state.phase = Phase::Rest;
                self.state.not_before = None;
                messages.push(ServerMessage::PhaseChange { phase: Phase::Rest });
            }
            return Ok(Outcome { messages, persist: true });
        }

        let k = self.data.trials.len();
        self.data.trials.push(record);
        self.per_trial.push(metrics);
        if self.data.schedule.global_indices().contains(&k) {
            // The flow update for a probe trial waits for the answer and the
            // refit it triggers.
            self.state.pending_probe = Some(k);
            messages.push(self.probe_request(k));
        } else {
            messages.extend(self.flow_update(k));
            messages.extend(self.end_of_block());
        }
        Ok(Outcome { messages, persist: true })
    }

    fn flow_update(&self, k: usize) -> Option<ServerMessage> {
        let model = self.decoder.as_ref()?;
        let m = window_metrics(&self.per_trial, k, self.data.config.probe_window).ok()?;
        Some(ServerMessage::FlowUpdate {
            trial_index: k,
            intensity: predict(model, &m),
        })
    }

    fn probe_request(&self, trial_index: usize) -> ServerMessage {
        ServerMessage::ProbeRequest {
            questions: PROBE_QUESTIONS.iter().map(|q| q.to_string()).collect(),
            probe_index: self.data.probes.len() + 1,
            trial_index,
        }
    }

    /// Phase change after the last trial of a main session.
    fn end_of_block(&mut self) -> Vec<ServerMessage> {
        let done = self.data.trials.len();
        let per = self.data.config.trials_per_session;
        if done == 0 || done % per != 0 {
            return Vec::new();
        }
        let next = if done >= self.data.config.total_trials() {
            Phase::Done
        } else {
            Phase::Rest
        };
        self.state.phase = next;
        self.state.not_before = None;
        vec![ServerMessage::PhaseChange { phase: next }]
    }

    fn answer_probe(&mut self, responses: [u8; 3]) -> Outcome {
        let Some(k) = self.state.pending_probe else {
            return Outcome::error("no probe is pending");
        };
        let probe = match FlowProbe::new(self.data.probes.len() + 1, k, responses) {
            Ok(p) => p,
            Err(e) => return Outcome::error(e.to_string()),
        };
        self.data.probes.push(probe);
        self.state.pending_probe = None;
        self.ignoring = false;
        self.refit();
        let mut messages: Vec<ServerMessage> = self.flow_update(k).into_iter().collect();
        messages.extend(self.end_of_block());
        Outcome { messages, persist: true }
    }

    /// Refits the decoder on every answered probe.
    fn refit(&mut self) {
        if self.data.probes.len() < MIN_PROBES_FOR_DECODER {
            return;
        }
        let fitted = session_probe_metrics(&self.data, &self.per_trial).and_then(|m| {
            select_subset(&probe_intensities(&self.data.probes), &m, MAX_SUBSET_SIZE)
        });
        match fitted {
            Ok(sel) => self.decoder = Some(sel.model),
            Err(e) => {
                tracing::warn!(session = %self.state.id, error = %e, "decoder refit failed");
                self.decoder = None;
            }
        }
    }
}
