use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when comparing sample times against configured durations.
const TIME_EPS: f64 = 1e-9;
/// Slack on the band edge so that values exactly on the boundary count as
/// in-band despite rounding.
const BAND_EPS: f64 = 1e-12;

/// Mechanics of a single trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    /// Centre of the target band in N.
    pub target_force: f64,
    /// Full width of the target band in N; a sample is in-band iff
    /// `|F - target| <= band_width / 2`.
    pub band_width: f64,
    /// Length of the pressing window in s.
    pub trial_duration: f64,
    /// Continuous in-band time required for success, in s.
    pub hold_duration: f64,
    /// Rest between trials in s.
    pub rest_duration: f64,
    /// Force above which a press is considered detected, in N.
    pub press_threshold: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            target_force: 1.0,
            band_width: 0.2,
            trial_duration: 3.0,
            hold_duration: 0.5,
            rest_duration: 2.0,
            press_threshold: 0.01,
        }
    }
}

impl TrialConfig {
    pub fn with_band(mut self, band_width: f64) -> Self {
        self.band_width = band_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.target_force,
            self.band_width,
            self.trial_duration,
            self.hold_duration,
            self.rest_duration,
            self.press_threshold,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("trial config contains a non-finite value"));
        }
        if self.trial_duration <= 0.0 || self.hold_duration <= 0.0 || self.rest_duration <= 0.0 {
            return Err(Error::invalid("all durations must be positive"));
        }
        if self.hold_duration > self.trial_duration {
            return Err(Error::invalid("hold_duration exceeds trial_duration"));
        }
        if self.band_width <= 0.0 {
            return Err(Error::invalid("band_width must be positive"));
        }
        if self.press_threshold < 0.0 || self.press_threshold >= self.target_force {
            return Err(Error::invalid(
                "press_threshold must be non-negative and below target_force",
            ));
        }
        Ok(())
    }

    pub fn in_band(&self, force: f64) -> bool {
        (force - self.target_force).abs() <= self.band_width / 2.0 + BAND_EPS
    }

    /// Number of samples a trace at `dt` has over one pressing window.
    pub fn samples_per_trial(&self, dt: f64) -> usize {
        (self.trial_duration / dt - TIME_EPS).ceil().max(1.0) as usize
    }

    fn hold_samples(&self, dt: f64) -> usize {
        (self.hold_duration / dt - TIME_EPS).ceil().max(1.0) as usize
    }
}

/// Uniformly sampled fingertip force for one trial. Sample `i` covers the
/// interval `[i*dt, (i+1)*dt)` from trial onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrace {
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl ForceTrace {
    pub fn new(dt: f64, samples: Vec<f64>) -> Result<Self> {
        let trace = Self { dt, samples };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("sample period must be positive, got {}", self.dt)));
        }
        if let Some((i, v)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!("sample {i} is not a finite non-negative force: {v}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_of(&self, index: usize) -> f64 {
        index as f64 * self.dt
    }
}

/// One evaluated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrialConfig,
    pub trace: ForceTrace,
    pub success: bool,
    /// Time of the first sample above the press threshold.
    pub press_onset: Option<f64>,
    /// Time of the first in-band sample at or after press onset.
    pub band_entry: Option<f64>,
    /// Time at which the first qualifying hold completed.
    pub success_latch: Option<f64>,
}

impl TrialRecord {
    /// Index of the press-onset sample.
    pub fn onset_index(&self) -> Option<usize> {
        let threshold = self.config.press_threshold;
        self.trace.samples.iter().position(|&f| f > threshold)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.success != self.success_latch.is_some() {
            return Err(Error::invalid("success flag disagrees with success_latch"));
        }
        if let (Some(onset), Some(entry)) = (self.press_onset, self.band_entry) {
            if entry + TIME_EPS < onset {
                return Err(Error::invalid("band_entry precedes press_onset"));
            }
        }
        if let (Some(entry), Some(latch)) = (self.band_entry, self.success_latch) {
            if latch + TIME_EPS < entry + self.config.hold_duration {
                return Err(Error::invalid("success_latch earlier than band_entry + hold"));
            }
        }
        Ok(())
    }
}

/// Evaluates a complete trial trace against `config`.
pub fn evaluate_trial(trace: ForceTrace, config: TrialConfig) -> Result<TrialRecord> {
    config.validate()?;
    trace.validate()?;
    if trace.is_empty() {
        return Err(Error::invalid("empty force trace"));
    }
    if trace.len() > config.samples_per_trial(trace.dt) {
        return Err(Error::invalid(format!(
            "trace of {} samples at dt={} exceeds the {} s trial",
            trace.len(),
            trace.dt,
            config.trial_duration
        )));
    }
    let mut stepper = TrialStepper::new(config, trace.dt)?;
    for (i, &force) in trace.samples.iter().enumerate() {
        stepper.push(trace.time_of(i), force)?;
    }
    Ok(stepper.finish())
}

/// Events emitted while a trial is streamed sample by sample.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialEvent {
    Started,
    SuccessLatched { t: f64 },
    Ended { success: bool },
}

/// Streaming trial evaluator.
///
/// Samples must lie on the `dt` grid of the trial; their times are taken from
/// the running sample count and the supplied timestamps are only checked for
/// ordering. Pushing the samples of a trace and calling [`finish`] yields the
/// same record as [`evaluate_trial`].
///
/// [`finish`]: TrialStepper::finish
#[derive(Debug, Clone)]
pub struct TrialStepper {
    config: TrialConfig,
    dt: f64,
    capacity: usize,
    hold_samples: usize,
    samples: Vec<f64>,
    last_t: Option<f64>,
    onset: Option<usize>,
    entry: Option<usize>,
    run_start: Option<usize>,
    latch: Option<usize>,
    ended: bool,
}

impl TrialStepper {
    pub fn new(config: TrialConfig, dt: f64) -> Result<Self> {
        config.validate()?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("sample period must be positive"));
        }
        let capacity = config.samples_per_trial(dt);
        Ok(Self {
            config,
            dt,
            capacity,
            hold_samples: config.hold_samples(dt),
            samples: Vec::with_capacity(capacity),
            last_t: None,
            onset: None,
            entry: None,
            run_start: None,
            latch: None,
            ended: false,
        })
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn is_complete(&self) -> bool {
        self.ended
    }

    pub fn push(&mut self, t: f64, force: f64) -> Result<Vec<TrialEvent>> {
        if self.ended {
            return Err(Error::Protocol("sample pushed after trial end".into()));
        }
        if let Some(last) = self.last_t {
            if t < last {
                return Err(Error::Protocol(format!("timestamp regression: {t} after {last}")));
            }
        }
        if !force.is_finite() || force < 0.0 {
            return Err(Error::invalid(format!("force must be finite and non-negative, got {force}")));
        }
        let index = self.samples.len();
        if index == 0 && force > self.config.press_threshold {
            return Err(Error::PrematurePress {
                force,
                threshold: self.config.press_threshold,
            });
        }
        self.last_t = Some(t);
        self.samples.push(force);

        let mut events = Vec::new();
        if index == 0 {
            events.push(TrialEvent::Started);
        }
        if self.onset.is_none() && force > self.config.press_threshold {
            self.onset = Some(index);
        }
        if self.config.in_band(force) {
            if self.onset.is_some() && self.entry.is_none() {
                self.entry = Some(index);
            }
            let start = *self.run_start.get_or_insert(index);
            if self.latch.is_none() && index + 1 - start >= self.hold_samples {
                let end = index + 1;
                self.latch = Some(end);
                events.push(TrialEvent::SuccessLatched { t: end as f64 * self.dt });
            }
        } else {
            self.run_start = None;
        }
        if self.samples.len() >= self.capacity {
            self.ended = true;
            events.push(TrialEvent::Ended { success: self.latch.is_some() });
        }
        Ok(events)
    }

    /// Closes the trial and returns its record. A trial cut short keeps the
    /// samples received so far.
    pub fn finish(self) -> TrialRecord {
        let dt = self.dt;
        let to_time = |i: usize| i as f64 * dt;
        TrialRecord {
            config: self.config,
            success: self.latch.is_some(),
            press_onset: self.onset.map(to_time),
            band_entry: self.entry.map(to_time),
            success_latch: self.latch.map(to_time),
            trace: ForceTrace {
                dt,
                samples: self.samples,
            },
        }
    }
}
