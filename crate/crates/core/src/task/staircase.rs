use serde::{Deserialize, Serialize};

use super::trial::TrialRecord;
use crate::error::{Error, Result};

/// Number of trailing reversals averaged into the skill estimate.
pub const SKILL_TRANSITIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseParams {
    /// Trial-count coefficient of the step size, in N·trials.
    pub k1: f64,
    /// Completion-time coefficient of the step size, in N·s.
    pub k2: f64,
    /// Band width of the first trial, in N.
    pub initial_band: f64,
}

impl Default for StaircaseParams {
    fn default() -> Self {
        Self {
            k1: 0.5,
            k2: 0.05,
            initial_band: 0.2,
        }
    }
}

impl StaircaseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k1", self.k1), ("k2", self.k2), ("initial_band", self.initial_band)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("staircase {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseEntry {
    pub band: f64,
    pub success: bool,
}

/// Adaptive difficulty procedure.
///
/// After trial `i` (1-based) run at band `b`, the band moves by
/// `min(k1 / i, k2 / t_com, b / 2)`, down on success and up on failure. Failed
/// trials use the trial duration as their completion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseState {
    pub params: StaircaseParams,
    /// Number of trials already run; the next trial has index `trial_index + 1`.
    pub trial_index: usize,
    pub current_band: f64,
    pub history: Vec<StaircaseEntry>,
    /// 1-based trial indices at which the band sequence reverses direction.
    pub transition_points: Vec<usize>,
}

impl StaircaseState {
    pub fn new(params: StaircaseParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            trial_index: 0,
            current_band: params.initial_band,
            history: Vec::new(),
            transition_points: Vec::new(),
        })
    }

    /// Step magnitude for the upcoming trial given its completion time.
    pub fn step_size(&self, completing_time: f64) -> f64 {
        let i = (self.trial_index + 1) as f64;
        (self.params.k1 / i)
            .min(self.params.k2 / completing_time)
            .min(0.5 * self.current_band)
    }

    /// Advances past one trial and returns the next band width.
    ///
    /// `completing_time` is required for successful trials; failures are
    /// censored to `trial_duration`.
    pub fn advance(&mut self, success: bool, completing_time: Option<f64>, trial_duration: f64) -> Result<f64> {
        let t_com = if success {
            completing_time.ok_or_else(|| Error::invalid("successful trial without completing time"))?
        } else {
            trial_duration
        };
        self.apply(success, t_com)
    }

    /// Applies one outcome with an explicit completion time.
    pub fn apply(&mut self, success: bool, t_com: f64) -> Result<f64> {
        if !(self.current_band > 0.0) {
            return Err(Error::invalid("staircase band must be positive"));
        }
        if !(t_com.is_finite() && t_com > 0.0) {
            return Err(Error::invalid(format!("completing time must be positive, got {t_com}")));
        }
        let step = self.step_size(t_com);
        let next = if success {
            self.current_band - step
        } else {
            self.current_band + step
        };

        self.trial_index += 1;
        if let Some(prev) = self.history.last() {
            if prev.success != success {
                self.transition_points.push(self.trial_index);
            }
        }
        self.history.push(StaircaseEntry {
            band: self.current_band,
            success,
        });
        self.current_band = next;
        Ok(next)
    }

    /// Advances using an evaluated trial.
    pub fn record(&mut self, outcome: &TrialRecord) -> Result<f64> {
        if (outcome.config.band_width - self.current_band).abs() > 1e-12 * self.current_band.max(1.0) {
            return Err(Error::invalid(format!(
                "trial ran at band {} but the staircase is at {}",
                outcome.config.band_width, self.current_band
            )));
        }
        self.advance(outcome.success, outcome.success_latch, outcome.config.trial_duration)
    }

    /// Bands at the recorded transition points, in order.
    pub fn transition_bands(&self) -> Vec<f64> {
        self.transition_points
            .iter()
            .map(|&i| self.history[i - 1].band)
            .collect()
    }

    /// Mean band over the last ten transition points.
    pub fn measured_skill(&self) -> Result<f64> {
        let bands = self.transition_bands();
        if bands.len() < SKILL_TRANSITIONS {
            return Err(Error::insufficient(format!(
                "{} transition points recorded, {SKILL_TRANSITIONS} required",
                bands.len()
            )));
        }
        let tail = &bands[bands.len() - SKILL_TRANSITIONS..];
        Ok(tail.iter().sum::<f64>() / SKILL_TRANSITIONS as f64)
    }

    pub fn success_rate(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        let hits = self.history.iter().filter(|e| e.success).count();
        Some(hits as f64 / self.history.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn at(params: StaircaseParams, trial_index: usize, band: f64) -> StaircaseState {
        let mut s = StaircaseState::new(params).unwrap();
        s.trial_index = trial_index;
        s.current_band = band;
        s
    }

    #[test]
    fn success_step_all_terms_equal() {
        let mut s = at(StaircaseParams::default(), 9, 0.10);
        let next = s.advance(true, Some(1.0), 3.0).unwrap();
        assert_abs_diff_eq!(next, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn failure_step_capped() {
        let mut s = at(StaircaseParams::default(), 0, 0.20);
        let next = s.apply(false, 0.5).unwrap();
        assert_abs_diff_eq!(next, 0.30, epsilon = 1e-12);
    }

    #[test]
    fn step_vanishes_with_trial_count() {
        let s = at(StaircaseParams::default(), 1_000_000, 0.1);
        assert!(s.step_size(3.0) <= 0.5 / 1_000_001.0 + 1e-15);
    }

    #[test]
    fn transitions_and_skill() {
        let mut s = StaircaseState::new(StaircaseParams::default()).unwrap();
        // Alternating outcomes make every trial after the first a reversal.
        for k in 0..12 {
            s.advance(k % 2 == 0, Some(1.0), 3.0).unwrap();
        }
        assert_eq!(s.transition_points, (2..=12).collect::<Vec<_>>());
        let bands = s.transition_bands();
        let expected = bands[bands.len() - 10..].iter().sum::<f64>() / 10.0;
        assert_abs_diff_eq!(s.measured_skill().unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn skill_constant_and_alternating_transitions() {
        let mut s = StaircaseState::new(StaircaseParams::default()).unwrap();
        s.history = (0..11)
            .map(|k| StaircaseEntry { band: 0.04, success: k % 2 == 0 })
            .collect();
        s.transition_points = (2..=11).collect();
        assert_abs_diff_eq!(s.measured_skill().unwrap(), 0.04, epsilon = 1e-15);

        s.history = (0..11)
            .map(|k| StaircaseEntry {
                band: if k % 2 == 0 { 0.03 } else { 0.05 },
                success: k % 2 == 0,
            })
            .collect();
        assert_abs_diff_eq!(s.measured_skill().unwrap(), 0.04, epsilon = 1e-15);
    }

    #[test]
    fn too_few_transitions() {
        let mut s = StaircaseState::new(StaircaseParams::default()).unwrap();
        for _ in 0..20 {
            s.advance(true, Some(1.0), 3.0).unwrap();
        }
        assert!(matches!(s.measured_skill(), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn success_requires_completion_time() {
        let mut s = StaircaseState::new(StaircaseParams::default()).unwrap();
        assert!(s.advance(true, None, 3.0).is_err());
    }
}
