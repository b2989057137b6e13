//! Synthetic subjects driven by a closed-loop force-control model.
//!
//! Each loop update observes the disk height, issues a corrective motor
//! command, quantises it to the minimum modulation step and adds output noise:
//!
//! ```text
//! H   = k_H (F + w_M) + w_V          observed height, k_H = 1 / k_F
//! C   = k_F (H_0 - H) + w_C          motor command
//! M   = q(C, step)                   quantised modulation
//! F  <- max(0, F + M + w_F)          applied every `period` seconds
//! ```
//!
//! The loop period and modulation step shrink as flow intensity rises.
//!
//! Each noise term is drawn once per loop update with standard deviation
//! `sigma * period^noise_exponent` (period in s), so a sigma is the spread of a
//! one-second loop. With a zero exponent every update is equally noisy and a
//! faster loop accumulates more noise per second than a slow one; the default
//! exponent makes noise grow with the time between corrections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Provenance, SessionConfig, SessionData, SCHEMA_VERSION};
use crate::decoder::FlowProbe;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::task::{evaluate_trial, ForceTrace, ProbeSchedule, StaircaseState, TrialConfig, TrialRecord};

pub const MIN_INTENSITY: f64 = 1.0;
pub const MAX_INTENSITY: f64 = 7.0;

/// Loop period and minimum modulation step of the force-control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    /// Loop updating period in s.
    pub period: f64,
    /// Minimum modulation step in N.
    pub step: f64,
}

impl LoopParams {
    pub const IN_FLOW: LoopParams = LoopParams { period: 0.15, step: 0.015 };
    pub const OUT_FLOW: LoopParams = LoopParams { period: 0.30, step: 0.030 };
}

/// Model gains and noise levels.
///
/// The default noise levels were calibrated once with the
/// `calibrate_noise` example so that 100 trials at a 0.055 N band succeed
/// about 61% of the time at the in-flow anchor and 47% at the out-flow anchor.
/// Sigmas are per-update spreads at a 1 s loop period; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Force-per-height gain of the motor command; the display gain is its
    /// inverse.
    pub k_f: f64,
    /// Force output noise, N.
    pub sigma_f: f64,
    /// Decision noise on the motor command, N.
    pub sigma_c: f64,
    /// Force measurement noise, N.
    pub sigma_m: f64,
    /// Visual observation noise, in height units.
    pub sigma_v: f64,
    /// Growth of the per-update noise spread with the loop period.
    pub noise_exponent: f64,
    /// Loop parameters at intensity 7.
    pub inflow_anchor: LoopParams,
    /// Loop parameters at intensity 1.
    pub outflow_anchor: LoopParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            k_f: 1.0,
            sigma_f: CALIBRATED_SIGMA_F,
            sigma_c: CALIBRATED_SIGMA_C,
            sigma_m: CALIBRATED_SIGMA_M,
            sigma_v: CALIBRATED_SIGMA_V,
            noise_exponent: CALIBRATED_NOISE_EXPONENT,
            inflow_anchor: LoopParams::IN_FLOW,
            outflow_anchor: LoopParams::OUT_FLOW,
        }
    }
}

pub const CALIBRATED_SIGMA_F: f64 = 0.3;
pub const CALIBRATED_SIGMA_C: f64 = 0.2;
pub const CALIBRATED_SIGMA_M: f64 = 0.0;
pub const CALIBRATED_SIGMA_V: f64 = 0.0;
pub const CALIBRATED_NOISE_EXPONENT: f64 = 1.25;

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_f.is_finite() && self.k_f > 0.0) {
            return Err(Error::invalid("k_f must be positive"));
        }
        for (name, s) in [
            ("sigma_f", self.sigma_f),
            ("sigma_c", self.sigma_c),
            ("sigma_m", self.sigma_m),
            ("sigma_v", self.sigma_v),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.noise_exponent.is_finite() {
            return Err(Error::invalid("noise_exponent must be finite"));
        }
        for anchor in [self.inflow_anchor, self.outflow_anchor] {
            if !(anchor.period > 0.0 && anchor.step > 0.0) {
                return Err(Error::invalid("loop anchors must be positive"));
            }
        }
        Ok(())
    }

    /// Multiplier applied to every sigma for a loop with the given period.
    pub fn noise_scale(&self, period: f64) -> f64 {
        period.powf(self.noise_exponent)
    }

    /// Maps a flow intensity on the 1..7 scale to loop parameters by linear
    /// interpolation between the out-flow (1) and in-flow (7) anchors.
    pub fn flow_to_loop_params(&self, intensity: f64) -> Result<LoopParams> {
        if !(MIN_INTENSITY..=MAX_INTENSITY).contains(&intensity) {
            return Err(Error::invalid(format!("flow intensity {intensity} outside [1, 7]")));
        }
        let w = (intensity - MIN_INTENSITY) / (MAX_INTENSITY - MIN_INTENSITY);
        let lerp = |a: f64, b: f64| a + w * (b - a);
        Ok(LoopParams {
            period: lerp(self.outflow_anchor.period, self.inflow_anchor.period),
            step: lerp(self.outflow_anchor.step, self.inflow_anchor.step),
        })
    }
}

/// Sign-preserving quantiser: commands larger than one step are truncated
/// toward zero to a whole number of steps, smaller ones become a single step
/// in their own direction.
pub fn quantize_command(command: f64, step: f64) -> f64 {
    if command.abs() > step {
        (command / step).trunc() * step
    } else if command < 0.0 {
        -step
    } else {
        step
    }
}

/// Simulates one trial and returns its force trace sampled at `dt`.
///
/// Force starts at zero and the first loop update happens one loop period
/// after onset. Between updates the force is held.
pub fn simulate_trial(
    params: &SimParams,
    loop_params: LoopParams,
    config: &TrialConfig,
    dt: f64,
    seed: u64,
) -> Result<ForceTrace> {
    params.validate()?;
    config.validate()?;
    if !(loop_params.period > 0.0 && loop_params.step > 0.0) {
        return Err(Error::invalid("loop period and step must be positive"));
    }
    if !(dt > 0.0) || loop_params.period < dt {
        return Err(Error::invalid(format!(
            "loop period {} shorter than sample period {dt}",
            loop_params.period
        )));
    }
    let n = config.samples_per_trial(dt);
    let k_h = 1.0 / params.k_f;
    let target_height = k_h * config.target_force;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = params.noise_scale(loop_params.period);
    let noise = |sigma: f64, rng: &mut ChaCha8Rng| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * scale * z
    };

    let mut samples = Vec::with_capacity(n);
    let mut force = 0.0f64;
    let mut update = 1usize;
    let mut next_index = update_index(update, loop_params.period, dt);
    for i in 0..n {
        while i >= next_index {
            // Draw order is fixed so traces are bit-reproducible per seed.
            let w_m = noise(params.sigma_m, &mut rng);
            let w_v = noise(params.sigma_v, &mut rng);
            let w_c = noise(params.sigma_c, &mut rng);
            let w_f = noise(params.sigma_f, &mut rng);
            let height = k_h * (force + w_m) + w_v;
            let command = params.k_f * (target_height - height) + w_c;
            force = (force + quantize_command(command, loop_params.step) + w_f).max(0.0);
            update += 1;
            next_index = update_index(update, loop_params.period, dt);
        }
        samples.push(force);
    }
    ForceTrace::new(dt, samples)
}

fn update_index(update: usize, period: f64, dt: f64) -> usize {
    ((update as f64 * period) / dt - 1e-9).ceil() as usize
}

/// Kind of ground-truth flow generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowKind {
    /// Ornstein-Uhlenbeck process sampled once per trial.
    Ou {
        mean: f64,
        /// Stationary standard deviation.
        sd: f64,
        /// Relaxation time in s.
        relaxation: f64,
    },
    /// Sum of sinusoids plus white noise around a mean.
    SinusoidMixture {
        mean: f64,
        /// `(period in s, amplitude)` pairs.
        components: Vec<(f64, f64)>,
        noise_sd: f64,
    },
}

impl FlowKind {
    pub fn ou_default() -> Self {
        FlowKind::Ou {
            mean: 4.0,
            sd: 1.2,
            relaxation: 60.0,
        }
    }

    pub fn sinusoid_default() -> Self {
        FlowKind::SinusoidMixture {
            mean: 4.0,
            components: vec![(20.0, 1.5)],
            noise_sd: 0.3,
        }
    }

    /// Parses a generator name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ou" => Ok(Self::ou_default()),
            "sinusoid" | "sinusoid-mixture" | "sinusoid_mixture" => Ok(Self::sinusoid_default()),
            other => Err(Error::invalid(format!("unknown flow generator `{other}`"))),
        }
    }
}

/// Per-trial ground-truth flow intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProcess {
    pub kind: FlowKind,
    /// Time between consecutive trials in s.
    pub trial_period: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// Generates `n_trials` flow intensities, clamped to [1, 7].
pub fn gen_flow_process(kind: FlowKind, n_trials: usize, trial_period: f64, seed: u64) -> Result<FlowProcess> {
    if n_trials == 0 {
        return Err(Error::invalid("flow process needs at least one trial"));
    }
    if !(trial_period > 0.0) {
        return Err(Error::invalid("trial period must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match &kind {
        FlowKind::Ou { mean, sd, relaxation } => {
            if !(*sd >= 0.0 && *relaxation > 0.0) {
                return Err(Error::invalid("OU needs sd >= 0 and relaxation > 0"));
            }
            let phi = (-trial_period / relaxation).exp();
            let innovation = sd * (1.0 - phi * phi).sqrt();
            let z = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
            let mut x = mean + sd * z(&mut rng);
            let mut out = Vec::with_capacity(n_trials);
            for _ in 0..n_trials {
                out.push(x);
                x = mean + phi * (x - mean) + innovation * z(&mut rng);
            }
            out
        }
        FlowKind::SinusoidMixture {
            mean,
            components,
            noise_sd,
        } => {
            if components.iter().any(|(p, _)| !(*p > 0.0)) || !(*noise_sd >= 0.0) {
                return Err(Error::invalid("sinusoid periods must be positive and noise non-negative"));
            }
            let phases: Vec<f64> = components
                .iter()
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect();
            let noise = Normal::new(0.0, *noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
            (0..n_trials)
                .map(|k| {
                    let t = k as f64 * trial_period;
                    let wave: f64 = components
                        .iter()
                        .zip(&phases)
                        .map(|((p, a), ph)| a * (std::f64::consts::TAU * t / p + ph).sin())
                        .sum();
                    mean + wave + noise.sample(&mut rng)
                })
                .collect()
        }
    };
    Ok(FlowProcess {
        kind,
        trial_period,
        seed,
        values: raw.into_iter().map(|v| v.clamp(MIN_INTENSITY, MAX_INTENSITY)).collect(),
    })
}

/// Runs the adaptive staircase on a simulated subject held at a fixed flow
/// intensity. Trials continue past `min_trials` until ten reversals exist,
/// up to `max_trials`.
pub fn simulate_skill_measurement(
    params: &SimParams,
    intensity: f64,
    session: &SessionConfig,
    seed: u64,
) -> Result<StaircaseState> {
    let loop_params = params.flow_to_loop_params(intensity)?;
    let mut staircase = StaircaseState::new(session.staircase_params())?;
    let max_trials = session.skill_trials.max(1) * 3;
    let dt = session.sample_period();
    for i in 0..max_trials {
        if i >= session.skill_trials && staircase.measured_skill().is_ok() {
            break;
        }
        let config = session.trial_config(staircase.current_band);
        let trace = simulate_trial(params, loop_params, &config, dt, derive_seed(seed, i as u64))?;
        let record = evaluate_trial(trace, config)?;
        staircase.record(&record)?;
    }
    Ok(staircase)
}

/// Synthesises one probe answer: three Likert responses around the true
/// intensity.
pub fn synthesize_responses(intensity: f64, noise_sd: f64, rng: &mut impl Rng) -> [u8; 3] {
    std::array::from_fn(|_| {
        let z: f64 = StandardNormal.sample(rng);
        (intensity + noise_sd * z).round().clamp(MIN_INTENSITY, MAX_INTENSITY) as u8
    })
}

/// Simulates the main sessions of one subject at a fixed band.
///
/// Trial `k` runs with loop parameters taken from `flow.values[k]`; probes
/// fire after the scheduled trials and report the flow of that trial through
/// three noisy Likert answers.
pub fn simulate_subject(
    subject_id: &str,
    params: &SimParams,
    session: &SessionConfig,
    band_width: f64,
    schedule: &ProbeSchedule,
    flow: &FlowProcess,
    report_noise_sd: f64,
    seed: u64,
) -> Result<SessionData> {
    let total = session.total_trials();
    if flow.values.len() < total {
        return Err(Error::invalid(format!(
            "flow process has {} values for {total} trials",
            flow.values.len()
        )));
    }
    if schedule.sessions.len() != session.sessions || schedule.trials_per_session != session.trials_per_session {
        return Err(Error::invalid("probe schedule does not match the session layout"));
    }
    schedule.validate()?;
    if !(report_noise_sd >= 0.0) {
        return Err(Error::invalid("report noise must be non-negative"));
    }
    let config = session.trial_config(band_width);
    config.validate()?;
    let dt = session.sample_period();

    let trials = (0..total)
        .map(|k| {
            let loop_params = params.flow_to_loop_params(flow.values[k])?;
            let trace = simulate_trial(params, loop_params, &config, dt, derive_seed(seed, k as u64))?;
            evaluate_trial(trace, config)
        })
        .collect::<Result<Vec<TrialRecord>>>()?;

    let mut report_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let probes = schedule
        .global_indices()
        .into_iter()
        .enumerate()
        .map(|(p, trial_index)| {
            let responses = synthesize_responses(flow.values[trial_index], report_noise_sd, &mut report_rng);
            FlowProbe::new(p + 1, trial_index, responses)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SessionData {
        schema_version: SCHEMA_VERSION,
        subject_id: subject_id.to_string(),
        config: SessionConfig {
            band_width: Some(band_width),
            ..session.clone()
        },
        schedule: schedule.clone(),
        staircase: None,
        trials,
        probes,
        ground_truth_flow: Some(flow.values[..total].to_vec()),
        provenance: Provenance::simulated(seed),
    })
}

/// Settings shared by every subject of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub subjects: usize,
    pub seed: u64,
    pub params: SimParams,
    pub session: SessionConfig,
    pub flow: FlowKind,
    pub report_noise_sd: f64,
    /// Intensity at which the skill measurement runs.
    pub skill_intensity: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 24,
            seed: 0,
            params: SimParams::default(),
            session: SessionConfig::default(),
            flow: FlowKind::ou_default(),
            report_noise_sd: 0.5,
            skill_intensity: 4.0,
        }
    }
}

pub fn cohort_subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

/// Simulates subject `index` of a cohort: skill measurement (unless the band
/// is fixed in the session config), probe schedule, flow and main sessions.
pub fn simulate_cohort_subject(spec: &CohortSpec, index: usize) -> Result<SessionData> {
    spec.session.validate()?;
    let seed = derive_seed(spec.seed, index as u64);
    let (band, staircase) = match spec.session.band_width {
        Some(b) => (b, None),
        None => {
            let stair = simulate_skill_measurement(&spec.params, spec.skill_intensity, &spec.session, derive_seed(seed, 3))?;
            (stair.measured_skill()?, Some(stair))
        }
    };
    let schedule = crate::task::schedule_probes(
        spec.session.sessions,
        spec.session.trials_per_session,
        spec.session.probes_per_session,
        spec.session.min_probe_gap,
        derive_seed(seed, 1),
    )?;
    let flow = gen_flow_process(
        spec.flow.clone(),
        spec.session.total_trials(),
        spec.session.trial_duration,
        derive_seed(seed, 2),
    )?;
    let mut data = simulate_subject(
        &cohort_subject_id(index),
        &spec.params,
        &spec.session,
        band,
        &schedule,
        &flow,
        spec.report_noise_sd,
        derive_seed(seed, 4),
    )?;
    data.staircase = staircase;
    data.provenance = Provenance::simulated(spec.seed);
    Ok(data)
}

/// Simulates every subject of a cohort on `jobs` threads; output order and
/// content do not depend on `jobs`.
pub fn simulate_cohort(spec: &CohortSpec, jobs: usize) -> Result<Vec<SessionData>> {
    if spec.subjects == 0 {
        return Err(Error::invalid("cohort needs at least one subject"));
    }
    let jobs = jobs.clamp(1, spec.subjects);
    if jobs == 1 {
        return (0..spec.subjects).map(|i| simulate_cohort_subject(spec, i)).collect();
    }
    let chunk = spec.subjects.div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let range = (j * chunk)..((j + 1) * chunk).min(spec.subjects);
                scope.spawn(move || range.map(|i| simulate_cohort_subject(spec, i)).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(spec.subjects);
        for h in handles {
            out.extend(h.join().expect("simulation worker panicked")?);
        }
        Ok(out)
    })
}
