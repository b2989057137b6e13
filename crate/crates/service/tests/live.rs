use flowtrace_core::dataio::SessionConfig;
use flowtrace_core::decoder::{per_trial_metrics, probe_intensities, select_subset};
use flowtrace_core::pipeline::session_probe_metrics;
use flowtrace_core::simulator::{simulate_trial, SimParams};
use flowtrace_core::task::{evaluate_trial, ForceTrace};
use flowtrace_service::live::{ClientMessage, LiveSession, Phase, ServerMessage};
use flowtrace_service::Store;

fn fixed_band(config: SessionConfig) -> SessionConfig {
    SessionConfig {
        band_width: Some(0.06),
        ..config
    }
}

fn small() -> SessionConfig {
    fixed_band(SessionConfig {
        sessions: 2,
        trials_per_session: 30,
        probes_per_session: 2,
        min_probe_gap: 12,
        ..Default::default()
    })
}

struct Driver {
    session: LiveSession,
    clock: f64,
    log: Vec<ServerMessage>,
}

impl Driver {
    fn new(config: SessionConfig, seed: u64) -> Self {
        let session = LiveSession::create("test".into(), "P01".into(), config, seed).unwrap();
        Self {
            session,
            clock: 0.0,
            log: Vec::new(),
        }
    }

    fn send(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        let out = self.session.handle(msg).messages;
        self.log.extend(out.iter().cloned());
        out
    }

    /// Streams one trial sampled at `dt` starting after the rest period and
    /// returns the messages it produced.
    fn trial(&mut self, samples: &[f64], dt: f64) -> Vec<ServerMessage> {
        let cfg = &self.session.data.config;
        self.clock += cfg.trial_duration + cfg.rest_duration;
        let t0 = self.clock;
        let mut out = Vec::new();
        for (i, &f) in samples.iter().enumerate() {
            out.extend(self.send(ClientMessage::Sample { t: t0 + i as f64 * dt, force: f }));
        }
        out
    }

    fn answer(&mut self, r: u8) -> Vec<ServerMessage> {
        self.send(ClientMessage::ProbeResponse { r1: r, r2: r, r3: r })
    }
}

fn step(level: f64, from: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i < from { 0.0 } else { level }).collect()
}

fn trial_end(msgs: &[ServerMessage]) -> Option<(usize, bool)> {
    msgs.iter().find_map(|m| match m {
        ServerMessage::TrialEnd { index, success, .. } => Some((*index, *success)),
        _ => None,
    })
}

#[test]
fn step_stream_matches_batch_record() {
    let mut d = Driver::new(small(), 1);
    d.send(ClientMessage::Advance);
    assert_eq!(d.session.state.phase, Phase::Main(1));
    let samples = step(1.01, 300, 3000);
    let msgs = d.trial(&samples, 0.001);
    assert!(matches!(msgs[0], ServerMessage::TrialStart { index: 0, .. }));
    assert_eq!(trial_end(&msgs), Some((0, true)));
    let cfg = d.session.data.config.trial_config(0.06);
    let batch = evaluate_trial(ForceTrace::new(0.001, samples).unwrap(), cfg).unwrap();
    assert_eq!(d.session.data.trials[0], batch);
}

#[test]
fn slow_streams_are_resampled() {
    let mut d = Driver::new(small(), 2);
    d.send(ClientMessage::Advance);
    // A 250 Hz ramp is linear between samples, so the 1 kHz grid is exact.
    // The trial closes once a sample reaches the last grid point at 2.999 s.
    let ramp: Vec<f64> = (0..751).map(|i| (i as f64 * 0.004 / 0.5).min(1.0)).collect();
    assert!(trial_end(&d.trial(&ramp[..750], 0.004)).is_none());
    d.session.finalize();
    let mut d = Driver::new(small(), 2);
    d.send(ClientMessage::Advance);
    assert!(trial_end(&d.trial(&ramp, 0.004)).is_some());
    let trace = &d.session.data.trials[0].trace;
    assert_eq!(trace.len(), 3000);
    for (i, f) in trace.samples.iter().enumerate() {
        let expected = (i as f64 * 0.001 / 0.5).min(1.0);
        assert!((f - expected).abs() < 1e-9, "sample {i}: {f} vs {expected}");
    }
}

#[test]
fn samples_outside_trials_are_ignored_with_one_notice() {
    let mut d = Driver::new(small(), 3);
    assert!(d.send(ClientMessage::Sample { t: 0.0, force: 0.5 }).is_empty());
    d.send(ClientMessage::Advance);
    d.trial(&step(0.5, 10, 3000), 0.001);
    // Inside the 2 s rest.
    let t = d.clock + 3.5;
    let first = d.send(ClientMessage::Sample { t, force: 0.0 });
    assert!(matches!(first.as_slice(), [ServerMessage::Notice { .. }]));
    assert!(d.send(ClientMessage::Sample { t: t + 0.01, force: 0.0 }).is_empty());
    // Pressing when the trial would open keeps it closed.
    let late = d.clock + 5.0;
    assert!(d.send(ClientMessage::Sample { t: late, force: 0.3 }).is_empty());
    let open = d.send(ClientMessage::Sample { t: late + 0.001, force: 0.0 });
    assert!(matches!(open[0], ServerMessage::TrialStart { index: 1, .. }));
}

#[test]
fn timestamp_regression_and_bad_messages() {
    let mut d = Driver::new(small(), 4);
    d.send(ClientMessage::Advance);
    d.send(ClientMessage::Sample { t: 1.0, force: 0.0 });
    assert!(matches!(d.send(ClientMessage::Sample { t: 0.5, force: 0.0 })[0], ServerMessage::Error { .. }));
    assert!(matches!(d.answer(4)[0], ServerMessage::Error { .. }));
    assert!(matches!(d.send(ClientMessage::Advance)[0], ServerMessage::Error { .. }));
    assert!(matches!(d.send(ClientMessage::Sample { t: 2.0, force: -1.0 })[0], ServerMessage::Error { .. }));
}

/// Force traces of a subject whose success depends only on the band.
fn threshold_trial(band: f64, threshold: f64) -> Vec<f64> {
    if band >= threshold {
        step(1.0, 200, 3000)
    } else {
        step(0.5, 200, 3000)
    }
}

#[test]
fn skill_phase_freezes_band_at_measured_skill() {
    let mut d = Driver::new(
        SessionConfig {
            band_width: None,
            ..small()
        },
        5,
    );
    d.send(ClientMessage::Advance);
    assert_eq!(d.session.state.phase, Phase::SkillMeasurement);
    let mut trials = 0;
    while d.session.state.phase == Phase::SkillMeasurement {
        let band = d.session.data.staircase.as_ref().unwrap().current_band;
        let msgs = d.trial(&threshold_trial(band, 0.05), 0.001);
        assert_eq!(trial_end(&msgs).map(|t| t.0), Some(trials));
        trials += 1;
        assert!(trials <= 150);
    }
    let stair = d.session.data.staircase.as_ref().unwrap();
    assert!(stair.history.len() >= 50);
    assert_eq!(d.session.state.phase, Phase::Rest);
    assert_eq!(d.session.data.config.band_width, Some(stair.measured_skill().unwrap()));
    assert!(d.log.contains(&ServerMessage::PhaseChange { phase: Phase::Rest }));
    d.send(ClientMessage::Advance);
    assert_eq!(d.session.state.phase, Phase::Main(1));
}

/// Runs a full small protocol with simulated traces; probe answers follow
/// the simulated intensity.
fn run_protocol(d: &mut Driver) {
    let params = SimParams::default();
    d.send(ClientMessage::Advance);
    let total = d.session.data.config.total_trials();
    let mut k = 0;
    while k < total {
        if d.session.state.phase == Phase::Rest {
            d.send(ClientMessage::Advance);
        }
        let intensity = 1.0 + 6.0 * ((k as f64) * 0.21).sin().abs();
        let cfg = d.session.data.config.trial_config(0.06);
        let lp = params.flow_to_loop_params(intensity).unwrap();
        let trace = simulate_trial(&params, lp, &cfg, 0.001, k as u64).unwrap();
        let msgs = d.trial(&trace.samples, 0.001);
        assert_eq!(trial_end(&msgs).map(|t| t.0), Some(k));
        if msgs.iter().any(|m| matches!(m, ServerMessage::ProbeRequest { .. })) {
            assert_eq!(d.session.state.pending_probe, Some(k));
            d.answer(intensity.round() as u8);
        }
        k += 1;
    }
}

#[test]
fn decoder_appears_after_five_probes_and_matches_batch() {
    let config = fixed_band(SessionConfig {
        sessions: 2,
        trials_per_session: 40,
        probes_per_session: 3,
        min_probe_gap: 12,
        ..Default::default()
    });
    let mut d = Driver::new(config, 6);
    run_protocol(&mut d);
    assert_eq!(d.session.state.phase, Phase::Done);
    assert_eq!(d.session.data.probes.len(), 6);

    // No flow updates before the fifth answer, then one per trial.
    let fifth = d.session.data.probes[4].trial_index;
    let updates: Vec<usize> = d
        .log
        .iter()
        .filter_map(|m| match m {
            ServerMessage::FlowUpdate { trial_index, .. } => Some(*trial_index),
            _ => None,
        })
        .collect();
    assert_eq!(updates[0], fifth);
    assert_eq!(updates, (fifth..80).collect::<Vec<_>>());

    let per_trial = per_trial_metrics(&d.session.data.trials).unwrap();
    let m = session_probe_metrics(&d.session.data, &per_trial).unwrap();
    let batch = select_subset(&probe_intensities(&d.session.data.probes), &m, 4).unwrap();
    assert_eq!(d.session.decoder(), Some(&batch.model));

    // trial_end metrics equal the batch per-trial metrics.
    let streamed: Vec<_> = d
        .log
        .iter()
        .filter_map(|m| match m {
            ServerMessage::TrialEnd { metrics, .. } => Some(*metrics),
            _ => None,
        })
        .collect();
    assert_eq!(streamed, per_trial);
}

#[test]
fn out_of_range_probe_answer_is_rejected() {
    let mut d = Driver::new(small(), 7);
    d.send(ClientMessage::Advance);
    while d.session.state.pending_probe.is_none() {
        d.trial(&step(1.0, 100, 3000), 0.001);
    }
    assert!(matches!(d.answer(8)[0], ServerMessage::Error { .. }));
    assert!(d.session.state.pending_probe.is_some());
    // Samples wait for the answer.
    let t = d.clock + 10.0;
    assert!(matches!(d.send(ClientMessage::Sample { t, force: 0.0 })[0], ServerMessage::Notice { .. }));
    d.answer(3);
    assert_eq!(d.session.data.probes.len(), 1);
}

#[test]
fn finalize_mid_run() {
    let mut d = Driver::new(small(), 8);
    d.send(ClientMessage::Advance);
    for _ in 0..3 {
        d.trial(&step(1.0, 100, 3000), 0.001);
    }
    // Half a trial is discarded.
    d.trial(&step(1.0, 100, 1500), 0.001);
    d.session.finalize();
    let s = d.session.status();
    assert_eq!(s.phase, Phase::Done);
    assert!(s.finalized);
    assert_eq!(s.trials_completed, 3);
}

#[test]
fn store_round_trip_resumes_state() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let config = fixed_band(SessionConfig {
        sessions: 1,
        trials_per_session: 80,
        probes_per_session: 6,
        min_probe_gap: 12,
        ..Default::default()
    });
    let mut d = Driver::new(config, 9);
    run_protocol(&mut d);
    store.save(&d.session).unwrap();
    let loaded = store.load_all().unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].status(), d.session.status());
    assert_eq!(loaded[0].data, d.session.data);
    assert_eq!(loaded[0].decoder(), d.session.decoder());
}
