use flowtrace_core::task::{
    evaluate_trial, schedule_probes, ForceTrace, StaircaseParams, StaircaseState, TrialConfig, TrialEvent,
    TrialStepper,
};
use flowtrace_core::Error;
use proptest::prelude::*;

/// Direct reading of the success rule: some run of in-band samples at or
/// after onset covering the hold, latched at the end of the first such run.
fn oracle(trace: &ForceTrace, cfg: &TrialConfig) -> (bool, Option<f64>, Option<f64>, Option<f64>) {
    let s = &trace.samples;
    let dt = trace.dt;
    let onset = s.iter().position(|&f| f > cfg.press_threshold);
    let in_band = |f: f64| (f - cfg.target_force).abs() <= cfg.band_width / 2.0 + 1e-12;
    let entry = onset.and_then(|o| (o..s.len()).find(|&i| in_band(s[i])));
    let need = (cfg.hold_duration / dt - 1e-9).ceil() as usize;
    let mut latch = None;
    let mut run = 0;
    for (i, &f) in s.iter().enumerate() {
        run = if in_band(f) { run + 1 } else { 0 };
        if run >= need {
            latch = Some(i + 1);
            break;
        }
    }
    let t = |i: usize| i as f64 * dt;
    (latch.is_some(), onset.map(t), entry.map(t), latch.map(t))
}

fn piecewise_trace(levels: &[(usize, f64)], dt: f64, n: usize) -> ForceTrace {
    let mut samples = vec![0.0];
    for &(len, f) in levels {
        samples.extend(std::iter::repeat_n(f, len));
    }
    samples.resize(n, 0.0);
    ForceTrace::new(dt, samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn streaming_matches_batch_and_oracle(
        segments in prop::collection::vec((1usize..900, 0.0f64..1.6), 1..8),
        band in 0.01f64..0.4,
    ) {
        let dt = 0.001;
        let cfg = TrialConfig::default().with_band(band);
        let trace = piecewise_trace(&segments, dt, 3000);
        let batch = evaluate_trial(trace.clone(), cfg).unwrap();

        let mut stepper = TrialStepper::new(cfg, dt).unwrap();
        let mut latched = None;
        let mut ended = None;
        for (i, &f) in trace.samples.iter().enumerate() {
            for ev in stepper.push(i as f64 * dt, f).unwrap() {
                match ev {
                    TrialEvent::SuccessLatched { t } => latched = Some(t),
                    TrialEvent::Ended { success } => ended = Some(success),
                    TrialEvent::Started => prop_assert_eq!(i, 0),
                }
            }
        }
        prop_assert!(stepper.is_complete());
        let streamed = stepper.finish();
        prop_assert_eq!(&streamed, &batch);
        prop_assert_eq!(ended, Some(batch.success));
        prop_assert_eq!(latched, batch.success_latch);

        let (success, onset, entry, latch) = oracle(&trace, &cfg);
        prop_assert_eq!(batch.success, success);
        prop_assert_eq!(batch.press_onset, onset);
        prop_assert_eq!(batch.band_entry, entry);
        prop_assert_eq!(batch.success_latch, latch);
        batch.check_invariants().unwrap();
    }
}

#[test]
fn in_band_hold_of_exactly_half_a_second() {
    let cfg = TrialConfig::default();
    let ok = piecewise_trace(&[(200, 0.5), (500, 1.05)], 0.001, 3000);
    let rec = evaluate_trial(ok, cfg).unwrap();
    assert!(rec.success);
    assert!((rec.success_latch.unwrap() - 0.701).abs() < 1e-9);

    let short = piecewise_trace(&[(200, 0.5), (499, 1.05)], 0.001, 3000);
    assert!(!evaluate_trial(short, cfg).unwrap().success);
}

#[test]
fn out_of_band_run_resets_hold() {
    let cfg = TrialConfig::default();
    let trace = piecewise_trace(&[(400, 1.0), (1, 1.2), (400, 1.0)], 0.001, 3000);
    assert!(!evaluate_trial(trace, cfg).unwrap().success);
}

#[test]
fn premature_press_is_rejected() {
    let mut stepper = TrialStepper::new(TrialConfig::default(), 0.001).unwrap();
    assert!(matches!(stepper.push(0.0, 0.5), Err(Error::PrematurePress { .. })));
}

#[test]
fn sample_after_end_is_a_protocol_error() {
    let dt = 0.01;
    let mut stepper = TrialStepper::new(TrialConfig::default(), dt).unwrap();
    for i in 0..300 {
        stepper.push(i as f64 * dt, 0.0).unwrap();
    }
    assert!(stepper.is_complete());
    assert!(matches!(stepper.push(3.0, 0.0), Err(Error::Protocol(_))));
}

/// Reference implementation of the step rule.
fn oracle_step(i: usize, band: f64, t_com: f64, p: &StaircaseParams) -> f64 {
    [p.k1 / i as f64, p.k2 / t_com, band / 2.0].into_iter().fold(f64::INFINITY, f64::min)
}

#[test]
fn staircase_follows_step_rule() {
    let params = StaircaseParams::default();
    let mut stair = StaircaseState::new(params).unwrap();
    let outcomes = [(true, 0.9), (true, 2.0), (false, 3.0), (true, 0.6), (false, 3.0), (false, 3.0), (true, 1.1)];
    let mut band = params.initial_band;
    for (i, &(success, t_com)) in outcomes.iter().enumerate() {
        let step = oracle_step(i + 1, band, t_com, &params);
        let expected = if success { band - step } else { band + step };
        let next = stair.apply(success, t_com).unwrap();
        assert!((next - expected).abs() < 1e-15);
        band = expected;
    }
    assert_eq!(stair.transition_points, vec![3, 4, 5, 7]);
}

#[test]
fn staircase_never_reaches_zero() {
    let mut stair = StaircaseState::new(StaircaseParams::default()).unwrap();
    for _ in 0..500 {
        let b = stair.apply(true, 0.5).unwrap();
        assert!(b > 0.0);
    }
}

/// With a deterministic threshold subject the skill estimate sits near the
/// threshold once the step has shrunk.
#[test]
fn staircase_converges_on_threshold_subject() {
    for threshold in [0.03, 0.05, 0.08] {
        let mut stair = StaircaseState::new(StaircaseParams::default()).unwrap();
        for _ in 0..200 {
            let success = stair.current_band >= threshold;
            stair.advance(success, Some(1.5), 3.0).unwrap();
        }
        let skill = stair.measured_skill().unwrap();
        assert!((skill - threshold).abs() < 0.1 * threshold, "threshold {threshold} skill {skill}");
    }
}

#[test]
fn probe_schedule_layout() {
    for seed in 0..50 {
        let s = schedule_probes(3, 100, 4, 12, seed).unwrap();
        s.validate().unwrap();
        assert_eq!(s.total_probes(), 12);
        let g = s.global_indices();
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.iter().all(|&i| i < 300));
    }
    assert!(schedule_probes(1, 40, 4, 12, 0).is_err());
    assert!(schedule_probes(1, 48, 4, 12, 0).is_ok());
}

/// Stars-and-bars placement is uniform: with one probe every admissible
/// trial is about equally likely.
#[test]
fn single_probe_position_is_uniform() {
    let trials = 20;
    let gap = 5;
    let mut counts = vec![0usize; trials + 1];
    let n = 16_000;
    for seed in 0..n {
        let s = schedule_probes(1, trials, 1, gap, seed).unwrap();
        counts[s.sessions[0][0]] += 1;
    }
    let admissible = trials - gap + 1;
    let expected = n as f64 / admissible as f64;
    for (j, &c) in counts.iter().enumerate() {
        if j < gap {
            assert_eq!(c, 0);
        } else {
            assert!((c as f64 - expected).abs() < 0.15 * expected, "trial {j}: {c} vs {expected}");
        }
    }
}
