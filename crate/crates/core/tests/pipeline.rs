use flowtrace_core::dataio::{report_to_json, SessionConfig, SessionData};
use flowtrace_core::decoder::FlowProbe;
use flowtrace_core::pipeline::{analyze_cohort, analyze_subject, AnalysisSettings};
use flowtrace_core::simulator::{simulate_cohort, CohortSpec};
use flowtrace_core::stats::QcReason;

fn cohort(subjects: usize, seed: u64) -> Vec<SessionData> {
    let spec = CohortSpec {
        subjects,
        seed,
        session: SessionConfig {
            band_width: Some(0.055),
            sample_rate_hz: 250.0,
            ..Default::default()
        },
        ..Default::default()
    };
    simulate_cohort(&spec, 4).unwrap()
}

fn settings(replicates: usize) -> AnalysisSettings {
    AnalysisSettings {
        replicates,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn subject_report_structure() {
    let s = &cohort(1, 1)[0];
    let r = analyze_subject(s, &settings(50), 1).unwrap();
    assert_eq!(r.subject_id, "S01");
    assert_eq!(r.trials, 300);
    assert!(!r.partial);
    assert_eq!(r.probes.len(), 12);
    assert!(r.probes.iter().all(|p| p.predicted.is_some()));
    let d = r.decoder.as_ref().unwrap();
    assert_eq!(d.candidates, 162);
    assert!(!d.subset.is_empty() && d.subset.len() <= 4);
    let total: f64 = d.contributions.iter().map(|c| c.share).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r.random_test.as_ref().unwrap().replicates + r.random_test.as_ref().unwrap().dropped, 50);
    let psd = r.psd.as_ref().unwrap();
    assert!((psd.sample_rate_hz - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(psd.points, 300);
    assert!(r.ground_truth_r.is_some());
}

#[test]
fn reports_are_deterministic_and_jobs_invariant() {
    let sessions = cohort(3, 2);
    let a = report_to_json(&analyze_cohort(&sessions, &settings(40)).unwrap()).unwrap();
    let b = report_to_json(&analyze_cohort(&sessions, &settings(40)).unwrap()).unwrap();
    let c = report_to_json(&analyze_cohort(&sessions, &AnalysisSettings { jobs: 3, ..settings(40) }).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    // A lone subject hands its threads to the significance tests.
    let one = &sessions[..1];
    let d = report_to_json(&analyze_cohort(one, &settings(40)).unwrap()).unwrap();
    let e = report_to_json(&analyze_cohort(one, &AnalysisSettings { jobs: 5, ..settings(40) }).unwrap()).unwrap();
    assert_eq!(d, e);
}

#[test]
fn subject_results_do_not_depend_on_cohort_order() {
    let sessions = cohort(3, 3);
    let forward = analyze_cohort(&sessions, &settings(30)).unwrap();
    let reversed: Vec<SessionData> = sessions.iter().rev().cloned().collect();
    let backward = analyze_cohort(&reversed, &settings(30)).unwrap();
    for s in &forward.subjects {
        let t = backward.subjects.iter().find(|t| t.subject_id == s.subject_id).unwrap();
        assert_eq!(s, t);
    }
}

#[test]
fn qc_excludes_flat_reporters() {
    let mut sessions = cohort(3, 4);
    let n = sessions[1].probes.len();
    sessions[1].probes = (0..n)
        .map(|i| FlowProbe::new(i + 1, sessions[1].probes[i].trial_index, [4, 4, 4]).unwrap())
        .collect();
    let r = analyze_cohort(&sessions, &settings(20)).unwrap();
    assert_eq!(r.excluded.len(), 1);
    assert_eq!(r.excluded[0].subject_id, "S02");
    assert_eq!(r.excluded[0].reasons, vec![QcReason::IntensityRangeTooSmall]);
    assert_eq!(r.subjects.len(), 2);
    assert_eq!(r.summary.subjects, 2);

    let all = analyze_cohort(&sessions, &AnalysisSettings { apply_qc: false, ..settings(20) }).unwrap();
    assert!(all.excluded.is_empty());
    assert_eq!(all.subjects.len(), 3);
    assert!(all.notes.iter().any(|n| n.contains("quality control disabled")));
}

#[test]
fn reduced_replicates_are_noted() {
    let sessions = cohort(1, 5);
    let r = analyze_cohort(&sessions, &settings(25)).unwrap();
    assert!(r.notes.iter().any(|n| n.contains("25 replicates")));
    assert_eq!(r.summary.metric_effects.len(), 8);
}

#[test]
fn duplicate_subjects_rejected() {
    let mut sessions = cohort(2, 6);
    sessions[1].subject_id = sessions[0].subject_id.clone();
    assert!(analyze_cohort(&sessions, &settings(10)).is_err());
}

#[test]
fn partial_session_is_flagged() {
    let mut s = cohort(1, 7).remove(0);
    s.trials.truncate(150);
    s.probes.retain(|p| p.trial_index < 150);
    s.ground_truth_flow.as_mut().unwrap().truncate(150);
    let r = analyze_subject(&s, &settings(10), 1).unwrap();
    assert!(r.partial);
    assert_eq!(r.trials, 150);
}
