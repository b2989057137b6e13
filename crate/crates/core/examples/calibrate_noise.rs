//! Grid search for the simulator noise defaults.
//!
//! Every candidate `(noise_exponent, sigma_f, sigma_c)` runs batches of 100
//! paired trials at the in-flow and out-flow anchors with a 0.055 N band. The
//! report lists mean success rates, the worst distance to the 0.61 / 0.47
//! targets and, per metric, the weakest batch t statistic of the paired
//! in-flow vs out-flow test signed so that positive is the expected direction.
//! The chosen defaults are the best-scoring row whose six t statistics all
//! clear 2.
//!
//! `cargo run --release -p flowtrace-core --example calibrate_noise`

use flowtrace_core::derive_seed;
use flowtrace_core::metrics::{single_trial_metrics, MetricKind};
use flowtrace_core::simulator::{simulate_trial, LoopParams, SimParams};
use flowtrace_core::stats::paired_t;
use flowtrace_core::task::{evaluate_trial, TrialConfig};

const BAND: f64 = 0.055;
const TRIALS: usize = 100;
const BATCHES: u64 = 20;
const TARGET_IN: f64 = 0.61;
const TARGET_OUT: f64 = 0.47;

/// Per-trial metrics with the sign of the expected in-flow minus out-flow
/// difference.
const DIRECTIONS: [(MetricKind, f64); 6] = [
    (MetricKind::ArrivingTime, -1.0),
    (MetricKind::CompletingTime, -1.0),
    (MetricKind::InRangeTime, 1.0),
    (MetricKind::ForceOvershoot, -1.0),
    (MetricKind::AverageDeviation, -1.0),
    (MetricKind::AverageAdjustRate, -1.0),
];

struct Outcome {
    success_in: f64,
    success_out: f64,
    min_t: [f64; 6],
    mean_t: [f64; 6],
}

fn evaluate(params: &SimParams) -> flowtrace_core::Result<Outcome> {
    let config = TrialConfig::default().with_band(BAND);
    let mut success = [0usize; 2];
    let mut min_t = [f64::INFINITY; 6];
    let mut mean_t = [0.0; 6];
    for batch in 0..BATCHES {
        let mut values: [[Vec<f64>; 2]; 6] = Default::default();
        for k in 0..TRIALS {
            let seed = derive_seed(batch, k as u64);
            for (c, anchor) in [LoopParams::IN_FLOW, LoopParams::OUT_FLOW].into_iter().enumerate() {
                let trace = simulate_trial(params, anchor, &config, 0.001, seed)?;
                let record = evaluate_trial(trace, config)?;
                success[c] += usize::from(record.success);
                let m = single_trial_metrics(&record)?;
                for (j, (kind, _)) in DIRECTIONS.iter().enumerate() {
                    values[j][c].push(m.get(*kind));
                }
            }
        }
        for (j, (_, sign)) in DIRECTIONS.iter().enumerate() {
            let t = paired_t(&values[j][0], &values[j][1]).map_or(0.0, |r| r.statistic * sign);
            min_t[j] = min_t[j].min(t);
            mean_t[j] += t / BATCHES as f64;
        }
    }
    let n = (TRIALS as u64 * BATCHES) as f64;
    Ok(Outcome {
        success_in: success[0] as f64 / n,
        success_out: success[1] as f64 / n,
        min_t,
        mean_t,
    })
}

fn main() -> flowtrace_core::Result<()> {
    let exponents = [0.0, 1.0, 1.2, 1.25, 1.3];
    let sigmas_f = [0.1, 0.15, 0.2, 0.25, 0.3];
    let sigmas_c = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35];
    let mut best: Option<(f64, SimParams)> = None;
    println!("exponent\tsigma_f\tsigma_c\tsuccess_in\tsuccess_out\terror\tmin_t\tmean_t");
    for &noise_exponent in &exponents {
        for &sigma_f in &sigmas_f {
            for &sigma_c in &sigmas_c {
                let params = SimParams {
                    sigma_f,
                    sigma_c,
                    sigma_m: 0.0,
                    sigma_v: 0.0,
                    noise_exponent,
                    ..SimParams::default()
                };
                let o = evaluate(&params)?;
                let err = (o.success_in - TARGET_IN).abs().max((o.success_out - TARGET_OUT).abs());
                let fmt = |ts: &[f64; 6]| ts.iter().map(|t| format!("{t:.1}")).collect::<Vec<_>>().join(",");
                println!(
                    "{noise_exponent}\t{sigma_f}\t{sigma_c}\t{:.3}\t{:.3}\t{err:.3}\t{}\t{}",
                    o.success_in,
                    o.success_out,
                    fmt(&o.min_t),
                    fmt(&o.mean_t)
                );
                if o.min_t.iter().all(|&t| t > 2.0) && best.as_ref().is_none_or(|(e, _)| err < *e) {
                    best = Some((err, params));
                }
            }
        }
    }
    match best {
        Some((err, p)) => println!(
            "best: noise_exponent={} sigma_f={} sigma_c={} (error {err:.3})",
            p.noise_exponent, p.sigma_f, p.sigma_c
        ),
        None => println!("best: no candidate keeps all six directions"),
    }
    Ok(())
}
