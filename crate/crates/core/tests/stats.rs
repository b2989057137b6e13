use approx::assert_abs_diff_eq;
use flowtrace_core::metrics::{MetricKind, MetricsVector};
use flowtrace_core::stats::{
    bh_fdr, paired_t, pearson, permutation_test, power_timescale, random_test, welch_psd, Detrend, LabelDraw,
    SignificanceOptions, WelchParams, Window,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

/// Two-tailed Student-t p-value by Simpson integration of the density.
fn t_p_value(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let f = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn paired_t_matches_textbook() {
    let x = [5.1, 4.8, 6.0, 5.5, 5.9, 4.7, 5.2];
    let y = [4.9, 4.9, 5.1, 5.0, 5.2, 4.1, 5.0];
    let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = m / (sd / n.sqrt());
    let r = paired_t(&x, &y).unwrap();
    assert_abs_diff_eq!(r.statistic, t, epsilon = 1e-12);
    assert_abs_diff_eq!(r.effect_size, m / sd, epsilon = 1e-12);
    assert_abs_diff_eq!(r.p_value, t_p_value(t, n - 1.0), epsilon = 1e-8);
}

#[test]
fn pearson_on_288_pairs() {
    let x = normals(288, 1);
    let noise = normals(288, 2);
    let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| 0.15 * a + e).collect();
    let r = pearson(&x, &y).unwrap();
    let mx = x.iter().sum::<f64>() / 288.0;
    let my = y.iter().sum::<f64>() / 288.0;
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let rho = cov / (vx * vy).sqrt();
    assert_abs_diff_eq!(r.effect_size, rho, epsilon = 1e-12);
    assert_eq!(r.df, 286.0);
    let t = rho * (286.0 / (1.0 - rho * rho)).sqrt();
    assert_abs_diff_eq!(r.p_value, t_p_value(t, 286.0), epsilon = 1e-8);
}

#[test]
fn bh_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let p: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random::<f64>().powi(3)).collect();
        let adj = bh_fdr(&p).unwrap();
        let n = p.len();
        for i in 0..n {
            // q_i = min over all j with p_j >= p_i of p_j * n / rank_j.
            let expected = (0..n)
                .filter(|&j| p[j] >= p[i])
                .map(|j| {
                    let rank = p.iter().filter(|&&q| q <= p[j]).count();
                    p[j] * n as f64 / rank as f64
                })
                .fold(1.0f64, f64::min);
            assert_abs_diff_eq!(adj[i], expected, epsilon = 1e-12);
        }
    }
}

/// Welch estimate computed with an O(n²) DFT.
fn naive_welch(x: &[f64], fs: f64, len: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let w: Vec<f64> = (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect();
    let u: f64 = w.iter().map(|v| v * v).sum();
    let step = len / 2;
    let mut acc = vec![0.0; len / 2 + 1];
    let mut segs = 0;
    let mut s = 0;
    while s + len <= x.len() {
        for (k, a) in acc.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..len {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / len as f64;
                let v = (x[s + i] - mean) * w[i];
                re += v * ang.cos();
                im += v * ang.sin();
            }
            *a += re * re + im * im;
        }
        segs += 1;
        s += step;
    }
    acc.iter()
        .enumerate()
        .map(|(k, p)| {
            let f = if k == 0 || k == len / 2 { 1.0 } else { 2.0 };
            f * p / (fs * u * segs as f64)
        })
        .collect()
}

#[test]
fn welch_matches_naive_dft() {
    let x = normals(300, 9);
    let psd = welch_psd(&x, 1.0 / 3.0, &WelchParams::default()).unwrap();
    assert_eq!(psd.segment_length, 64);
    let oracle = naive_welch(&x, 1.0 / 3.0, 64);
    for (a, b) in psd.density.iter().zip(&oracle) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-9 * b.max(1.0));
    }
}

#[test]
fn white_noise_is_flat_and_parseval_holds() {
    let x = normals(1 << 16, 10);
    let fs = 2.0;
    let psd = welch_psd(&x, fs, &WelchParams { segment_length: Some(256), ..Default::default() }).unwrap();
    let var = {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    };
    assert!((psd.total_power() - var).abs() < 0.05 * var);
    let level = 2.0 * var / fs;
    for d in &psd.density[1..psd.density.len() - 1] {
        let db = 10.0 * (d / level).log10();
        assert!(db.abs() < 3.0, "bin {db} dB off flat");
    }
}

#[test]
fn sinusoid_peak_frequency() {
    let fs = 1.0 / 3.0;
    let x: Vec<f64> = (0..300).map(|k| (2.0 * std::f64::consts::PI * 0.05 * k as f64 * 3.0).sin()).collect();
    let psd = welch_psd(&x, fs, &WelchParams { segment_length: Some(60), ..Default::default() }).unwrap();
    assert_abs_diff_eq!(psd.peak_frequency(), 0.05, epsilon = 1e-12);
}

#[test]
fn flat_spectrum_timescale_is_twenty_seconds() {
    let fs = 1.0 / 3.0;
    let psd = welch_psd(&normals(300, 1), fs, &WelchParams::default()).unwrap();
    let flat = flowtrace_core::stats::PsdEstimate {
        density: vec![1.0; psd.density.len()],
        ..psd
    };
    // Nyquist 1/6 Hz; 70% of the band lies above 0.05 Hz.
    let ts = power_timescale(&flat, 0.7).unwrap();
    assert!((ts - 20.0).abs() < 1.5, "timescale {ts}");
}

#[test]
fn dc_only_series_has_no_ac_power() {
    let params = WelchParams {
        window: Window::Rectangular,
        detrend: Detrend::None,
        ..Default::default()
    };
    let psd = welch_psd(&vec![2.0; 64], 1.0, &params).unwrap();
    assert!(psd.density[0] > 0.0);
    assert!(psd.density[1..].iter().all(|d| d.abs() < 1e-20));
    assert!(power_timescale(&psd, 0.7).is_err());
}

fn noisy_problem(n: usize, seed: u64, signal: f64) -> (Vec<f64>, Vec<MetricsVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m: Vec<MetricsVector> = (0..n)
        .map(|_| MetricsVector::from_array(std::array::from_fn(|_| rng.sample(StandardNormal))))
        .collect();
    let y = m
        .iter()
        .map(|v| (4.0 + signal * v.reaction_time + 0.3 * rng.sample::<f64, _>(StandardNormal)).clamp(1.0, 7.0))
        .collect();
    (y, m)
}

const SUBSET: [MetricKind; 1] = [MetricKind::ReactionTime];

#[test]
fn significance_is_deterministic_and_jobs_invariant() {
    let (y, m) = noisy_problem(12, 1, 1.0);
    let opts = SignificanceOptions { replicates: 200, seed: 77, ..Default::default() };
    for test in [random_test, permutation_test] {
        let a = test(&y, &m, &SUBSET, &opts).unwrap();
        let b = test(&y, &m, &SUBSET, &opts).unwrap();
        let c = test(&y, &m, &SUBSET, &SignificanceOptions { jobs: 7, ..opts }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.null_nrmse.len() + a.dropped, 200);
    }
}

#[test]
fn perfect_decoding_has_zero_p() {
    let (_, m) = noisy_problem(12, 2, 0.0);
    let y: Vec<f64> = m.iter().map(|v| 4.0 + v.reaction_time).collect();
    let opts = SignificanceOptions { replicates: 100, seed: 1, ..Default::default() };
    assert_eq!(random_test(&y, &m, &SUBSET, &opts).unwrap().p_value, 0.0);
    assert_eq!(permutation_test(&y, &m, &SUBSET, &opts).unwrap().p_value, 0.0);
    let grid = SignificanceOptions { label_draw: LabelDraw::Grid, ..opts };
    assert_eq!(random_test(&y, &m, &SUBSET, &grid).unwrap().p_value, 0.0);
}

#[test]
fn constant_labels_are_degenerate() {
    let (_, m) = noisy_problem(12, 3, 0.0);
    let y = vec![4.0; 12];
    let opts = SignificanceOptions { replicates: 20, seed: 1, ..Default::default() };
    let r = permutation_test(&y, &m, &SUBSET, &opts).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.p_value, 1.0);
    let r = random_test(&y, &m, &SUBSET, &opts).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.p_value, 1.0);
}

#[test]
fn p_value_counts_strictly_better_replicates() {
    let (y, m) = noisy_problem(12, 4, 0.5);
    let opts = SignificanceOptions { replicates: 300, seed: 5, ..Default::default() };
    let r = permutation_test(&y, &m, &SUBSET, &opts).unwrap();
    let below = r.null_nrmse.iter().filter(|&&e| e < r.true_nrmse).count();
    assert_eq!(r.p_value, below as f64 / r.null_nrmse.len() as f64);
}
