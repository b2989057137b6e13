//! `flowtrace`: simulate cohorts, run the staircase, extract metrics, decode
//! flow, estimate spectral timescales and launch the live service.

mod config;
mod output;

use std::fs;
use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flowtrace_core::dataio::{list_sessions, read_session, write_report, write_session, SessionData, TraceStorage};
use flowtrace_core::decoder::{per_trial_metrics, probe_intensities, select_subset, MAX_SUBSET_SIZE};
use flowtrace_core::derive_seed;
use flowtrace_core::pipeline::{analyze_cohort, decoded_spectrum, session_probe_metrics, AnalysisSettings, DEFAULT_REPLICATES};
use flowtrace_core::simulator::{simulate_cohort, simulate_skill_measurement, CohortSpec, FlowKind, SimParams};
use flowtrace_core::stats::{mean, qc_subject, sample_sd, LabelDraw};
use flowtrace_service::{serve, ServiceConfig};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "flowtrace", version, about = "Flow decoding from fingertip force control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a cohort of synthetic subjects and write one session file each.
    Simulate(SimulateArgs),
    /// Run the adaptive staircase on one simulated subject.
    Staircase(StaircaseArgs),
    /// Write per-trial (or per-probe) metrics of session files as CSV.
    Metrics(MetricsArgs),
    /// Fit decoders, run significance tests and write the cohort report.
    Decode(DecodeArgs),
    /// Spectral timescale of each subject's decoded flow.
    Psd(PsdArgs),
    /// Run the live session server.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FlowArg {
    Ou,
    Sinusoid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StorageArg {
    Inline,
    Referenced,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelDrawArg {
    Continuous,
    Grid,
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subjects: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ou")]
    flow: FlowArg,
    #[arg(long = "report_noise_sd", alias = "report-noise-sd", default_value_t = 0.5)]
    report_noise_sd: f64,
    /// Flow intensity during the skill measurement.
    #[arg(long = "skill_intensity", alias = "skill-intensity", default_value_t = 4.0)]
    skill_intensity: f64,
    #[arg(long = "trace_storage", alias = "trace-storage", value_enum, default_value = "inline")]
    trace_storage: StorageArg,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(clap::Args, Debug)]
struct StaircaseArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flow intensity the simulated subject is held at.
    #[arg(long, default_value_t = 4.0)]
    intensity: f64,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(clap::Args, Debug)]
struct MetricsArgs {
    /// A session file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One row per probe window instead of per trial.
    #[arg(long)]
    probes: bool,
}

#[derive(clap::Args, Debug)]
struct AnalysisArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max_subset_size", alias = "max-subset-size", default_value_t = MAX_SUBSET_SIZE)]
    max_subset_size: usize,
    /// Trials averaged into each point of the decoded series.
    #[arg(long = "timeseries_window", alias = "timeseries-window", default_value_t = 1)]
    timeseries_window: usize,
    #[arg(long = "power_fraction", alias = "power-fraction", default_value_t = 0.7)]
    power_fraction: f64,
    /// Welch segment length; the largest power of two up to a quarter of the series when absent.
    #[arg(long = "segment_length", alias = "segment-length")]
    segment_length: Option<usize>,
    /// Decoded-series sample rate in Hz; one point per trial duration when absent.
    #[arg(long = "flow_sample_rate", alias = "flow-sample-rate")]
    flow_sample_rate: Option<f64>,
    /// Keep subjects that fail quality control.
    #[arg(long = "no_qc", alias = "no-qc")]
    no_qc: bool,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(clap::Args, Debug)]
struct DecodeArgs {
    /// Directory of session files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Replicates of each of the random and permutation tests.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    perms: usize,
    #[arg(long = "label_draw", alias = "label-draw", value_enum, default_value = "continuous")]
    label_draw: LabelDrawArg,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(clap::Args, Debug)]
struct PsdArgs {
    /// Directory of session files.
    #[arg(long)]
    input: PathBuf,
    /// Directory for per-subject `frequency_hz,power` CSV files.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(clap::Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long = "data_dir", alias = "data-dir", default_value = "sessions")]
    data_dir: PathBuf,
    /// Browser client bundle served at `/`.
    #[arg(long = "static_dir", alias = "static-dir")]
    static_dir: Option<PathBuf>,
    /// Replicates of the significance tests in session reports.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl AnalysisArgs {
    fn settings(&self) -> AnalysisSettings {
        let mut s = AnalysisSettings {
            seed: self.seed,
            max_subset_size: self.max_subset_size,
            timeseries_window: self.timeseries_window,
            power_fraction: self.power_fraction,
            flow_sample_rate: self.flow_sample_rate,
            apply_qc: !self.no_qc,
            jobs: self.jobs.max(1),
            ..Default::default()
        };
        s.welch.segment_length = self.segment_length;
        s
    }
}

fn load_dir(dir: &Path) -> Result<Vec<SessionData>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let paths = list_sessions(dir)?;
    if paths.is_empty() {
        bail!("no session files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| read_session(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let session = args.config.apply(Default::default());
    let spec = CohortSpec {
        subjects: args.subjects as usize,
        seed: args.seed,
        params: SimParams::default(),
        session,
        flow: match args.flow {
            FlowArg::Ou => FlowKind::ou_default(),
            FlowArg::Sinusoid => FlowKind::sinusoid_default(),
        },
        report_noise_sd: args.report_noise_sd,
        skill_intensity: args.skill_intensity,
    };
    let storage = match args.trace_storage {
        StorageArg::Inline => TraceStorage::Inline,
        StorageArg::Referenced => TraceStorage::Referenced,
    };
    tracing::info!(subjects = spec.subjects, seed = spec.seed, "simulating cohort");
    let cohort = simulate_cohort(&spec, args.jobs.max(1))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut rows = Vec::new();
    for s in &cohort {
        let path = args.out.join(format!("{}.json", s.subject_id));
        write_session(s, &path, storage).with_context(|| format!("writing {}", path.display()))?;
        rows.push(output::SimulatedSubject {
            subject_id: s.subject_id.clone(),
            band_width: s.config.band_width,
            trials: s.trials.len(),
            success_rate: s.success_rate(),
            probes: s.probes.len(),
            file: path,
        });
    }
    if args.json {
        output::print_json(&rows)
    } else {
        output::print_simulated(&rows);
        Ok(())
    }
}

#[derive(Serialize)]
struct StaircaseSummary {
    seed: u64,
    intensity: f64,
    trials: usize,
    bands: Vec<f64>,
    successes: Vec<bool>,
    transition_points: Vec<usize>,
    measured_skill: Option<f64>,
    success_rate: Option<f64>,
}

fn staircase(args: StaircaseArgs) -> Result<()> {
    let session = args.config.apply(Default::default());
    session.validate()?;
    let stair = simulate_skill_measurement(&SimParams::default(), args.intensity, &session, derive_seed(args.seed, 3))?;
    let measured = stair.measured_skill();
    if let Err(e) = &measured {
        tracing::warn!(error = %e, "staircase did not converge");
    }
    let summary = StaircaseSummary {
        seed: args.seed,
        intensity: args.intensity,
        trials: stair.history.len(),
        bands: stair.history.iter().map(|e| e.band).collect(),
        successes: stair.history.iter().map(|e| e.success).collect(),
        transition_points: stair.transition_points.clone(),
        measured_skill: measured.as_ref().ok().copied(),
        success_rate: stair.success_rate(),
    };
    if args.json {
        return output::print_json(&summary);
    }
    println!("trial  band_N    success");
    for (i, (b, s)) in summary.bands.iter().zip(&summary.successes).enumerate() {
        let mark = if summary.transition_points.contains(&(i + 1)) { "  reversal" } else { "" };
        println!("{:>5}  {:.5}  {}{}", i + 1, b, if *s { "yes" } else { "no " }, mark);
    }
    match summary.measured_skill {
        Some(skill) => println!("measured skill: {skill:.5} N"),
        None => println!("measured skill: undefined"),
    }
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let sessions = if args.input.is_dir() {
        load_dir(&args.input)?
    } else {
        vec![read_session(&args.input).with_context(|| format!("reading {}", args.input.display()))?]
    };
    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    output::write_metrics_csv(sink, &sessions, args.probes)
}

fn decode(args: DecodeArgs) -> Result<()> {
    let sessions = load_dir(&args.input)?;
    let mut settings = args.analysis.settings();
    settings.replicates = args.perms;
    settings.label_draw = match args.label_draw {
        LabelDrawArg::Continuous => LabelDraw::Continuous,
        LabelDrawArg::Grid => LabelDraw::Grid,
    };
    tracing::info!(subjects = sessions.len(), replicates = settings.replicates, "decoding");
    let report = analyze_cohort(&sessions, &settings)?;
    for e in &report.excluded {
        tracing::warn!(subject = %e.subject_id, reasons = ?e.reasons, "excluded by quality control");
    }
    write_report(&report, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if args.json {
        output::print_json(&output::DecodeSummary::new(&report, &args.out))
    } else {
        output::print_decode(&report, &args.out);
        Ok(())
    }
}

#[derive(Serialize)]
struct PsdSubject {
    subject_id: String,
    timescale_s: Option<f64>,
    peak_frequency_hz: Option<f64>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct PsdCohort {
    subjects: Vec<PsdSubject>,
    excluded: Vec<String>,
    timescale_mean_s: Option<f64>,
    timescale_sd_s: Option<f64>,
}

fn psd(args: PsdArgs) -> Result<()> {
    let sessions = load_dir(&args.input)?;
    let settings = args.analysis.settings();
    settings.validate()?;
    if let Some(dir) = &args.csv {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut subjects = Vec::new();
    let mut excluded = Vec::new();
    for s in &sessions {
        if settings.apply_qc && !qc_subject(s).pass {
            tracing::warn!(subject = %s.subject_id, "excluded by quality control");
            excluded.push(s.subject_id.clone());
            continue;
        }
        let result = per_trial_metrics(&s.trials).and_then(|per_trial| {
            let probe_metrics = session_probe_metrics(s, &per_trial)?;
            let selection = select_subset(&probe_intensities(&s.probes), &probe_metrics, settings.max_subset_size)?;
            decoded_spectrum(s, &selection.model, &per_trial, &settings)
        });
        let row = match result {
            Ok((summary, est)) => {
                if let Some(dir) = &args.csv {
                    output::write_psd_csv(&dir.join(format!("{}_psd.csv", s.subject_id)), &est)?;
                }
                PsdSubject {
                    subject_id: s.subject_id.clone(),
                    timescale_s: Some(summary.timescale_s),
                    peak_frequency_hz: Some(summary.peak_frequency_hz),
                    warnings: Vec::new(),
                }
            }
            Err(e) => {
                tracing::warn!(subject = %s.subject_id, error = %e, "spectral timescale unavailable");
                PsdSubject {
                    subject_id: s.subject_id.clone(),
                    timescale_s: None,
                    peak_frequency_hz: None,
                    warnings: vec![format!("spectral timescale unavailable: {e}")],
                }
            }
        };
        subjects.push(row);
    }
    let timescales: Vec<f64> = subjects.iter().filter_map(|s| s.timescale_s).collect();
    let cohort = PsdCohort {
        timescale_mean_s: mean(&timescales),
        timescale_sd_s: sample_sd(&timescales),
        subjects,
        excluded,
    };
    if args.json {
        return output::print_json(&cohort);
    }
    for s in &cohort.subjects {
        match s.timescale_s {
            Some(t) => println!("{:<12} {:>8.2} s", s.subject_id, t),
            None => println!("{:<12} {:>8} ({})", s.subject_id, "-", s.warnings.join("; ")),
        }
    }
    match (cohort.timescale_mean_s, cohort.timescale_sd_s) {
        (Some(m), Some(sd)) => println!("cohort timescale: {m:.2} ± {sd:.2} s ({} subjects)", timescales.len()),
        (Some(m), None) => println!("cohort timescale: {m:.2} s (1 subject)"),
        _ => println!("cohort timescale: undefined"),
    }
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", args.host, args.port))?;
    let config = ServiceConfig {
        data_dir: args.data_dir,
        static_dir: args.static_dir,
        analysis: AnalysisSettings {
            seed: args.seed,
            replicates: args.perms,
            ..Default::default()
        },
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let shutdown = async {
            if let Err(e) = tokio::signal::ctrl_c().await {
                tracing::error!(error = %e, "cannot listen for interrupt");
                std::future::pending::<()>().await;
            }
            tracing::info!("interrupt received, shutting down");
        };
        serve(listener, config, shutdown).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Staircase(a) => staircase(a),
        Command::Metrics(a) => metrics(a),
        Command::Decode(a) => decode(a),
        Command::Psd(a) => psd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("FLOWTRACE_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
