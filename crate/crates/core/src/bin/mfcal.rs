use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfcal::driver::experiments::{run_detailed, run_suite, summarize, write_csv, write_report, Suite, SuiteOptions, TraceRow};
use mfcal::driver::{Mode, RunConfig, TransportKind};
use mfcal::scenario::{Scenario, ScenarioFile};

/// Distributed multi-frequency calibration simulator.
#[derive(Parser, Debug)]
#[command(name = "mfcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate data for a scenario and calibrate it, once per seed.
    Calibrate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "decentralized")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// First seed; run i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of Monte-Carlo runs.
        #[arg(long, default_value_t = 1)]
        mc: u64,
        /// Snapshots per wavelength; omit (and leave unset in the scenario)
        /// for exact covariances.
        #[arg(long = "N")]
        snapshots: Option<usize>,
        #[arg(long = "snr-db", allow_negative_numbers = true)]
        snr_db: Option<f64>,
        /// Carry consensus messages over local sockets instead of memory.
        #[arg(long)]
        socket: bool,
    },
    /// Run one of the figure suites with the built-in scenarios.
    Experiment {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// Monte-Carlo seeds per configuration.
        #[arg(long, default_value_t = 20)]
        mc: u64,
    },
}

/// Failures split by exit code: configuration problems and everything else.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<mfcal::Error> for Failure {
    fn from(e: mfcal::Error) -> Self {
        match e {
            mfcal::Error::InvalidArgument(_) | mfcal::Error::Json(_) | mfcal::Error::DimensionMismatch { .. } => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Calibrate { scenario, mode, out, seed, mc, snapshots, snr_db, socket } => {
            calibrate(&scenario, mode, &out, seed, mc, snapshots, snr_db, socket)
        }
        Command::Experiment { suite, out, mc } => experiment(suite, &out, mc),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: at least one run hit its iteration cap before converging");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether every run converged.
#[allow(clippy::too_many_arguments)]
fn calibrate(
    path: &Path,
    mode: Mode,
    out: &Path,
    seed: u64,
    mc: u64,
    snapshots: Option<usize>,
    snr_db: Option<f64>,
    socket: bool,
) -> Result<bool, Failure> {
    if mc == 0 {
        return Err(Failure::Config("--mc must be at least 1".into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let base: ScenarioFile = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let snapshots = snapshots.or(base.n);
    // validate once up front so a bad file is a configuration error
    let probe = Scenario::new(ScenarioFile { n: snapshots, snr_db: snr_db.or(base.snr_db), ..base.clone() })?;
    let mut config = RunConfig::from_scenario(&probe, mode);
    if socket {
        config.transport = TransportKind::Socket;
    }
    config.validate()?;

    std::fs::create_dir_all(out).map_err(mfcal::Error::from)?;
    let mut trace = csv::Writer::from_path(out.join("trace.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    let label = path.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
    let mut runs = Vec::new();
    let mut first_estimate = None;
    let mut write_error = None;
    for i in 0..mc {
        let s = seed.wrapping_add(i);
        let (record, result) = run_detailed(&base, &label, mode, snapshots, snr_db, s, Some(&config), &mut |r| {
            if write_error.is_none() {
                if let Err(e) = trace.serialize(TraceRow::new(&label, s, r)) {
                    write_error = Some(e.to_string());
                }
            }
        });
        if let Some(e) = write_error.take() {
            return Err(Failure::Runtime(format!("trace output: {e}")));
        }
        eprintln!(
            "seed {s}: rmse_gains {:.4e} rmse_directions {:.4e} outer {} converged {}{}",
            record.rmse_gains,
            record.rmse_directions,
            record.outer_iterations,
            record.converged,
            record.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
        );
        if first_estimate.is_none() {
            first_estimate = result;
        }
        runs.push(record);
    }
    trace.flush().map_err(mfcal::Error::from)?;
    write_csv(&out.join("runs.csv"), &runs)?;
    let summary = serde_json::json!({
        "scenario": path.display().to_string(),
        "mode": mode,
        "seeds": (0..mc).map(|i| seed.wrapping_add(i)).collect::<Vec<_>>(),
        "config": config,
        "summary": summarize(&runs),
        "runs": runs,
        "estimate_first_seed": first_estimate,
    });
    let f = std::fs::File::create(out.join("summary.json")).map_err(mfcal::Error::from)?;
    serde_json::to_writer_pretty(f, &summary).map_err(mfcal::Error::from)?;

    if let Some(e) = runs.iter().find_map(|r| r.error.clone()) {
        return Err(Failure::Runtime(e));
    }
    Ok(runs.iter().all(|r| r.converged))
}

fn experiment(suite: Suite, out: &Path, mc: u64) -> Result<bool, Failure> {
    if mc == 0 {
        return Err(Failure::Config("--mc must be at least 1".into()));
    }
    let options = SuiteOptions { seeds: (0..mc).collect(), ..SuiteOptions::default() };
    let report = run_suite(suite, &options)?;
    write_report(&report, out)?;
    for row in &report.summary {
        eprintln!(
            "{:6} N={:>5} snr={:>6} median rmse_gains {:.4e} converged {}/{} failed {}",
            row.label,
            row.snapshots.map_or("exact".into(), |n| n.to_string()),
            row.snr_db.map_or("-".into(), |s| format!("{s:.1}")),
            row.median_rmse_gains.unwrap_or(f64::NAN),
            row.converged_runs,
            row.runs,
            row.failures
        );
    }
    // individual runs may stop at their caps; that is data for the figure,
    // not a failure of the suite
    Ok(true)
}
