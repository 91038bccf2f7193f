//! Monte-Carlo runs and the figure suites.
//!
//! Every run regenerates its scenario truth from the run seed, so two
//! configurations sharing a seed see the same gains, directions and
//! directional gains wherever their wavelengths coincide.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    directional_gain_error, rmse_directions, rmse_gains, run_calibration, CalibrationResult, Mode, RunConfig, Stage,
    TraceRecord,
};
use crate::error::{Error, Result};
use crate::scenario::{Scenario, ScenarioFile};

/// Scenarios shipped with the crate and used by the suites.
pub mod builtin {
    pub const DESK_NOISELESS: &str = include_str!("../../../../scenarios/desk_noiseless.json");
    pub const MC_F3: &str = include_str!("../../../../scenarios/mc_f3.json");
    pub const MC_F9: &str = include_str!("../../../../scenarios/mc_f9.json");
}

/// One calibration run on freshly simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub mode: Mode,
    #[serde(rename = "F")]
    pub wavelengths: usize,
    /// Largest number of wavelengths held by one agent.
    #[serde(rename = "J_z")]
    pub per_agent: usize,
    #[serde(rename = "N")]
    pub snapshots: Option<usize>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub rmse_gains: f64,
    pub rmse_directions: f64,
    pub directional_error: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    /// ADMM iterations summed over the gain stages.
    pub gain_iterations: usize,
    pub gain_seconds: f64,
    pub directional_seconds: f64,
    pub total_seconds: f64,
    /// Set when the run failed; the metrics are then NaN.
    pub error: Option<String>,
}

/// Medians over the runs of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mode: Mode,
    #[serde(rename = "F")]
    pub wavelengths: usize,
    #[serde(rename = "J_z")]
    pub per_agent: usize,
    #[serde(rename = "N")]
    pub snapshots: Option<usize>,
    pub snr_db: Option<f64>,
    pub runs: usize,
    pub failures: usize,
    pub converged_runs: usize,
    pub median_rmse_gains: Option<f64>,
    pub median_rmse_directions: Option<f64>,
    pub median_total_seconds: Option<f64>,
    pub median_gain_iterations: Option<f64>,
}

/// Flattened iteration record for CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub label: String,
    pub seed: u64,
    pub outer: usize,
    pub stage: Stage,
    pub source: Option<usize>,
    pub t: usize,
    pub eps_p: f64,
    pub eps_diff: f64,
    pub change: f64,
    /// Mean penalty over the agents.
    pub rho: f64,
}

impl TraceRow {
    pub fn new(label: &str, seed: u64, r: &TraceRecord) -> Self {
        let rho = if r.record.rho.is_empty() { f64::NAN } else { r.record.rho.iter().sum::<f64>() / r.record.rho.len() as f64 };
        Self {
            label: label.to_string(),
            seed,
            outer: r.outer,
            stage: r.stage,
            source: r.source,
            t: r.record.iteration,
            eps_p: r.record.primal,
            eps_diff: r.record.spread,
            change: r.record.change,
            rho,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    /// Only filled by suites that study residual curves.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub traces: Vec<TraceRow>,
    /// Extra suite-specific numbers, e.g. timing ratios.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub notes: Option<serde_json::Value>,
}

/// Scenario for one run: the base file with the run's seed, snapshot count
/// and SNR substituted.
pub fn scenario_for(base: &ScenarioFile, seed: u64, snapshots: Option<usize>, snr_db: Option<f64>) -> Result<Scenario> {
    let mut spec = base.clone();
    spec.seed = seed;
    spec.n = snapshots;
    if snr_db.is_some() {
        spec.snr_db = snr_db;
    }
    Scenario::new(spec)
}

/// Simulates data, calibrates and scores against the truth. Failures are
/// folded into the record instead of aborting a whole study.
pub fn run_once(
    base: &ScenarioFile,
    label: &str,
    mode: Mode,
    snapshots: Option<usize>,
    snr_db: Option<f64>,
    seed: u64,
    trace: &mut dyn FnMut(&TraceRecord),
) -> RunRecord {
    run_detailed(base, label, mode, snapshots, snr_db, seed, None, trace).0
}

/// [`run_once`] that also hands back the estimate. `config` overrides the
/// solver settings the scenario carries; its mode wins over `mode`.
#[allow(clippy::too_many_arguments)]
pub fn run_detailed(
    base: &ScenarioFile,
    label: &str,
    mode: Mode,
    snapshots: Option<usize>,
    snr_db: Option<f64>,
    seed: u64,
    config: Option<&RunConfig>,
    trace: &mut dyn FnMut(&TraceRecord),
) -> (RunRecord, Option<CalibrationResult>) {
    let mode = config.map_or(mode, |c| c.mode);
    let snr = snr_db.or(base.snr_db);
    let mut record = RunRecord {
        label: label.to_string(),
        mode,
        wavelengths: base.wavelengths.len(),
        per_agent: if mode == Mode::Mono { 1 } else { base.wavelengths.len().div_ceil(base.agents.max(1)) },
        snapshots,
        snr_db: snr,
        seed,
        rmse_gains: f64::NAN,
        rmse_directions: f64::NAN,
        directional_error: f64::NAN,
        converged: false,
        outer_iterations: 0,
        gain_iterations: 0,
        gain_seconds: 0.0,
        directional_seconds: 0.0,
        total_seconds: 0.0,
        error: None,
    };
    let start = super::Stopwatch::start();
    let outcome = (|| -> Result<CalibrationResult> {
        let scenario = scenario_for(base, seed, snapshots, snr)?;
        let data = scenario.covariances(snapshots, seed)?;
        let config = config.cloned().unwrap_or_else(|| RunConfig::from_scenario(&scenario, mode));
        let result = run_calibration(&scenario, &config, &data, None, trace)?;
        let est: Vec<_> = result.params.iter().map(|p| p.gains.clone()).collect();
        let tru: Vec<_> = scenario.truth.params.iter().map(|p| p.gains.clone()).collect();
        record.rmse_gains = rmse_gains(&est, &tru)?;
        let est: Vec<_> = result.params.iter().map(|p| p.directions.clone()).collect();
        let tru: Vec<_> = scenario.truth.params.iter().map(|p| p.directions.clone()).collect();
        record.rmse_directions = rmse_directions(&est, &tru)?;
        record.directional_error = directional_gain_error(&result.params, &scenario.truth.params);
        record.converged = result.report.converged;
        record.outer_iterations = result.report.outer_iterations;
        record.gain_iterations = result.report.gain_consensus.iter().map(|c| c.iterations).sum();
        record.gain_seconds = result.report.timing.gain_seconds;
        record.directional_seconds = result.report.timing.directional_seconds;
        Ok(result)
    })();
    record.total_seconds = start.seconds();
    match outcome {
        Ok(result) => (record, Some(result)),
        Err(e) => {
            record.error = Some(e.to_string());
            (record, None)
        }
    }
}

/// Independent runs over `seeds`, spread across the available cores.
/// The output order follows `seeds` regardless of scheduling.
pub fn monte_carlo(
    base: &ScenarioFile,
    label: &str,
    mode: Mode,
    snapshots: Option<usize>,
    snr_db: Option<f64>,
    seeds: &[u64],
) -> Vec<RunRecord> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    if workers <= 1 {
        return seeds.iter().map(|&s| run_once(base, label, mode, snapshots, snr_db, s, &mut |_| {})).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter().map(|&s| run_once(base, label, mode, snapshots, snr_db, s, &mut |_| {})).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("monte-carlo worker panicked")).collect()
    })
}

/// Median of the finite values, `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn summarize(runs: &[RunRecord]) -> SummaryRow {
    let first = runs.first();
    SummaryRow {
        label: first.map(|r| r.label.clone()).unwrap_or_default(),
        mode: first.map_or(Mode::Decentralized, |r| r.mode),
        wavelengths: first.map_or(0, |r| r.wavelengths),
        per_agent: first.map_or(0, |r| r.per_agent),
        snapshots: first.and_then(|r| r.snapshots),
        snr_db: first.and_then(|r| r.snr_db),
        runs: runs.len(),
        failures: runs.iter().filter(|r| r.error.is_some()).count(),
        converged_runs: runs.iter().filter(|r| r.converged).count(),
        median_rmse_gains: median(runs.iter().map(|r| r.rmse_gains)),
        median_rmse_directions: median(runs.iter().map(|r| r.rmse_directions)),
        median_total_seconds: median(runs.iter().map(|r| r.total_seconds)),
        median_gain_iterations: median(runs.iter().map(|r| r.gain_iterations as f64)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Gain and direction RMSE against the snapshot count.
    Fig2a,
    /// Gain and direction RMSE against the SNR at N = 2^8.
    Fig2b,
    /// Ring exchange against a fusion center: accuracy and cost.
    Fig3,
    /// Residual curves `ε_p`, `ε_DIFF` per outer iteration.
    Fig4,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Fig2a => "fig2a",
            Suite::Fig2b => "fig2b",
            Suite::Fig3 => "fig3",
            Suite::Fig4 => "fig4",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub snapshots: Vec<usize>,
    pub snr_db: Vec<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            snapshots: vec![1 << 6, 1 << 8, 1 << 10, 1 << 12],
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }
    }
}

fn parse(text: &str) -> Result<ScenarioFile> {
    Ok(serde_json::from_str(text)?)
}

/// The three configurations compared throughout: single-wavelength
/// calibration, one wavelength per agent, three wavelengths per agent.
pub fn comparison_configs() -> Result<Vec<(&'static str, ScenarioFile, Mode)>> {
    let f3 = parse(builtin::MC_F3)?;
    let f9 = parse(builtin::MC_F9)?;
    Ok(vec![("mono", f3.clone(), Mode::Mono), ("F3", f3, Mode::Decentralized), ("F9", f9, Mode::Decentralized)])
}

pub fn run_suite(suite: Suite, options: &SuiteOptions) -> Result<ExperimentReport> {
    if options.seeds.is_empty() {
        return Err(Error::invalid("at least one Monte-Carlo seed is needed"));
    }
    let mut report = ExperimentReport {
        suite: suite.name().to_string(),
        seeds: options.seeds.clone(),
        summary: Vec::new(),
        runs: Vec::new(),
        traces: Vec::new(),
        notes: None,
    };
    let add = |report: &mut ExperimentReport, runs: Vec<RunRecord>| {
        report.summary.push(summarize(&runs));
        report.runs.extend(runs);
    };
    match suite {
        Suite::Fig2a => {
            for &n in &options.snapshots {
                for (label, base, mode) in comparison_configs()? {
                    let runs = monte_carlo(&base, label, mode, Some(n), None, &options.seeds);
                    add(&mut report, runs);
                }
            }
        }
        Suite::Fig2b => {
            for &snr in &options.snr_db {
                for (label, base, mode) in comparison_configs()? {
                    let runs = monte_carlo(&base, label, mode, Some(1 << 8), Some(snr), &options.seeds);
                    add(&mut report, runs);
                }
            }
        }
        Suite::Fig3 => {
            // Both layouts run until their own stopping rules fire; the
            // summary then compares accuracy per ADMM iteration and time.
            let base = parse(builtin::MC_F9)?;
            for (label, mode) in [("ring", Mode::Decentralized), ("fusion", Mode::Fusion)] {
                let runs = monte_carlo(&base, label, mode, base.n, None, &options.seeds);
                add(&mut report, runs);
            }
            let time = |i: usize| report.summary[i].median_total_seconds;
            let iters = |i: usize| report.summary[i].median_gain_iterations;
            report.notes = Some(serde_json::json!({
                "time_ratio_ring_over_fusion": time(0).zip(time(1)).map(|(a, b)| a / b),
                "gain_iteration_ratio_ring_over_fusion": iters(0).zip(iters(1)).map(|(a, b)| a / b),
            }));
        }
        Suite::Fig4 => {
            let base = parse(builtin::MC_F9)?;
            let seed = options.seeds[0];
            let mut traces = Vec::new();
            let run = run_once(&base, "F9", Mode::Decentralized, base.n, None, seed, &mut |r| {
                traces.push(TraceRow::new("F9", seed, r))
            });
            report.traces = traces;
            add(&mut report, vec![run]);
        }
    }
    Ok(report)
}

/// Writes `<suite>.csv` (runs, or residual traces for the residual suite)
/// and `<suite>_summary.json`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", report.suite));
    if report.traces.is_empty() {
        write_csv(&csv_path, &report.runs)?;
    } else {
        write_csv(&csv_path, &report.traces)?;
        write_csv(&dir.join(format!("{}_runs.csv", report.suite)), &report.runs)?;
    }
    let summary = serde_json::json!({
        "suite": report.suite,
        "seeds": report.seeds,
        "summary": report.summary,
        "notes": report.notes,
    });
    let mut f = std::fs::File::create(dir.join(format!("{}_summary.json", report.suite)))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv output: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_ignores_nan() {
        assert_eq!(median([3.0, f64::NAN, 1.0, 2.0]), Some(2.0));
        assert_eq!(median([4.0, 1.0]), Some(2.5));
        assert_eq!(median([f64::NAN]), None);
    }

    #[test]
    fn builtin_scenarios_parse() {
        for text in [builtin::DESK_NOISELESS, builtin::MC_F3, builtin::MC_F9] {
            Scenario::new(parse(text).unwrap()).unwrap();
        }
    }

    #[test]
    fn failed_runs_are_recorded() {
        let mut base = parse(builtin::MC_F3).unwrap();
        base.agents = 7;
        let r = run_once(&base, "bad", Mode::Decentralized, Some(16), None, 1, &mut |_| {});
        assert!(r.error.is_some());
        assert!(r.rmse_gains.is_nan());
        let s = summarize(&[r]);
        assert_eq!((s.runs, s.failures, s.median_rmse_gains), (1, 1, None));
    }

    #[test]
    fn reports_round_trip_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let base = parse(builtin::MC_F3).unwrap();
        let runs = vec![run_once(&base, "F3", Mode::Decentralized, Some(64), None, 3, &mut |_| {})];
        let report = ExperimentReport {
            suite: "probe".into(),
            seeds: vec![3],
            summary: vec![summarize(&runs)],
            runs,
            traces: Vec::new(),
            notes: None,
        };
        write_report(&report, dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("probe.csv")).unwrap();
        let back: Vec<RunRecord> = rd.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].seed, 3);
        assert!(dir.path().join("probe_summary.json").exists());
    }
}
