//! Browser bindings for the calibration library.
//!
//! Results cross the boundary as JSON strings so the page needs no glue
//! beyond what `wasm-bindgen` generates.

use mfcal::driver::experiments::{builtin, scenario_for};
use mfcal::driver::{rmse_directions, rmse_gains, run_calibration, Mode, RunConfig, Stage};
use mfcal::model::{sample_covariance, simulate_snapshots};
use mfcal::scenario::ScenarioFile;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct GainPoint {
    sensor: usize,
    estimate: [f64; 2],
    truth: [f64; 2],
}

#[derive(Serialize)]
struct Residual {
    outer: usize,
    t: usize,
    eps_p: f64,
    eps_diff: f64,
}

#[derive(Serialize)]
struct Calibration {
    rmse_gains: f64,
    rmse_directions: f64,
    converged: bool,
    outer_iterations: usize,
    exchange_rounds: u64,
    frequencies_mhz: Vec<f64>,
    /// Gains per wavelength, estimate next to truth.
    gains: Vec<Vec<GainPoint>>,
    residuals: Vec<Residual>,
}

fn js_error(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn builtin_scenario(name: &str) -> Result<ScenarioFile, JsError> {
    let text = match name {
        "desk" => builtin::DESK_NOISELESS,
        "f3" => builtin::MC_F3,
        "f9" => builtin::MC_F9,
        other => return Err(JsError::new(&format!("unknown scenario '{other}'"))),
    };
    serde_json::from_str(text).map_err(js_error)
}

fn parse_mode(name: &str) -> Result<Mode, JsError> {
    serde_json::from_value(serde_json::Value::String(name.to_lowercase())).map_err(|_| JsError::new(&format!("unknown mode '{name}'")))
}

/// Simulates one of the built-in scenarios and calibrates it.
///
/// `snapshots = 0` uses exact covariances; `snr_db` is ignored for the
/// noiseless desk scenario.
#[wasm_bindgen]
pub fn calibrate(scenario: &str, mode: &str, snapshots: u32, snr_db: f64, seed: u32) -> Result<String, JsError> {
    let base = builtin_scenario(scenario)?;
    let mode = parse_mode(mode)?;
    let n = (snapshots > 0).then_some(snapshots as usize);
    let snr = base.snr_db.map(|_| snr_db);
    let s = scenario_for(&base, seed as u64, n, snr).map_err(js_error)?;
    let data = s.covariances(n, seed as u64).map_err(js_error)?;
    let config = RunConfig::from_scenario(&s, mode);

    let mut residuals = Vec::new();
    let result = run_calibration(&s, &config, &data, None, &mut |r| {
        if r.stage == Stage::Gain {
            residuals.push(Residual { outer: r.outer, t: r.record.iteration, eps_p: r.record.primal, eps_diff: r.record.spread });
        }
    })
    .map_err(js_error)?;

    let est: Vec<_> = result.params.iter().map(|p| p.gains.clone()).collect();
    let tru: Vec<_> = s.truth.params.iter().map(|p| p.gains.clone()).collect();
    let est_dirs: Vec<_> = result.params.iter().map(|p| p.directions.clone()).collect();
    let tru_dirs: Vec<_> = s.truth.params.iter().map(|p| p.directions.clone()).collect();
    let gains = est
        .iter()
        .zip(&tru)
        .map(|(e, t)| {
            e.iter()
                .zip(t.iter())
                .enumerate()
                .map(|(sensor, (e, t))| GainPoint { sensor, estimate: [e.re, e.im], truth: [t.re, t.im] })
                .collect()
        })
        .collect();
    let out = Calibration {
        rmse_gains: rmse_gains(&est, &tru).map_err(js_error)?,
        rmse_directions: rmse_directions(&est_dirs, &tru_dirs).map_err(js_error)?,
        converged: result.report.converged,
        outer_iterations: result.report.outer_iterations,
        exchange_rounds: result.report.exchange_rounds,
        frequencies_mhz: s.wavelengths.wavelengths().iter().map(|l| 299_792_458.0 / l / 1e6).collect(),
        gains,
        residuals,
    };
    serde_json::to_string(&out).map_err(js_error)
}

/// Keeps the `s` largest-magnitude entries, lowest index first on ties.
#[wasm_bindgen]
pub fn hard_threshold(values: Vec<f64>, s: usize) -> Result<Vec<f64>, JsError> {
    mfcal::doa::hard_threshold(&values, s).map_err(js_error)
}

/// Frobenius distance between a sample covariance from `snapshots`
/// snapshots and the exact one, at the lowest frequency of the 3-frequency
/// scenario.
#[wasm_bindgen]
pub fn covariance_error(snapshots: u32, seed: u32) -> Result<f64, JsError> {
    let s = scenario_for(&builtin_scenario("f3")?, 0, None, None).map_err(js_error)?;
    let truth = s.true_covariance(0).map_err(js_error)?;
    let x = simulate_snapshots(
        &s.truth.params[0],
        &s.geometry,
        s.sky.powers(0),
        s.sky.weak_sources(),
        s.wavelengths.wavelengths()[0],
        snapshots as usize,
        seed as u64,
    )
    .map_err(js_error)?;
    Ok((sample_covariance(&x).map_err(js_error)? - truth).norm())
}
