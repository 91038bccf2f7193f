//! Outer calibration loop, metrics and the experiment suite.
//!
//! One outer iteration runs the gain stage (consensus on `α`), then the
//! direction stage (grid search plus consensus on `α_m`, then noise), then
//! refreshes the weights from the new noise estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{
    run_consensus, AdmmConfig, ConsensusMode, ConsensusOutcome, ConsensusState, GainAgentData, GainChannel,
    GainProblem, IterationRecord,
};
use crate::basis::{Basis, BasisConfig};
use crate::doa::{run_doa_stage, DoaStageInput};
use crate::error::{Error, Result};
use crate::model::{
    calibrator_model, fix_gain_phase, weighting_matrix, CMat, CVec, CovarianceSet, Direction, PerWavelengthParams,
    C64,
};
use crate::network::{InMemoryTransport, PayloadKind, Topology, Transport, WavelengthPartition};
use crate::scenario::{Scenario, Truth};

pub mod experiments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Peer-to-peer consensus over the scenario topology.
    Decentralized,
    /// Consensus through a central averaging node.
    Fusion,
    /// One agent per wavelength, no exchange, order-1 bases.
    Mono,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Memory,
    /// Length-prefixed frames over local socket pairs (unix only).
    Socket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub gain_admm: AdmmConfig,
    pub directional_admm: AdmmConfig,
    /// `η_p`: relative parameter change that ends the outer loop.
    pub outer_tolerance: f64,
    /// `η_D`: summed direction change that ends the direction stage.
    pub direction_tolerance: f64,
    pub max_outer: usize,
    pub max_doa_sweeps: usize,
    /// Noise floor relative to the mean diagonal of each covariance.
    pub noise_floor: f64,
    pub transport: TransportKind,
}

impl RunConfig {
    /// Solver settings carried by the scenario.
    pub fn from_scenario(scenario: &Scenario, mode: Mode) -> Self {
        let s = &scenario.spec.solver;
        Self {
            mode,
            gain_admm: s.gain_admm(),
            directional_admm: s.directional_admm(),
            outer_tolerance: s.eta_p,
            direction_tolerance: s.eta_d * scenario.sky.num_sources() as f64,
            max_outer: s.max_outer,
            max_doa_sweeps: s.max_doa_sweeps,
            noise_floor: s.noise_floor,
            transport: TransportKind::Memory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gain_admm.validate()?;
        self.directional_admm.validate()?;
        if !(self.outer_tolerance > 0.0 && self.direction_tolerance > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(self.noise_floor > 0.0 && self.noise_floor < 1.0) {
            return Err(Error::invalid("noise floor must lie in (0, 1)"));
        }
        if self.max_outer == 0 || self.max_doa_sweeps == 0 {
            return Err(Error::invalid("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

/// Starting point; the default is unit gains, nominal directions, unit
/// directional gains and unit noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Initialization {
    pub params: Vec<PerWavelengthParams>,
    pub gain_coefficients: CVec,
    pub directional_coefficients: Vec<DVector<f64>>,
}

impl From<&Truth> for Initialization {
    fn from(t: &Truth) -> Self {
        Self {
            params: t.params.clone(),
            gain_coefficients: t.gain_coefficients.clone(),
            directional_coefficients: t.directional_coefficients.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gain,
    Directional,
}

/// One ADMM iteration tagged with where it happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub outer: usize,
    pub stage: Stage,
    /// Source index for the directional stage.
    pub source: Option<usize>,
    #[serde(flatten)]
    pub record: IterationRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub gain_seconds: f64,
    pub directional_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: Mode,
    pub outer_iterations: usize,
    pub converged: bool,
    pub gain_consensus: Vec<ConsensusOutcome>,
    pub degenerate_selections: Vec<(usize, usize)>,
    pub timing: StageTiming,
    /// Exchange rounds used across both stages.
    pub exchange_rounds: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationResult {
    /// Per-wavelength estimates with the first gain phase set to zero.
    pub params: Vec<PerWavelengthParams>,
    /// Mean of the agents' gain coefficients.
    pub gain_coefficients: CVec,
    pub directional_coefficients: Vec<DVector<f64>>,
    pub report: CalibrationReport,
}

/// Agent layout derived from the mode.
struct Layout {
    topology: Topology,
    partition: WavelengthPartition,
    consensus: ConsensusMode,
    bases: BasisConfig,
}

fn layout(scenario: &Scenario, mode: Mode) -> Result<Layout> {
    let f = scenario.num_wavelengths();
    match mode {
        Mode::Decentralized | Mode::Fusion => Ok(Layout {
            topology: scenario.topology()?,
            partition: WavelengthPartition::contiguous(f, scenario.spec.agents)?,
            consensus: if mode == Mode::Fusion { ConsensusMode::Fusion } else { ConsensusMode::Decentralized },
            bases: scenario.bases,
        }),
        Mode::Mono => {
            let f0 = scenario.wavelengths.reference_frequency();
            Ok(Layout {
                topology: Topology::isolated(f)?,
                partition: WavelengthPartition::new((0..f).map(|j| vec![j]).collect(), f)?,
                consensus: ConsensusMode::Decentralized,
                bases: BasisConfig {
                    gain: Basis::new(scenario.bases.gain.kind, 1, f0)?,
                    directional: Basis::new(scenario.bases.directional.kind, 1, f0)?,
                },
            })
        }
    }
}

/// Wall-clock timer for the stage timings. Browsers give wasm no monotonic
/// clock through std, so there it always reads zero.
#[derive(Clone, Copy)]
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn make_transport(kind: TransportKind, topology: &Topology) -> Result<Box<dyn Transport>> {
    match kind {
        TransportKind::Memory => Ok(Box::new(InMemoryTransport::new())),
        #[cfg(unix)]
        TransportKind::Socket => Ok(Box::new(crate::network::SocketTransport::new(topology)?)),
        #[cfg(not(unix))]
        TransportKind::Socket => {
            let _ = topology;
            Err(Error::invalid("socket transport needs a unix platform"))
        }
    }
}

fn default_start(scenario: &Scenario, bases: &BasisConfig) -> Initialization {
    let p = scenario.geometry.num_sensors();
    let q = scenario.sky.num_sources();
    let params = (0..scenario.num_wavelengths())
        .map(|_| PerWavelengthParams {
            gains: CVec::from_element(p, C64::new(1.0, 0.0)),
            directions: scenario.sky.nominal().to_vec(),
            directional_gains: vec![1.0; q],
            noise: vec![1.0; p],
        })
        .collect();
    let mut alpha = CVec::zeros(p * bases.gain.order);
    for s in 0..p {
        alpha[s * bases.gain.order] = C64::new(1.0, 0.0);
    }
    let mut alpha_m = DVector::zeros(bases.directional.order);
    alpha_m[0] = 1.0;
    Initialization { params, gain_coefficients: alpha, directional_coefficients: vec![alpha_m; q] }
}

/// Flattened parameter vector used by the outer stopping rule. Gains are
/// compared with their common phase removed, since the cost cannot see it.
fn flatten(params: &[PerWavelengthParams]) -> DVector<f64> {
    DVector::from_vec(
        params
            .iter()
            .flat_map(|p| {
                let mut p = p.clone();
                p.fix_phase();
                p.flatten()
            })
            .collect(),
    )
}

/// Runs the full calibration on the given covariances.
///
/// Hitting the outer iteration cap is not an error; it is reported through
/// `report.converged`.
pub fn run_calibration(
    scenario: &Scenario,
    config: &RunConfig,
    data: &CovarianceSet,
    init: Option<&Initialization>,
    trace: &mut dyn FnMut(&TraceRecord),
) -> Result<CalibrationResult> {
    config.validate()?;
    let f = scenario.num_wavelengths();
    Error::check_len("covariance matrices", f, data.matrices.len())?;
    let p_count = scenario.geometry.num_sensors();
    for m in &data.matrices {
        Error::check_len("covariance rows", p_count, m.nrows())?;
        Error::check_len("covariance columns", p_count, m.ncols())?;
    }
    let lay = layout(scenario, config.mode)?;
    let z_count = lay.partition.num_agents();
    let wavelengths = scenario.wavelengths.wavelengths();
    let kg = lay.bases.gain.order;

    let start = match init {
        Some(i) if config.mode != Mode::Mono => i.clone(),
        Some(i) => {
            // order-1 coefficients are the values themselves; mono agents
            // start from their own wavelength, so only the layout changes
            let mut s = default_start(scenario, &lay.bases);
            s.params = i.params.clone();
            s
        }
        None => default_start(scenario, &lay.bases),
    };
    Error::check_len("initial parameter sets", f, start.params.len())?;
    Error::check_len("initial gain coefficients", p_count * kg, start.gain_coefficients.len())?;
    let mut params = start.params.clone();

    let gain_rows: Vec<DVector<f64>> = wavelengths.iter().map(|&l| lay.bases.gain.vector(l)).collect::<Result<_>>()?;
    let dir_rows: Vec<DVector<f64>> =
        wavelengths.iter().map(|&l| lay.bases.directional.vector(l)).collect::<Result<_>>()?;
    let dir_bases: Vec<DMatrix<f64>> = (0..z_count)
        .map(|z| {
            let ws: Vec<f64> = lay.partition.block(z).iter().map(|&j| wavelengths[j]).collect();
            lay.bases.directional.stack(&ws)
        })
        .collect::<Result<_>>()?;

    let mut gain_state = ConsensusState::new(lay.consensus, &lay.topology, &start.gain_coefficients, config.gain_admm.rho);
    let mut dir_states: Vec<ConsensusState> = (0..scenario.sky.num_sources())
        .map(|q| {
            let a = if config.mode == Mode::Mono {
                DVector::from_element(1, 1.0)
            } else {
                start.directional_coefficients[q].clone()
            };
            ConsensusState::new(lay.consensus, &lay.topology, &a.map(|v| C64::new(v, 0.0)), config.directional_admm.rho)
        })
        .collect();
    if config.mode == Mode::Mono {
        // each isolated agent starts from its own wavelength's values
        for (z, agent) in gain_state.agents.iter_mut().enumerate() {
            let j = lay.partition.block(z)[0];
            agent.alpha = params[j].gains.clone();
        }
        for (q, st) in dir_states.iter_mut().enumerate() {
            for (z, agent) in st.agents.iter_mut().enumerate() {
                let j = lay.partition.block(z)[0];
                agent.alpha = CVec::from_element(1, C64::new(params[j].directional_gains[q], 0.0));
            }
        }
    }

    let mut transport = make_transport(config.transport, &lay.topology)?;
    let mut round: u32 = 0;
    let mut report = CalibrationReport {
        mode: config.mode,
        outer_iterations: 0,
        converged: false,
        gain_consensus: Vec::new(),
        degenerate_selections: Vec::new(),
        timing: StageTiming::default(),
        exchange_rounds: 0,
    };

    for outer in 0..config.max_outer {
        report.outer_iterations = outer + 1;
        let before = flatten(&params);

        let t0 = Stopwatch::start();
        let agents: Vec<GainAgentData> = (0..z_count)
            .map(|z| {
                let channels = lay
                    .partition
                    .block(z)
                    .iter()
                    .map(|&j| {
                        let p = &params[j];
                        let rk = calibrator_model(
                            &scenario.geometry,
                            &p.directions,
                            scenario.sky.powers(j),
                            &p.directional_gains,
                            wavelengths[j],
                        )?;
                        GainChannel::new(&data.matrices[j], &rk, &weighting_matrix(&p.noise)?, gain_rows[j].clone())
                    })
                    .collect::<Result<_>>()?;
                Ok(GainAgentData { channels })
            })
            .collect::<Result<_>>()?;
        let mut problem = GainProblem::new(&agents, &config.gain_admm);
        let outcome = run_consensus(
            &mut problem,
            &mut gain_state,
            &lay.topology,
            transport.as_mut(),
            &mut round,
            PayloadKind::GammaGain,
            &config.gain_admm,
            &mut |r| trace(&TraceRecord { outer, stage: Stage::Gain, source: None, record: r.clone() }),
        )?;
        report.gain_consensus.push(outcome);
        for z in 0..z_count {
            let alpha = &gain_state.agents[z].alpha;
            for &j in lay.partition.block(z) {
                let b = &gain_rows[j];
                params[j].gains = CVec::from_fn(p_count, |s, _| (0..kg).map(|k| alpha[s * kg + k] * b[k]).sum());
            }
        }
        report.timing.gain_seconds += t0.seconds();

        let t1 = Stopwatch::start();
        let input = DoaStageInput {
            geometry: &scenario.geometry,
            sky: &scenario.sky,
            wavelengths,
            samples: &data.matrices,
            partition: &lay.partition,
            topology: &lay.topology,
            bases: &dir_bases,
            basis_rows: &dir_rows,
            grid: &scenario.spec.grid,
            outer_iteration: outer,
            admm: &config.directional_admm,
            max_sweeps: config.max_doa_sweeps,
            direction_tolerance: config.direction_tolerance,
            noise_floor: config.noise_floor,
        };
        let doa = run_doa_stage(&input, &mut params, &mut dir_states, transport.as_mut(), &mut round, &mut |q, r| {
            trace(&TraceRecord { outer, stage: Stage::Directional, source: Some(q), record: r.clone() })
        })?;
        report.degenerate_selections.extend(doa.degenerate);
        report.timing.directional_seconds += t1.seconds();

        let after = flatten(&params);
        if (&after - &before).norm() <= config.outer_tolerance * after.norm() {
            report.converged = true;
            break;
        }
    }

    report.exchange_rounds = round as u64;
    for p in &mut params {
        p.fix_phase();
    }
    let directional_coefficients = dir_states.iter().map(|s| s.mean_alpha().map(|v| v.re)).collect();
    Ok(CalibrationResult {
        params,
        gain_coefficients: gain_state.mean_alpha(),
        directional_coefficients,
        report,
    })
}

/// `(1/√(PF)) Σ_λ ‖ĝ_λ − g_λ‖₂`, after removing each side's common phase.
pub fn rmse_gains(estimate: &[CVec], truth: &[CVec]) -> Result<f64> {
    Error::check_len("wavelengths", truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("gain sets"));
    }
    let p = truth[0].len();
    let mut total = 0.0;
    for (e, t) in estimate.iter().zip(truth) {
        Error::check_len("sensors", p, e.len())?;
        Error::check_len("sensors", p, t.len())?;
        let mut e = e.clone();
        let mut t = t.clone();
        fix_gain_phase(&mut e);
        fix_gain_phase(&mut t);
        total += (e - t).norm();
    }
    Ok(total / ((p * truth.len()) as f64).sqrt())
}

/// `(1/√(QF)) Σ_λ ‖D̂_λ − D_λ‖_F`.
pub fn rmse_directions(estimate: &[Vec<Direction>], truth: &[Vec<Direction>]) -> Result<f64> {
    Error::check_len("wavelengths", truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("direction sets"));
    }
    let q = truth[0].len();
    let mut total = 0.0;
    for (e, t) in estimate.iter().zip(truth) {
        Error::check_len("sources", q, e.len())?;
        Error::check_len("sources", q, t.len())?;
        total += e.iter().zip(t).map(|(a, b)| a.distance(b).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / ((q * truth.len()) as f64).sqrt())
}

/// Largest relative error of the directional gains over all wavelengths and sources.
pub fn directional_gain_error(estimate: &[PerWavelengthParams], truth: &[PerWavelengthParams]) -> f64 {
    estimate
        .iter()
        .zip(truth)
        .flat_map(|(e, t)| e.directional_gains.iter().zip(&t.directional_gains).map(|(a, b)| (a - b).abs() / b.abs()))
        .fold(0.0, f64::max)
}

/// Weighted off-diagonal misfit of the current estimate, summed over wavelengths.
pub fn total_cost(scenario: &Scenario, params: &[PerWavelengthParams], data: &[CMat]) -> Result<f64> {
    let mut total = 0.0;
    for (j, (p, r)) in params.iter().zip(data).enumerate() {
        let model = crate::model::model_covariance(p, &scenario.geometry, scenario.sky.powers(j), scenario.wavelengths.wavelengths()[j])?;
        total += crate::model::local_cost(&model, r, &weighting_matrix(&p.noise)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn rmse_examples() {
        let g = vec![CVec::from_vec(vec![c(1.0, 0.0), c(0.5, 0.5)]); 3];
        assert_eq!(rmse_gains(&g, &g).unwrap(), 0.0);

        let one = vec![CVec::from_vec(vec![c(2.0, 0.0)])];
        let err = vec![CVec::from_vec(vec![c(2.75, 0.0)])];
        assert!((rmse_gains(&err, &one).unwrap() - 0.75).abs() < 1e-15);

        // a common phase rotation is not an error
        let rot: Vec<CVec> = g.iter().map(|v| v * C64::from_polar(1.0, 0.7)).collect();
        assert!(rmse_gains(&rot, &g).unwrap() < 1e-15);

        // direct formula with hand-chosen values, P = 2, F = 2
        let truth = vec![
            CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)]),
            CVec::from_vec(vec![c(2.0, 0.0), c(1.0, 1.0)]),
        ];
        let est = vec![
            CVec::from_vec(vec![c(1.0, 0.0), c(0.3, 1.4)]),
            CVec::from_vec(vec![c(2.0, 0.0), c(1.0, -1.0)]),
        ];
        let want = ((0.3f64.powi(2) + 0.4f64.powi(2)).sqrt() + 2.0) / 2.0;
        assert!((rmse_gains(&est, &truth).unwrap() - want).abs() < 1e-15);
        assert!(rmse_gains(&est[..1], &truth).is_err());

        let d = vec![vec![Direction::new(0.1, 0.2), Direction::new(0.0, 0.0)]];
        assert_eq!(rmse_directions(&d, &d).unwrap(), 0.0);
        let e = vec![vec![Direction::new(0.4, 0.6), Direction::new(0.0, 0.0)]];
        assert!((rmse_directions(&e, &d).unwrap() - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }
}
