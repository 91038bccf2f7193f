//! Scenario files and synthetic ground truth.
//!
//! A scenario fixes the array, the sky, the wavelengths, the basis orders
//! and the solver settings. The true per-wavelength parameters are drawn
//! from the scenario seed so that every Monte-Carlo run shares one truth and
//! only the snapshot noise changes.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::basis::{Basis, BasisConfig, BasisKind};
use crate::doa::GridConfig;
use crate::error::{Error, Result};
use crate::model::{
    model_covariance, noise_for_snr, sample_covariance, simulate_snapshots, steering_matrix, weighted_outer_sum,
    ArrayGeometry, CMat, CVec, CovarianceSet, Direction, PerWavelengthParams, SkyModel, WavelengthGrid, WeakSource,
    C64,
};
use crate::network::Topology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesSpec {
    pub directions: Vec<[f64; 2]>,
    /// `[λ][q]`; a single row is reused for every wavelength.
    pub powers_per_wavelength: Vec<Vec<f64>>,
    pub reference_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakSourceSpec {
    pub direction: [f64; 2],
    pub power: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    #[default]
    Ring,
    Full,
    Isolated,
}

/// How the ground truth is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    /// Range of `|α_{p,1}|`.
    pub gain_amplitude: [f64; 2],
    /// Scale of the higher-order gain coefficients.
    pub gain_variation: f64,
    /// Range of the leading directional-gain coefficient.
    pub directional_gain: [f64; 2],
    pub directional_variation: f64,
    /// Largest offset from the nominal direction, in initial grid steps per axis.
    pub offset_steps: u32,
    /// Offsets scale as `(λ/λ0)^dispersion`; zero keeps them on the grid.
    pub dispersion: f64,
    /// Noise power when `snr_db` is absent.
    pub noise_power: f64,
    /// Relative spread of the noise power across sensors.
    pub noise_spread: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            gain_amplitude: [0.8, 1.2],
            gain_variation: 0.1,
            directional_gain: [0.6, 1.0],
            directional_variation: 0.1,
            offset_steps: 2,
            dispersion: 0.0,
            noise_power: 1.0,
            noise_spread: 0.0,
        }
    }
}

/// Optional solver overrides carried by the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub rho: f64,
    pub rho_directional: f64,
    pub adapt_rho: bool,
    pub eta_p: f64,
    pub eta_alpha: f64,
    pub eta_alpha_m: f64,
    pub eta_local: f64,
    /// Per-source direction tolerance; multiplied by `Q`.
    pub eta_d: f64,
    pub max_outer: usize,
    pub max_admm: usize,
    pub max_sweeps: usize,
    pub max_doa_sweeps: usize,
    /// Noise estimates never drop below this fraction of the mean diagonal.
    pub noise_floor: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            rho: 1.0,
            rho_directional: 1.0,
            adapt_rho: false,
            eta_p: 1e-3,
            eta_alpha: 1e-4,
            eta_alpha_m: 1e-4,
            eta_local: 1e-4,
            eta_d: 1e-6,
            max_outer: 20,
            max_admm: 500,
            max_sweeps: 20,
            max_doa_sweeps: 5,
            noise_floor: 1e-8,
        }
    }
}

impl SolverSpec {
    pub fn gain_admm(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            adapt_rho: self.adapt_rho,
            max_iterations: self.max_admm,
            tolerance: self.eta_alpha,
            local_tolerance: self.eta_local,
            max_sweeps: self.max_sweeps,
            ..AdmmConfig::default()
        }
    }

    pub fn directional_admm(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho_directional,
            tolerance: self.eta_alpha_m,
            ..self.gain_admm()
        }
    }
}

/// On-disk scenario description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub geometry: Vec<[f64; 2]>,
    pub sources: SourcesSpec,
    #[serde(default)]
    pub weak_sources: Vec<WeakSourceSpec>,
    /// Wavelengths in metres.
    pub wavelengths: Vec<f64>,
    /// Reference frequency in Hz.
    pub f0: f64,
    /// Snapshot count; absent means exact model covariances.
    #[serde(rename = "N", default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "K_g")]
    pub k_g: usize,
    #[serde(rename = "K_m")]
    pub k_m: usize,
    /// Gain basis.
    #[serde(default = "default_gain_basis")]
    pub basis: BasisKind,
    #[serde(default = "default_directional_basis")]
    pub directional_basis: BasisKind,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default)]
    pub topology: TopologyKind,
    #[serde(default)]
    pub truth: TruthSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

fn default_gain_basis() -> BasisKind {
    BasisKind::FrequencyPolynomial
}

fn default_directional_basis() -> BasisKind {
    BasisKind::WavelengthPowerLaw
}

fn default_agents() -> usize {
    3
}

/// Ground truth shared by all runs of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub params: Vec<PerWavelengthParams>,
    /// `α`, sensor-major blocks of `K_g` coefficients.
    pub gain_coefficients: CVec,
    /// `α_{m_q}` for every source (the reference source has `[1, 0, …]`).
    pub directional_coefficients: Vec<DVector<f64>>,
}

/// A validated scenario with its ground truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioFile,
    pub geometry: ArrayGeometry,
    pub sky: SkyModel,
    pub wavelengths: WavelengthGrid,
    pub bases: BasisConfig,
    pub truth: Truth,
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn new(spec: ScenarioFile) -> Result<Self> {
        let geometry = ArrayGeometry::new(spec.geometry.clone())?;
        let wavelengths = WavelengthGrid::new(spec.wavelengths.clone(), spec.f0)?;
        let f = wavelengths.len();
        let powers = match spec.sources.powers_per_wavelength.len() {
            1 => vec![spec.sources.powers_per_wavelength[0].clone(); f],
            n if n == f => spec.sources.powers_per_wavelength.clone(),
            n => {
                return Err(Error::invalid(format!(
                    "powers_per_wavelength has {n} rows for {f} wavelengths"
                )))
            }
        };
        let weak = spec
            .weak_sources
            .iter()
            .map(|w| WeakSource { direction: w.direction.into(), power: w.power })
            .collect();
        let sky = SkyModel::new(
            spec.sources.directions.iter().map(|&d| d.into()).collect(),
            powers,
            spec.sources.reference_index,
            weak,
        )?;
        let bases = BasisConfig {
            gain: Basis::new(spec.basis, spec.k_g, spec.f0)?,
            directional: Basis::new(spec.directional_basis, spec.k_m, spec.f0)?,
        };
        spec.grid.validate()?;
        if spec.agents == 0 || spec.agents > f {
            return Err(Error::invalid(format!("need 1 <= agents <= F, got {} agents for F = {f}", spec.agents)));
        }
        if spec.n == Some(0) {
            return Err(Error::invalid("N must be at least 1"));
        }
        spec.solver.gain_admm().validate()?;
        spec.solver.directional_admm().validate()?;
        if !(spec.solver.eta_p > 0.0 && spec.solver.eta_d > 0.0) || spec.solver.max_outer == 0 {
            return Err(Error::invalid("outer tolerances and caps must be positive"));
        }
        if !(spec.solver.noise_floor > 0.0 && spec.solver.noise_floor < 1.0) {
            return Err(Error::invalid("solver.noise_floor must lie in (0, 1)"));
        }
        let truth = generate_truth(&spec, &geometry, &sky, &wavelengths, &bases)?;
        Ok(Self { spec, geometry, sky, wavelengths, bases, truth })
    }

    pub fn num_wavelengths(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn topology(&self) -> Result<Topology> {
        let z = self.spec.agents;
        match self.spec.topology {
            TopologyKind::Ring if z == 1 => Topology::isolated(1),
            TopologyKind::Ring => Topology::ring(z),
            TopologyKind::Full => Topology::fully_connected(z),
            TopologyKind::Isolated => Topology::isolated(z),
        }
    }

    /// Exact covariances when `n` is `None`, otherwise sample covariances
    /// from `n` snapshots drawn with `seed`.
    pub fn covariances(&self, n: Option<usize>, seed: u64) -> Result<CovarianceSet> {
        let matrices = (0..self.num_wavelengths())
            .map(|j| match n {
                None => self.true_covariance(j),
                Some(n) => {
                    let x = simulate_snapshots(
                        &self.truth.params[j],
                        &self.geometry,
                        self.sky.powers(j),
                        self.sky.weak_sources(),
                        self.wavelengths.wavelengths()[j],
                        n,
                        wavelength_seed(seed, j),
                    )?;
                    sample_covariance(&x)
                }
            })
            .collect::<Result<_>>()?;
        Ok(CovarianceSet { matrices, samples: n })
    }

    /// Exact covariance at wavelength `j`, weak background included.
    pub fn true_covariance(&self, j: usize) -> Result<CMat> {
        let lambda = self.wavelengths.wavelengths()[j];
        let mut r = model_covariance(&self.truth.params[j], &self.geometry, self.sky.powers(j), lambda)?;
        let weak = self.sky.weak_sources();
        if !weak.is_empty() {
            let dirs: Vec<Direction> = weak.iter().map(|w| w.direction).collect();
            let a = steering_matrix(self.geometry.positions(), &dirs, lambda)?;
            r += weighted_outer_sum(&a, |u| weak[u].power);
        }
        Ok(r)
    }
}

/// Independent stream per wavelength derived from one run seed.
pub fn wavelength_seed(seed: u64, j: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (j as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn complex_coefficient(rng: &mut ChaCha8Rng, scale: f64) -> C64 {
    C64::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)) * scale
}

fn generate_truth(
    spec: &ScenarioFile,
    geometry: &ArrayGeometry,
    sky: &SkyModel,
    wavelengths: &WavelengthGrid,
    bases: &BasisConfig,
) -> Result<Truth> {
    let t = &spec.truth;
    if !(t.gain_amplitude[0] > 0.0 && t.gain_amplitude[0] <= t.gain_amplitude[1]) {
        return Err(Error::invalid("truth.gain_amplitude must be an increasing positive range"));
    }
    if !(t.directional_gain[0] > 0.0 && t.directional_gain[0] <= t.directional_gain[1]) {
        return Err(Error::invalid("truth.directional_gain must be an increasing positive range"));
    }
    if !(t.noise_power > 0.0) || !(0.0..1.0).contains(&t.noise_spread) {
        return Err(Error::invalid("truth.noise_power must be positive and noise_spread in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = geometry.num_sensors();
    let q_count = sky.num_sources();
    let kg = bases.gain.order;
    let km = bases.directional.order;

    // The first sensor's coefficients are real so its gain is real and
    // positive at every wavelength, matching the phase convention.
    let mut alpha = CVec::zeros(p * kg);
    for s in 0..p {
        let amp = rng.random_range(t.gain_amplitude[0]..=t.gain_amplitude[1]);
        let phase = if s == 0 { 0.0 } else { rng.random_range(-std::f64::consts::PI..std::f64::consts::PI) };
        alpha[s * kg] = C64::from_polar(amp, phase);
        for k in 1..kg {
            let c = complex_coefficient(&mut rng, t.gain_variation);
            alpha[s * kg + k] = if s == 0 { C64::new(c.re, 0.0) } else { c };
        }
    }

    let mut alpha_m = Vec::with_capacity(q_count);
    for q in 0..q_count {
        let mut a = DVector::zeros(km);
        if q == sky.reference() {
            a[0] = 1.0;
        } else {
            a[0] = rng.random_range(t.directional_gain[0]..=t.directional_gain[1]);
            for k in 1..km {
                a[k] = rng.random_range(-1.0..=1.0) * t.directional_variation;
            }
        }
        alpha_m.push(a);
    }

    let step = spec.grid.spacing(0);
    let max_steps = t.offset_steps.min((spec.grid.points as f64).sqrt() as u32 / 2) as i64;
    let offsets: Vec<[f64; 2]> = (0..q_count)
        .map(|q| {
            if q == sky.reference() || max_steps == 0 {
                [0.0, 0.0]
            } else {
                let i = rng.random_range(-max_steps..=max_steps);
                let j = rng.random_range(-max_steps..=max_steps);
                [i as f64 * step, j as f64 * step]
            }
        })
        .collect();
    let spread: Vec<f64> = (0..p)
        .map(|_| 1.0 + t.noise_spread * rng.random_range(-1.0..=1.0))
        .collect();

    let lambda0 = wavelengths.reference_wavelength();
    let mut params = Vec::with_capacity(wavelengths.len());
    for (j, &lambda) in wavelengths.wavelengths().iter().enumerate() {
        let b = bases.gain.vector(lambda)?;
        let gains = CVec::from_fn(p, |s, _| (0..kg).map(|k| alpha[s * kg + k] * b[k]).sum());
        let bm = bases.directional.vector(lambda)?;
        let directional_gains: Vec<f64> = alpha_m.iter().map(|a| a.dot(&bm)).collect();
        if directional_gains.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid(format!("drawn directional gain is not positive at wavelength {j}")));
        }
        let scale = (lambda / lambda0).powf(t.dispersion);
        let directions = sky
            .nominal()
            .iter()
            .zip(&offsets)
            .map(|(d, o)| Direction::new(d.l + o[0] * scale, d.m + o[1] * scale))
            .collect();
        let base_noise = match spec.snr_db {
            Some(db) => {
                let apparent: Vec<f64> = sky.powers(j).iter().zip(&directional_gains).map(|(s, m)| s * m).collect();
                noise_for_snr(&apparent, db)?
            }
            None => t.noise_power,
        };
        params.push(PerWavelengthParams {
            gains,
            directions,
            directional_gains,
            noise: spread.iter().map(|s| s * base_noise).collect(),
        });
    }
    Ok(Truth { params, gain_coefficients: alpha, directional_coefficients: alpha_m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::project_gains;
    use crate::basis::ConsensusVector;
    use crate::model::{snr_db, SPEED_OF_LIGHT};

    fn spec() -> ScenarioFile {
        let f0 = 30e6;
        serde_json::from_value(serde_json::json!({
            "geometry": [[0.0, 0.0], [4.0, 1.0], [-2.0, 3.0], [1.0, -5.0]],
            "sources": {"directions": [[0.0, 0.0], [0.25, 0.125]], "powers_per_wavelength": [[4.0, 2.0]], "reference_index": 0},
            "wavelengths": [SPEED_OF_LIGHT / 28e6, SPEED_OF_LIGHT / 30e6, SPEED_OF_LIGHT / 32e6],
            "f0": f0,
            "K_g": 2,
            "K_m": 2,
            "seed": 5
        }))
        .unwrap()
    }

    #[test]
    fn parses_minimal_file_with_defaults() {
        let s = Scenario::new(spec()).unwrap();
        assert_eq!(s.spec.agents, 3);
        assert_eq!(s.spec.n, None);
        assert_eq!(s.sky.powers(2), &[4.0, 2.0]);
        assert_eq!(s.spec.grid, GridConfig::default());
        assert_eq!(s.topology().unwrap().num_agents(), 3);
    }

    #[test]
    fn rejects_bad_files() {
        let mut bad = spec();
        bad.sources.powers_per_wavelength = vec![vec![1.0, 1.0]; 2];
        assert!(Scenario::new(bad).is_err());
        let mut bad = spec();
        bad.agents = 4;
        assert!(Scenario::new(bad).is_err());
        assert!(Scenario::from_json(r#"{"geometry": []}"#).is_err());
        let mut text = serde_json::to_value(spec()).unwrap();
        text["unexpected"] = serde_json::json!(1);
        assert!(Scenario::from_json(&text.to_string()).is_err());
    }

    #[test]
    fn truth_follows_the_basis_and_conventions() {
        let s = Scenario::new(spec()).unwrap();
        let alpha = ConsensusVector::new(s.truth.gain_coefficients.clone(), 2).unwrap();
        for (j, &lambda) in s.wavelengths.wavelengths().iter().enumerate() {
            let p = &s.truth.params[j];
            let g = project_gains(&alpha, lambda, &s.bases.gain).unwrap();
            assert!((g - &p.gains).norm() < 1e-12);
            assert!(p.gains[0].im == 0.0 && p.gains[0].re > 0.0);
            assert_eq!(p.directions[0], s.sky.nominal()[0]);
            assert_eq!(p.directional_gains[0], 1.0);
            // offsets are whole grid steps
            let h = s.spec.grid.spacing(0);
            let dl = (p.directions[1].l - s.sky.nominal()[1].l) / h;
            assert_eq!(dl, dl.round());
        }
        // same seed, same truth
        assert_eq!(Scenario::new(spec()).unwrap().truth, s.truth);
    }

    #[test]
    fn snr_sets_noise() {
        let mut sp = spec();
        sp.snr_db = Some(-6.0);
        let s = Scenario::new(sp).unwrap();
        for j in 0..3 {
            let p = &s.truth.params[j];
            let apparent: Vec<f64> = s.sky.powers(j).iter().zip(&p.directional_gains).map(|(a, b)| a * b).collect();
            assert!((snr_db(&apparent, p.noise[0]).unwrap() + 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn covariances_exact_and_sampled() {
        let s = Scenario::new(spec()).unwrap();
        let exact = s.covariances(None, 0).unwrap();
        assert_eq!(exact.samples, None);
        let a = s.covariances(Some(64), 3).unwrap();
        let b = s.covariances(Some(64), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrices[0], s.covariances(Some(64), 4).unwrap().matrices[0]);
        assert_ne!(wavelength_seed(3, 0), wavelength_seed(3, 1));
        let big = s.covariances(Some(1 << 14), 9).unwrap();
        for j in 0..3 {
            let err = (&big.matrices[j] - &exact.matrices[j]).norm() / exact.matrices[j].norm();
            assert!(err < 0.05, "{err}");
        }
    }

    #[test]
    fn scenario_files_in_repo_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                Scenario::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen > 0);
    }
}
