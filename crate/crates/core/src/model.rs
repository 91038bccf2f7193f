//! Array geometry, sky model and the narrowband covariance forward model.
//!
//! Directions are direction cosines `(l, m)`. The steering matrix is
//! `A = exp(-j 2π/λ Ξ D) / √P`, and the array covariance for one wavelength is
//! `R = G A Σ^{1/2} M Σ^{1/2} A^H G^H + Σ_n` with `G = diag(g)`,
//! `M = diag(m)` and `Σ_n = diag(σ_n)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Direction cosines of a source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub l: f64,
    pub m: f64,
}

impl Direction {
    pub const fn new(l: f64, m: f64) -> Self {
        Self { l, m }
    }

    pub fn is_finite(&self) -> bool {
        self.l.is_finite() && self.m.is_finite()
    }

    pub fn distance(&self, other: &Direction) -> f64 {
        (self.l - other.l).hypot(self.m - other.m)
    }
}

impl From<[f64; 2]> for Direction {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Sensor positions in metres. The first sensor is the phase reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<[f64; 2]>,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::invalid(format!(
                "an array needs at least 2 sensors, got {}",
                positions.len()
            )));
        }
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("sensor coordinates must be finite"));
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn num_sensors(&self) -> usize {
        self.positions.len()
    }

    pub fn steering(&self, directions: &[Direction], wavelength: f64) -> Result<CMat> {
        steering_matrix(&self.positions, directions, wavelength)
    }
}

/// A background source that is present in the data but not in the fitted model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakSource {
    pub direction: Direction,
    pub power: f64,
}

/// Calibrator sources and the unmodelled background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyModel {
    nominal: Vec<Direction>,
    /// `powers[j][q]`: power of calibrator `q` at wavelength index `j`.
    powers: Vec<Vec<f64>>,
    reference: usize,
    weak: Vec<WeakSource>,
}

impl SkyModel {
    pub fn new(
        nominal: Vec<Direction>,
        powers: Vec<Vec<f64>>,
        reference: usize,
        weak: Vec<WeakSource>,
    ) -> Result<Self> {
        let q = nominal.len();
        if q == 0 {
            return Err(Error::invalid("sky model needs at least one calibrator"));
        }
        if reference >= q {
            return Err(Error::invalid(format!(
                "reference index {reference} out of range for {q} sources"
            )));
        }
        if nominal.iter().any(|d| !d.is_finite() || d.l.hypot(d.m) > 1.0) {
            return Err(Error::invalid("nominal directions must be finite with |d| <= 1"));
        }
        if powers.is_empty() {
            return Err(Error::EmptyInput("calibrator powers"));
        }
        for row in &powers {
            Error::check_len("calibrator powers per wavelength", q, row.len())?;
            if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::invalid("calibrator powers must be positive"));
            }
        }
        if weak.iter().any(|w| !(w.power >= 0.0) || !w.direction.is_finite()) {
            return Err(Error::invalid("weak sources need finite directions and non-negative power"));
        }
        Ok(Self { nominal, powers, reference, weak })
    }

    pub fn num_sources(&self) -> usize {
        self.nominal.len()
    }

    pub fn nominal(&self) -> &[Direction] {
        &self.nominal
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn powers(&self, wavelength_index: usize) -> &[f64] {
        &self.powers[wavelength_index]
    }

    pub fn num_wavelengths(&self) -> usize {
        self.powers.len()
    }

    pub fn weak_sources(&self) -> &[WeakSource] {
        &self.weak
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    wavelengths: Vec<f64>,
    reference_frequency: f64,
}

impl WavelengthGrid {
    pub fn new(wavelengths: Vec<f64>, reference_frequency: f64) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::EmptyInput("wavelength grid"));
        }
        if wavelengths.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("wavelengths must be positive"));
        }
        if !(reference_frequency > 0.0) {
            return Err(Error::invalid("reference frequency must be positive"));
        }
        Ok(Self { wavelengths, reference_frequency })
    }

    pub fn from_frequencies(frequencies: &[f64], reference_frequency: f64) -> Result<Self> {
        Self::new(
            frequencies.iter().map(|f| SPEED_OF_LIGHT / f).collect(),
            reference_frequency,
        )
    }

    /// `count` frequencies evenly spaced over `[low, high]` (a single channel sits at `low`).
    pub fn uniform_band(low: f64, high: f64, count: usize, reference_frequency: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::EmptyInput("wavelength grid"));
        }
        let freqs: Vec<f64> = if count == 1 {
            vec![low]
        } else {
            (0..count)
                .map(|k| low + (high - low) * k as f64 / (count - 1) as f64)
                .collect()
        };
        Self::from_frequencies(&freqs, reference_frequency)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    pub fn reference_frequency(&self) -> f64 {
        self.reference_frequency
    }

    pub fn reference_wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.reference_frequency
    }
}

/// Everything estimated at one wavelength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerWavelengthParams {
    pub gains: CVec,
    pub directions: Vec<Direction>,
    pub directional_gains: Vec<f64>,
    pub noise: Vec<f64>,
}

impl PerWavelengthParams {
    pub fn num_sensors(&self) -> usize {
        self.gains.len()
    }

    pub fn num_sources(&self) -> usize {
        self.directions.len()
    }

    pub fn check_dims(&self, sensors: usize, sources: usize) -> Result<()> {
        Error::check_len("gains", sensors, self.gains.len())?;
        Error::check_len("noise powers", sensors, self.noise.len())?;
        Error::check_len("directions", sources, self.directions.len())?;
        Error::check_len("directional gains", sources, self.directional_gains.len())
    }

    /// Rotates the gains so the first sensor has zero phase.
    pub fn fix_phase(&mut self) {
        fix_gain_phase(&mut self.gains);
    }

    /// Flattens into real numbers in the order gains (re, im), directions,
    /// directional gains, noise powers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.gains.len() + 3 * self.directions.len() + self.noise.len());
        for g in self.gains.iter() {
            out.push(g.re);
            out.push(g.im);
        }
        for d in &self.directions {
            out.push(d.l);
            out.push(d.m);
        }
        out.extend_from_slice(&self.directional_gains);
        out.extend_from_slice(&self.noise);
        out
    }
}

/// Removes the common phase so that `gains[0]` is real and non-negative.
pub fn fix_gain_phase(gains: &mut CVec) {
    if let Some(first) = gains.iter().next().copied() {
        let norm = first.norm();
        if norm > 0.0 {
            let rot = first.conj() / norm;
            gains.iter_mut().for_each(|g| *g *= rot);
        }
    }
}

/// Per-wavelength covariance matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSet {
    pub matrices: Vec<CMat>,
    /// Number of snapshots behind each matrix; `None` for exact model covariances.
    pub samples: Option<usize>,
}

/// `A = exp(-j 2π/λ Ξ D) / √P`.
pub fn steering_matrix(positions: &[[f64; 2]], directions: &[Direction], wavelength: f64) -> Result<CMat> {
    if !(wavelength > 0.0) || !wavelength.is_finite() {
        return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
    }
    if positions.is_empty() {
        return Err(Error::EmptyInput("sensor positions"));
    }
    if directions.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("directions must be finite"));
    }
    let scale = 1.0 / (positions.len() as f64).sqrt();
    let k = 2.0 * PI / wavelength;
    Ok(CMat::from_fn(positions.len(), directions.len(), |p, q| {
        let [x, y] = positions[p];
        let d = directions[q];
        C64::from_polar(scale, -k * (x * d.l + y * d.m))
    }))
}

/// Column vector of effective source signatures `E = G A Σ^{1/2}`.
pub(crate) fn source_signatures(
    gains: &CVec,
    steering: &CMat,
    powers: &[f64],
) -> CMat {
    let mut e = steering.clone();
    for (q, mut col) in e.column_iter_mut().enumerate() {
        let s = powers[q].sqrt();
        for (p, v) in col.iter_mut().enumerate() {
            *v *= gains[p] * s;
        }
    }
    e
}

/// `R^K = A Σ M A^H`, the calibrator covariance without instrument gains or noise.
pub fn calibrator_model(
    geometry: &ArrayGeometry,
    directions: &[Direction],
    powers: &[f64],
    directional_gains: &[f64],
    wavelength: f64,
) -> Result<CMat> {
    Error::check_len("calibrator powers", directions.len(), powers.len())?;
    Error::check_len("directional gains", directions.len(), directional_gains.len())?;
    let a = geometry.steering(directions, wavelength)?;
    Ok(weighted_outer_sum(&a, |q| powers[q] * directional_gains[q]))
}

/// `Σ_q w_q a_q a_q^H` over the columns of `a`.
pub(crate) fn weighted_outer_sum(a: &CMat, weight: impl Fn(usize) -> f64) -> CMat {
    let p = a.nrows();
    let mut out = CMat::zeros(p, p);
    for (q, col) in a.column_iter().enumerate() {
        let w = weight(q);
        if w == 0.0 {
            continue;
        }
        for c in 0..p {
            let bc = col[c].conj() * w;
            out[(c, c)].re += col[c].norm_sqr() * w;
            for r in 0..c {
                out[(r, c)] += col[r] * bc;
            }
        }
    }
    for c in 0..p {
        for r in (c + 1)..p {
            out[(r, c)] = out[(c, r)].conj();
        }
    }
    out
}

/// Model covariance `E M E^H + Σ_n` for one wavelength.
pub fn model_covariance(
    params: &PerWavelengthParams,
    geometry: &ArrayGeometry,
    powers: &[f64],
    wavelength: f64,
) -> Result<CMat> {
    let p = geometry.num_sensors();
    params.check_dims(p, params.num_sources())?;
    Error::check_len("calibrator powers", params.num_sources(), powers.len())?;
    let a = geometry.steering(&params.directions, wavelength)?;
    let e = source_signatures(&params.gains, &a, powers);
    let mut r = weighted_outer_sum(&e, |q| params.directional_gains[q]);
    for (i, n) in params.noise.iter().enumerate() {
        r[(i, i)] += C64::new(*n, 0.0);
    }
    Ok(r)
}

fn complex_normal(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws `n` snapshots `x = G A Γ s + noise` (columns of the returned `P × n` matrix).
///
/// Weak background sources bypass the instrument gains and have unit directional gain.
pub fn simulate_snapshots(
    params: &PerWavelengthParams,
    geometry: &ArrayGeometry,
    powers: &[f64],
    weak: &[WeakSource],
    wavelength: f64,
    n: usize,
    seed: u64,
) -> Result<CMat> {
    if n == 0 {
        return Err(Error::invalid("snapshot count must be at least 1"));
    }
    let p = geometry.num_sensors();
    params.check_dims(p, params.num_sources())?;
    Error::check_len("calibrator powers", params.num_sources(), powers.len())?;

    let a = geometry.steering(&params.directions, wavelength)?;
    let amplitudes: Vec<f64> = powers
        .iter()
        .zip(&params.directional_gains)
        .map(|(s, m)| (s * m).sqrt())
        .collect();
    let weak_dirs: Vec<Direction> = weak.iter().map(|w| w.direction).collect();
    let a_weak = geometry.steering(&weak_dirs, wavelength)?;
    let weak_amp: Vec<f64> = weak.iter().map(|w| w.power.sqrt()).collect();
    let noise_amp: Vec<f64> = params.noise.iter().map(|s| s.sqrt()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = CMat::zeros(p, n);
    let mut sky = CVec::zeros(p);
    let mut background = CVec::zeros(p);
    for t in 0..n {
        sky.fill(C64::new(0.0, 0.0));
        background.fill(C64::new(0.0, 0.0));
        for (q, amp) in amplitudes.iter().enumerate() {
            let s = complex_normal(&mut rng) * *amp;
            sky += a.column(q) * s;
        }
        for (u, amp) in weak_amp.iter().enumerate() {
            let s = complex_normal(&mut rng) * *amp;
            background += a_weak.column(u) * s;
        }
        for r in 0..p {
            x[(r, t)] = params.gains[r] * sky[r] + background[r] + complex_normal(&mut rng) * noise_amp[r];
        }
    }
    Ok(x)
}

/// `(1/N) Σ x x^H` over the columns of `snapshots`.
pub fn sample_covariance(snapshots: &CMat) -> Result<CMat> {
    let n = snapshots.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("snapshots"));
    }
    let mut r = snapshots * snapshots.adjoint();
    r /= C64::new(n as f64, 0.0);
    // exact Hermitian symmetry
    let p = r.nrows();
    for i in 0..p {
        r[(i, i)].im = 0.0;
        for j in (i + 1)..p {
            let v = (r[(i, j)] + r[(j, i)].conj()) * 0.5;
            r[(i, j)] = v;
            r[(j, i)] = v.conj();
        }
    }
    Ok(r)
}

/// `Ω_pq = 1/√(σ_p σ_q)`.
pub fn weighting_matrix(noise: &[f64]) -> Result<DMatrix<f64>> {
    if noise.is_empty() {
        return Err(Error::EmptyInput("noise powers"));
    }
    if noise.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("noise powers must be positive to form weights"));
    }
    let inv: Vec<f64> = noise.iter().map(|s| 1.0 / s.sqrt()).collect();
    Ok(DMatrix::from_fn(noise.len(), noise.len(), |p, q| inv[p] * inv[q]))
}

/// `‖(R − R̂) ⊙ Ω‖²_F`.
pub fn local_cost(model: &CMat, sample: &CMat, weights: &DMatrix<f64>) -> Result<f64> {
    let p = model.nrows();
    for (what, m) in [("sample covariance", sample.nrows()), ("weights", weights.nrows())] {
        Error::check_len(what, p, m)?;
    }
    Error::check_len("model covariance columns", p, model.ncols())?;
    let mut acc = 0.0;
    for c in 0..p {
        for r in 0..p {
            acc += ((model[(r, c)] - sample[(r, c)]) * weights[(r, c)]).norm_sqr();
        }
    }
    Ok(acc)
}

/// Ratio of summed apparent source power to noise power, in dB.
pub fn snr_db(apparent_powers: &[f64], noise_power: f64) -> Result<f64> {
    let total: f64 = apparent_powers.iter().sum();
    if !(total > 0.0) || !(noise_power > 0.0) {
        return Err(Error::invalid("SNR needs positive source and noise powers"));
    }
    Ok(10.0 * (total / noise_power).log10())
}

/// Noise power giving the requested SNR for the given apparent source powers.
pub fn noise_for_snr(apparent_powers: &[f64], target_db: f64) -> Result<f64> {
    let total: f64 = apparent_powers.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total source power must be positive"));
    }
    if !target_db.is_finite() {
        return Err(Error::invalid("target SNR must be finite"));
    }
    Ok(total / 10f64.powf(target_db / 10.0))
}
