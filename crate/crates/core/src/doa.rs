//! Direction and directional-gain stage.
//!
//! For each non-reference source the residual left after removing every
//! other source is correlated against a whitened dictionary built on a
//! small grid around the current direction. The best grid point (hard
//! threshold with one survivor) becomes the new direction and the matched
//! amplitude becomes a per-wavelength directional-gain sample. The samples
//! are then fitted across agents through consensus on `α_m`.
//!
//! The reference source is never moved and its directional gain stays at 1;
//! it anchors the gain scale and the array phase centre.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{run_consensus, AdmmConfig, ConsensusOutcome, ConsensusState, IterationRecord, LocalProblem};
use crate::error::{Error, Result};
use crate::model::{ArrayGeometry, CMat, CVec, Direction, PerWavelengthParams, SkyModel, C64};
use crate::network::{PayloadKind, Topology, Transport, WavelengthPartition};

/// Local search grid settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Candidates per source; 1 or the square of an odd number.
    #[serde(rename = "N_q")]
    pub points: usize,
    /// Half-width of the grid at the first outer iteration.
    pub extent: f64,
    /// Spacing multiplier applied per outer iteration.
    pub refine_factor: f64,
    pub min_spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { points: 25, extent: 1.0 / 64.0, refine_factor: 0.5, min_spacing: 1.0 / 4096.0 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let side = self.side();
        if self.points == 0 || side * side != self.points || side.is_multiple_of(2) {
            return Err(Error::invalid(format!("N_q must be 1 or an odd square, got {}", self.points)));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::invalid("grid extent must be positive"));
        }
        if !(self.refine_factor > 0.0 && self.refine_factor <= 1.0) {
            return Err(Error::invalid("refine_factor must lie in (0, 1]"));
        }
        if !(self.min_spacing > 0.0) {
            return Err(Error::invalid("min_spacing must be positive"));
        }
        Ok(())
    }

    fn side(&self) -> usize {
        (self.points as f64).sqrt().round() as usize
    }

    /// Grid spacing at outer iteration `iteration` (0-based).
    pub fn spacing(&self, iteration: usize) -> f64 {
        let half = (self.side() / 2).max(1) as f64;
        let base = self.extent / half;
        (base * self.refine_factor.powi(iteration as i32)).max(self.min_spacing)
    }
}

/// Candidate directions, one block per source.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionGrid {
    pub blocks: Vec<Vec<Direction>>,
    pub spacing: f64,
}

impl DirectionGrid {
    pub fn total(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Index of the grid centre inside block `q`.
    pub fn center(&self, q: usize) -> usize {
        self.blocks[q].len() / 2
    }
}

/// Square grids centred on `current`; the reference block is the nominal point alone.
pub fn build_direction_grid(
    current: &[Direction],
    sky: &SkyModel,
    config: &GridConfig,
    iteration: usize,
) -> Result<DirectionGrid> {
    config.validate()?;
    if current.is_empty() {
        return Err(Error::EmptyInput("direction grid"));
    }
    Error::check_len("current directions", sky.num_sources(), current.len())?;
    let h = config.spacing(iteration);
    let half = (config.side() / 2) as i64;
    let blocks = current
        .iter()
        .enumerate()
        .map(|(q, d)| {
            if q == sky.reference() {
                return vec![sky.nominal()[q]];
            }
            let mut block = Vec::with_capacity(config.points);
            for i in -half..=half {
                for j in -half..=half {
                    block.push(Direction::new(d.l + i as f64 * h, d.m + j as f64 * h));
                }
            }
            block
        })
        .collect();
    Ok(DirectionGrid { blocks, spacing: h })
}

/// Keeps the `s` entries of largest magnitude and zeroes the rest. Ties go
/// to the lower index; zero entries never count as survivors.
pub fn hard_threshold(v: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::invalid("hard threshold needs s >= 1"));
    }
    let mut order: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()));
    let mut out = vec![0.0; v.len()];
    for &i in order.iter().take(s) {
        out[i] = v[i];
    }
    Ok(out)
}

/// `Ω ⊙ (R̂ − Σ_{q'≠q} contribution_{q'})` with the diagonal set to zero.
///
/// Dropping the diagonal also removes the noise term.
pub fn source_residual(
    sample: &CMat,
    params: &PerWavelengthParams,
    geometry: &ArrayGeometry,
    powers: &[f64],
    wavelength: f64,
    q: usize,
    weights: &DMatrix<f64>,
) -> Result<CMat> {
    let p = geometry.num_sensors();
    params.check_dims(p, powers.len())?;
    Error::check_len("sample covariance", p, sample.nrows())?;
    if q >= powers.len() {
        return Err(Error::invalid(format!("source {q} out of range")));
    }
    let a = geometry.steering(&params.directions, wavelength)?;
    let mut r = sample.clone();
    for (s, col) in a.column_iter().enumerate() {
        if s == q {
            continue;
        }
        let w = powers[s] * params.directional_gains[s];
        let e: Vec<C64> = (0..p).map(|i| params.gains[i] * col[i]).collect();
        for i in 0..p {
            for j in 0..p {
                r[(i, j)] -= e[i] * e[j].conj() * w;
            }
        }
    }
    for i in 0..p {
        for j in 0..p {
            r[(i, j)] = if i == j { C64::new(0.0, 0.0) } else { r[(i, j)] * weights[(i, j)] };
        }
    }
    Ok(r)
}

/// Whitened dictionary columns `x_k = (Σ^n)^{-1/2} G a(d_k) √σ_q` at one wavelength.
#[derive(Clone, Debug)]
pub struct WhitenedDictionary {
    pub columns: Vec<CVec>,
    /// `‖v̌_k‖²` of the off-diagonal Kronecker column.
    pub norm_sq: Vec<f64>,
}

impl WhitenedDictionary {
    pub fn new(
        geometry: &ArrayGeometry,
        gains: &CVec,
        noise: &[f64],
        power: f64,
        candidates: &[Direction],
        wavelength: f64,
    ) -> Result<Self> {
        let p = geometry.num_sensors();
        Error::check_len("gains", p, gains.len())?;
        Error::check_len("noise powers", p, noise.len())?;
        if noise.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("noise powers must be positive to whiten"));
        }
        let a = geometry.steering(candidates, wavelength)?;
        let amp = power.sqrt();
        let columns: Vec<CVec> = a
            .column_iter()
            .map(|col| CVec::from_fn(p, |i, _| gains[i] * col[i] * (amp / noise[i].sqrt())))
            .collect();
        let norm_sq = columns
            .iter()
            .map(|x| {
                let s2: f64 = x.iter().map(|v| v.norm_sqr()).sum();
                let s4: f64 = x.iter().map(|v| v.norm_sqr().powi(2)).sum();
                s2 * s2 - s4
            })
            .collect();
        Ok(Self { columns, norm_sq })
    }

    /// `v̌_k^H ř = x_k^H Ř x_k` for a residual with zero diagonal.
    pub fn correlate(&self, residual: &CMat) -> Vec<f64> {
        self.columns.iter().map(|x| (x.adjoint() * residual * x)[(0, 0)].re).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    /// `m̌_{q,λ}` per wavelength, in the order of the inputs.
    pub gains: Vec<f64>,
    /// All correlations vanished; `index` is the fallback.
    pub degenerate: bool,
}

/// Picks the grid point with the largest λ-summed squared correlation and
/// reads off a non-negative amplitude per wavelength.
pub fn correlate_and_select(
    residuals: &[CMat],
    dictionaries: &[WhitenedDictionary],
    fallback: usize,
) -> Result<Selection> {
    Error::check_len("dictionaries", residuals.len(), dictionaries.len())?;
    let Some(first) = dictionaries.first() else {
        return Err(Error::EmptyInput("wavelengths for selection"));
    };
    let n = first.columns.len();
    if n == 0 || fallback >= n {
        return Err(Error::invalid("fallback index outside the grid block"));
    }
    let correlations: Vec<Vec<f64>> = residuals
        .iter()
        .zip(dictionaries)
        .map(|(r, d)| {
            Error::check_len("dictionary columns", n, d.columns.len())?;
            Ok(d.correlate(r))
        })
        .collect::<Result<_>>()?;
    let score: Vec<f64> = (0..n).map(|k| correlations.iter().map(|c| c[k] * c[k]).sum()).collect();
    let kept = hard_threshold(&score, 1)?;
    let (index, degenerate) = match kept.iter().position(|v| *v != 0.0) {
        Some(i) => (i, false),
        None => (fallback, true),
    };
    let gains = correlations
        .iter()
        .zip(dictionaries)
        .map(|(c, d)| if d.norm_sq[index] > 0.0 { (c[index] / d.norm_sq[index]).max(0.0) } else { 0.0 })
        .collect();
    Ok(Selection { index, gains, degenerate })
}

/// Minimiser of `‖m̌ − Bα‖² + (ρ/2) Σ_i ‖α − c_i‖²` where `anchor_sum = Σ_i c_i`.
fn directional_prox(
    check_m: &DVector<f64>,
    basis: &DMatrix<f64>,
    anchor_sum: &DVector<f64>,
    anchors: usize,
    rho: f64,
) -> Result<DVector<f64>> {
    Error::check_len("directional samples", basis.nrows(), check_m.len())?;
    let k = basis.ncols();
    let mut a = basis.transpose() * basis * 2.0;
    for i in 0..k {
        a[(i, i)] += rho * anchors as f64;
    }
    let b = basis.transpose() * check_m * 2.0 + anchor_sum * rho;
    crate::admm::solve_positive_definite(a, &b, rho * anchors as f64)
        .ok_or_else(|| Error::IllPosed("directional normal matrix is singular".into()))
}

/// `(2BᵀB + ρN I)^{-1} (2Bᵀm̌ + ρ Σ_y (β^{z,y} − u^{z,y}))`.
pub fn alpha_m_update(
    check_m: &DVector<f64>,
    basis: &DMatrix<f64>,
    betas: &[DVector<f64>],
    duals: &[DVector<f64>],
    rho: f64,
) -> Result<DVector<f64>> {
    Error::check_len("neighbour duals", betas.len(), duals.len())?;
    if !betas.is_empty() && !(rho > 0.0) {
        return Err(Error::invalid("rho must be positive"));
    }
    let mut anchor = DVector::zeros(basis.ncols());
    for (b, u) in betas.iter().zip(duals) {
        anchor += b - u;
    }
    directional_prox(check_m, basis, &anchor, betas.len(), rho)
}

/// `max(diag(R̂ − Ẽ M̃ Ẽ^H), floor · mean diag R̂)`.
pub fn estimate_noise(
    sample: &CMat,
    params: &PerWavelengthParams,
    geometry: &ArrayGeometry,
    powers: &[f64],
    wavelength: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    let p = geometry.num_sensors();
    Error::check_len("sample covariance", p, sample.nrows())?;
    Error::check_len("gains", p, params.gains.len())?;
    Error::check_len("directions", powers.len(), params.directions.len())?;
    Error::check_len("directional gains", powers.len(), params.directional_gains.len())?;
    let a = geometry.steering(&params.directions, wavelength)?;
    let mean_diag = (0..p).map(|i| sample[(i, i)].re).sum::<f64>() / p as f64;
    let floor = floor * mean_diag.abs().max(f64::MIN_POSITIVE);
    Ok((0..p)
        .map(|i| {
            let g2 = params.gains[i].norm_sqr();
            let sky: f64 = (0..powers.len())
                .map(|q| g2 * a[(i, q)].norm_sqr() * powers[q] * params.directional_gains[q])
                .sum();
            (sample[(i, i)].re - sky).max(floor)
        })
        .collect())
}

/// Consensus on the directional coefficients of one source.
pub struct DirectionalProblem<'a> {
    /// `B_m^z` for each agent (rows follow the agent's wavelengths).
    pub bases: &'a [DMatrix<f64>],
    pub targets: Vec<DVector<f64>>,
}

impl LocalProblem for DirectionalProblem<'_> {
    fn solve(&mut self, agent: usize, _current: &CVec, anchor_sum: &CVec, anchors: usize, rho: f64) -> Result<CVec> {
        let anchor = anchor_sum.map(|v| v.re);
        let alpha = directional_prox(&self.targets[agent], &self.bases[agent], &anchor, anchors, rho)?;
        Ok(alpha.map(|v| C64::new(v, 0.0)))
    }
}

/// Everything the stage reads but does not modify.
pub struct DoaStageInput<'a> {
    pub geometry: &'a ArrayGeometry,
    pub sky: &'a SkyModel,
    pub wavelengths: &'a [f64],
    pub samples: &'a [CMat],
    pub partition: &'a WavelengthPartition,
    pub topology: &'a Topology,
    /// `B_m^z` per agent.
    pub bases: &'a [DMatrix<f64>],
    /// `b_m(λ)` per wavelength.
    pub basis_rows: &'a [DVector<f64>],
    pub grid: &'a GridConfig,
    pub outer_iteration: usize,
    pub admm: &'a AdmmConfig,
    pub max_sweeps: usize,
    /// Stop once the summed direction change is below this.
    pub direction_tolerance: f64,
    /// Lower bound on noise estimates relative to the mean diagonal of `R̂`.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DoaStageReport {
    pub sweeps: usize,
    /// `(source, agent)` pairs whose correlations all vanished.
    pub degenerate: Vec<(usize, usize)>,
    pub consensus: Vec<ConsensusOutcome>,
    pub converged: bool,
}

/// Sequential per-source update of directions and directional gains, then a
/// noise refresh, repeated until neither `α_m` nor the directions move.
///
/// `params[j].gains` must already hold the gains each agent projected from
/// its own copy of `α`. `states[q]` holds the `α_m` consensus for source `q`
/// and is ignored for the reference source.
pub fn run_doa_stage(
    input: &DoaStageInput<'_>,
    params: &mut [PerWavelengthParams],
    states: &mut [ConsensusState],
    transport: &mut dyn Transport,
    round: &mut u32,
    hook: &mut dyn FnMut(usize, &IterationRecord),
) -> Result<DoaStageReport> {
    let sky = input.sky;
    let f = input.wavelengths.len();
    Error::check_len("parameter sets", f, params.len())?;
    Error::check_len("sample covariances", f, input.samples.len())?;
    Error::check_len("directional consensus states", sky.num_sources(), states.len())?;
    let z_count = input.partition.num_agents();
    let mut report = DoaStageReport::default();

    for sweep in 1..=input.max_sweeps.max(1) {
        report.sweeps = sweep;
        let before_alpha: Vec<CVec> = states.iter().map(|s| s.mean_alpha()).collect();
        let before_dirs: Vec<Vec<Direction>> = params.iter().map(|p| p.directions.clone()).collect();

        for q in (0..sky.num_sources()).filter(|&q| q != sky.reference()) {
            let mut targets = Vec::with_capacity(z_count);
            let mut picks = Vec::with_capacity(z_count);
            for z in 0..z_count {
                let block = input.partition.block(z);
                let centre = &params[block[0]].directions;
                let grid = build_direction_grid(centre, sky, input.grid, input.outer_iteration)?;
                let mut residuals = Vec::with_capacity(block.len());
                let mut dicts = Vec::with_capacity(block.len());
                for &j in block {
                    let lambda = input.wavelengths[j];
                    let weights = crate::model::weighting_matrix(&params[j].noise)?;
                    residuals.push(source_residual(
                        &input.samples[j],
                        &params[j],
                        input.geometry,
                        sky.powers(j),
                        lambda,
                        q,
                        &weights,
                    )?);
                    dicts.push(WhitenedDictionary::new(
                        input.geometry,
                        &params[j].gains,
                        &params[j].noise,
                        sky.powers(j)[q],
                        &grid.blocks[q],
                        lambda,
                    )?);
                }
                let sel = correlate_and_select(&residuals, &dicts, grid.center(q))?;
                if sel.degenerate {
                    report.degenerate.push((q, z));
                }
                targets.push(DVector::from_vec(sel.gains));
                picks.push(grid.blocks[q][sel.index]);
            }

            let mut problem = DirectionalProblem { bases: input.bases, targets };
            let outcome = run_consensus(
                &mut problem,
                &mut states[q],
                input.topology,
                transport,
                round,
                PayloadKind::GammaDirectional,
                input.admm,
                &mut |r| hook(q, r),
            )?;
            report.consensus.push(outcome);

            for (z, pick) in picks.iter().enumerate() {
                let alpha = states[q].agents[z].alpha.map(|v| v.re);
                for &j in input.partition.block(z) {
                    params[j].directions[q] = *pick;
                    params[j].directional_gains[q] = input.basis_rows[j].dot(&alpha);
                }
            }
        }

        for (j, p) in params.iter_mut().enumerate() {
            p.noise = estimate_noise(&input.samples[j], p, input.geometry, sky.powers(j), input.wavelengths[j], input.noise_floor)?;
        }

        let alpha_change: f64 = states
            .iter()
            .zip(&before_alpha)
            .map(|(s, b)| (s.mean_alpha() - b).norm())
            .sum();
        let alpha_norm: f64 = states.iter().map(|s| s.mean_alpha().norm()).sum();
        let dir_change: f64 = params
            .iter()
            .zip(&before_dirs)
            .map(|(p, b)| p.directions.iter().zip(b).map(|(x, y)| x.distance(y).powi(2)).sum::<f64>().sqrt())
            .sum();
        if alpha_change <= input.admm.tolerance * alpha_norm && dir_change <= input.direction_tolerance {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}
