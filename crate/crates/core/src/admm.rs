//! Scaled consensus ADMM over the gain coefficients.
//!
//! Every agent keeps a local copy `α^z` of the shared coefficients. With a
//! fusion center the copies are pulled towards their average; without one,
//! each agent exchanges messages `γ^{z,y} = α^z + u^{z,y}` with its
//! neighbours and the edge variables `β^{z,y}` are the symmetric averages of
//! the two messages crossing an edge.
//!
//! The gain cost is bilinear in `α`. The local step treats the conjugate
//! copy as fixed and solves one sensor at a time, refreshing the conjugate
//! after every sensor, until the sweep stops moving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CMat, CVec, C64};
use crate::network::{Envelope, PayloadKind, Topology, Transport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub adapt_rho: bool,
    /// Residual-balancing ratio.
    pub mu: f64,
    pub tau_incr: f64,
    pub tau_decr: f64,
    pub max_iterations: usize,
    /// Consensus tolerance relative to `‖α‖`.
    pub tolerance: f64,
    /// Relative change that ends the per-sensor sweeps.
    pub local_tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            adapt_rho: false,
            mu: 10.0,
            tau_incr: 2.0,
            tau_decr: 2.0,
            max_iterations: 500,
            tolerance: 1e-4,
            local_tolerance: 1e-4,
            max_sweeps: 20,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        if !(self.mu > 1.0 && self.tau_incr > 1.0 && self.tau_decr > 1.0) {
            return Err(Error::invalid("mu and tau must exceed 1"));
        }
        if !(self.tolerance > 0.0 && self.local_tolerance > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_iterations == 0 || self.max_sweeps == 0 {
            return Err(Error::invalid("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsensusMode {
    Decentralized,
    Fusion,
}

/// One agent's share of the ADMM state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub alpha: CVec,
    /// `β^{z,y}` in neighbour order (decentralized mode only).
    pub beta: Vec<CVec>,
    /// Scaled duals: one per neighbour, or a single one in fusion mode.
    pub dual: Vec<CVec>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusState {
    pub mode: ConsensusMode,
    pub agents: Vec<AgentState>,
    /// Fusion-center average; unused in decentralized mode.
    pub average: CVec,
}

impl ConsensusState {
    /// Every copy, edge variable and average starts at `initial`; duals start at zero.
    pub fn new(mode: ConsensusMode, topology: &Topology, initial: &CVec, rho: f64) -> Self {
        let zero = CVec::zeros(initial.len());
        let agents = (0..topology.num_agents())
            .map(|z| match mode {
                ConsensusMode::Decentralized => AgentState {
                    alpha: initial.clone(),
                    beta: vec![initial.clone(); topology.degree(z)],
                    dual: vec![zero.clone(); topology.degree(z)],
                    rho,
                },
                ConsensusMode::Fusion => AgentState {
                    alpha: initial.clone(),
                    beta: Vec::new(),
                    dual: vec![zero.clone()],
                    rho,
                },
            })
            .collect();
        Self { mode, agents, average: initial.clone() }
    }

    pub fn dim(&self) -> usize {
        self.average.len()
    }

    pub fn alphas(&self) -> Vec<&CVec> {
        self.agents.iter().map(|a| &a.alpha).collect()
    }

    pub fn mean_alpha(&self) -> CVec {
        let mut acc = CVec::zeros(self.dim());
        for a in &self.agents {
            acc += &a.alpha;
        }
        acc / C64::new(self.agents.len() as f64, 0.0)
    }
}

/// One ADMM iteration's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub primal: f64,
    pub spread: f64,
    /// Normalised movement of the local copies since the previous iteration.
    pub change: f64,
    pub rho: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub iterations: usize,
    pub converged: bool,
}

/// The agent-local minimisation inside one ADMM iteration:
/// `argmin_α cost_z(α) + (ρ/2) Σ_i ‖α − c_i‖²` with `anchor_sum = Σ_i c_i`
/// over `anchors` terms.
pub trait LocalProblem {
    fn solve(&mut self, agent: usize, current: &CVec, anchor_sum: &CVec, anchors: usize, rho: f64) -> Result<CVec>;
}

/// `p`-th row of `m` with its `p`-th entry removed. Indices are 0-based.
pub fn select_off_row(m: &CMat, p: usize) -> Result<CVec> {
    if p >= m.nrows() {
        return Err(Error::invalid(format!("row {p} out of range for {} rows", m.nrows())));
    }
    Ok(CVec::from_iterator(
        m.ncols().saturating_sub(1),
        (0..m.ncols()).filter(|&q| q != p).map(|q| m[(p, q)]),
    ))
}

/// Weighted data for one wavelength held by an agent.
#[derive(Clone, Debug)]
pub struct GainChannel {
    pub basis: DVector<f64>,
    /// `Ω ⊙ R̂`
    pub weighted_sample: CMat,
    /// `Ω ⊙ R^K`
    pub weighted_model: CMat,
}

impl GainChannel {
    pub fn new(sample: &CMat, calibrator: &CMat, weights: &DMatrix<f64>, basis: DVector<f64>) -> Result<Self> {
        let p = sample.nrows();
        for (what, n) in [
            ("sample columns", sample.ncols()),
            ("calibrator rows", calibrator.nrows()),
            ("calibrator columns", calibrator.ncols()),
            ("weight rows", weights.nrows()),
            ("weight columns", weights.ncols()),
        ] {
            Error::check_len(what, p, n)?;
        }
        let w = weights.map(|v| C64::new(v, 0.0));
        Ok(Self {
            basis,
            weighted_sample: sample.component_mul(&w),
            weighted_model: calibrator.component_mul(&w),
        })
    }
}

/// All wavelengths held by one agent.
#[derive(Clone, Debug)]
pub struct GainAgentData {
    pub channels: Vec<GainChannel>,
}

impl GainAgentData {
    pub fn sensors(&self) -> usize {
        self.channels.first().map_or(0, |c| c.weighted_sample.nrows())
    }

    pub fn order(&self) -> usize {
        self.channels.first().map_or(0, |c| c.basis.len())
    }

    fn gains(&self, channel: &GainChannel, alpha: &CVec) -> Vec<C64> {
        let k = channel.basis.len();
        (0..self.sensors())
            .map(|p| (0..k).map(|i| alpha[p * k + i] * channel.basis[i]).sum())
            .collect()
    }

    /// `Σ_p ‖r̂_p − Z̃_p α_p‖²` with the conjugate taken at `alpha` itself.
    pub fn off_diagonal_cost(&self, alpha: &CVec) -> f64 {
        let mut acc = 0.0;
        for ch in &self.channels {
            let g = self.gains(ch, alpha);
            let n = g.len();
            for p in 0..n {
                for q in (0..n).filter(|&q| q != p) {
                    let model = g[p] * ch.weighted_model[(p, q)] * g[q].conj();
                    acc += (ch.weighted_sample[(p, q)] - model).norm_sqr();
                }
            }
        }
        acc
    }

    /// `(Z̃^H Z̃, Z̃^H r̂)` for one sensor without materialising `Z̃`.
    fn normal_equations(&self, alpha: &CVec, sensor: usize) -> (CMat, CVec) {
        let k = self.order();
        let mut gram = CMat::zeros(k, k);
        let mut rhs = CVec::zeros(k);
        for ch in &self.channels {
            let g = self.gains(ch, alpha);
            let mut energy = 0.0;
            let mut corr = C64::new(0.0, 0.0);
            for (q, gq) in g.iter().enumerate() {
                if q == sensor {
                    continue;
                }
                let z = ch.weighted_model[(sensor, q)] * gq.conj();
                energy += z.norm_sqr();
                corr += z.conj() * ch.weighted_sample[(sensor, q)];
            }
            for i in 0..k {
                rhs[i] += corr * ch.basis[i];
                for j in 0..k {
                    gram[(i, j)] += C64::new(energy * ch.basis[i] * ch.basis[j], 0.0);
                }
            }
        }
        (gram, rhs)
    }
}

/// Stacked data vector `r̂^z_p` and design matrix `Z̃^z_p = Z^z_p B^z` for one sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLinearization {
    pub data: CVec,
    pub design: CMat,
}

impl LocalLinearization {
    /// Builds the system for `sensor` with the conjugate gains frozen at `alpha`.
    pub fn build(agent: &GainAgentData, alpha: &CVec, sensor: usize) -> Result<Self> {
        let p_count = agent.sensors();
        let k = agent.order();
        Error::check_len("local consensus vector", p_count * k, alpha.len())?;
        if sensor >= p_count {
            return Err(Error::invalid(format!("sensor {sensor} out of range")));
        }
        let rows = (p_count - 1) * agent.channels.len();
        let mut data = CVec::zeros(rows);
        let mut design = CMat::zeros(rows, k);
        for (j, ch) in agent.channels.iter().enumerate() {
            let g = agent.gains(ch, alpha);
            let conj_g = CVec::from_iterator(p_count, g.iter().map(|v| v.conj()));
            let sample_row = select_off_row(&ch.weighted_sample, sensor)?;
            let model_row = select_off_row(&ch.weighted_model, sensor)?;
            let conj_row = CVec::from_iterator(p_count - 1, (0..p_count).filter(|&q| q != sensor).map(|q| conj_g[q]));
            for i in 0..p_count - 1 {
                let r = j * (p_count - 1) + i;
                data[r] = sample_row[i];
                let z = model_row[i] * conj_row[i];
                for c in 0..k {
                    design[(r, c)] = z * ch.basis[c];
                }
            }
        }
        Ok(Self { data, design })
    }

    /// `‖r̂ − Z̃ α_p‖²`.
    pub fn cost(&self, alpha_p: &CVec) -> f64 {
        (&self.data - &self.design * alpha_p).norm_squared()
    }
}

/// Solves `(2G + ρ n I) x = 2h + ρ s` by Hermitian factorisation.
pub(crate) fn prox_solve(gram: &CMat, rhs: &CVec, anchor_sum: &CVec, anchors: usize, rho: f64) -> Result<CVec> {
    let k = gram.nrows();
    let shift = rho * anchors as f64;
    let mut a = gram * C64::new(2.0, 0.0);
    for i in 0..k {
        a[(i, i)] += C64::new(shift, 0.0);
    }
    let b = rhs * C64::new(2.0, 0.0) + anchor_sum * C64::new(rho, 0.0);
    solve_positive_definite(a, &b, shift).ok_or_else(|| Error::IllPosed(format!("local normal matrix is singular (rho·N = {shift})")))
}

/// Same step as [`prox_solve`] but restricted to real coefficients. A
/// per-wavelength common phase is invisible to the data, so the reference
/// sensor carries a real gain at every wavelength by convention. Without it
/// the consensus is free to wander along those phase directions.
pub(crate) fn prox_solve_real(gram: &CMat, rhs: &CVec, anchor_sum: &CVec, anchors: usize, rho: f64) -> Result<CVec> {
    let k = gram.nrows();
    let shift = rho * anchors as f64;
    let mut a = gram.map(|v| 2.0 * v.re);
    for i in 0..k {
        a[(i, i)] += shift;
    }
    let b = rhs.map(|v| 2.0 * v.re) + anchor_sum.map(|v| rho * v.re);
    let x = solve_positive_definite(a, &b, shift)
        .ok_or_else(|| Error::IllPosed(format!("local normal matrix is singular (rho·N = {shift})")))?;
    Ok(x.map(|v| C64::new(v, 0.0)))
}

/// Cholesky solve that also rejects numerically singular matrices, which
/// the factorisation alone lets through with a tiny pivot. `shift` is a
/// ridge already added to the diagonal; a positive one bounds every pivot
/// from below, so only an outright factorisation failure is rejected.
pub(crate) fn solve_positive_definite<T: nalgebra::ComplexField<RealField = f64>>(
    a: DMatrix<T>,
    b: &DVector<T>,
    shift: f64,
) -> Option<DVector<T>> {
    let largest = (0..a.nrows()).map(|i| a[(i, i)].clone().real()).fold(0.0, f64::max);
    let chol = a.cholesky()?;
    let l = chol.l_dirty();
    let smallest = (0..l.nrows()).map(|i| l[(i, i)].clone().real().powi(2)).fold(f64::INFINITY, f64::min);
    if !(smallest > 1e-13 * largest || (shift > 0.0 && smallest >= 0.5 * shift)) {
        return None;
    }
    Some(chol.solve(b))
}

/// Closed-form local step with a fusion center: prior `α_p − u^z_p`.
pub fn local_alpha_update_fusion(lin: &LocalLinearization, alpha_p: &CVec, dual_p: &CVec, rho: f64) -> Result<CVec> {
    if !(rho > 0.0) {
        return Err(Error::IllPosed("rho must be positive".into()));
    }
    let gram = lin.design.adjoint() * &lin.design;
    let rhs = lin.design.adjoint() * &lin.data;
    prox_solve(&gram, &rhs, &(alpha_p - dual_p), 1, rho)
}

/// Closed-form decentralized local step: one prior `β^{z,y}_p − u^{z,y}_p` per neighbour.
///
/// With no neighbours this is the plain least-squares solution.
pub fn local_alpha_update_decentralized(
    lin: &LocalLinearization,
    betas: &[CVec],
    duals: &[CVec],
    rho: f64,
) -> Result<CVec> {
    Error::check_len("neighbour duals", betas.len(), duals.len())?;
    let k = lin.design.ncols();
    let mut anchor = CVec::zeros(k);
    for (b, u) in betas.iter().zip(duals) {
        anchor += b - u;
    }
    let gram = lin.design.adjoint() * &lin.design;
    let rhs = lin.design.adjoint() * &lin.data;
    prox_solve(&gram, &rhs, &anchor, betas.len(), rho)
}

/// `γ^{z,y} = α^z + u^{z,y}` for each neighbour.
pub fn gamma_messages(alpha: &CVec, duals: &[CVec]) -> Vec<CVec> {
    duals.iter().map(|u| alpha + u).collect()
}

/// `β^{z,y} = (γ^{y,z} + γ^{z,y}) / 2`; symmetric bit for bit.
pub fn beta_update(own: &CVec, received: &CVec) -> CVec {
    (own + received) * C64::new(0.5, 0.0)
}

/// `u^{z,y} += α^z − β^{z,y}`.
pub fn dual_update(duals: &mut [CVec], alpha: &CVec, betas: &[CVec]) {
    for (u, b) in duals.iter_mut().zip(betas) {
        *u += alpha - b;
    }
}

/// Residual balancing: grow `ρ` when the primal residual dominates, shrink
/// it when the dual residual does.
pub fn adapt_rho(primal: f64, dual: f64, rho: f64, config: &AdmmConfig) -> f64 {
    if primal > config.mu * dual {
        rho * config.tau_incr
    } else if dual > config.mu * primal {
        rho / config.tau_decr
    } else {
        rho
    }
}

/// `ε_p`: summed constraint violation, normalised by `√(dim · Σ_z N_z)`
/// (decentralized) or `√(dim · Z)` (fusion).
pub fn primal_residual(state: &ConsensusState) -> f64 {
    let dim = state.dim() as f64;
    match state.mode {
        ConsensusMode::Decentralized => {
            let edges: usize = state.agents.iter().map(|a| a.beta.len()).sum();
            if edges == 0 {
                return 0.0;
            }
            let total: f64 = state
                .agents
                .iter()
                .map(|a| a.beta.iter().map(|b| (&a.alpha - b).norm_squared()).sum::<f64>().sqrt())
                .sum();
            total / (dim * edges as f64).sqrt()
        }
        ConsensusMode::Fusion => {
            let total: f64 = state.agents.iter().map(|a| (&a.alpha - &state.average).norm()).sum();
            total / (dim * state.agents.len() as f64).sqrt()
        }
    }
}

/// `ε_DIFF`: sum over ordered pairs `z ≠ z'` of `‖α^z − α^{z'}‖`, normalised by `√(dim · Z(Z−1))`.
pub fn estimate_spread(alphas: &[&CVec]) -> f64 {
    let z = alphas.len();
    if z < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..z {
        for b in 0..z {
            if a != b {
                total += (alphas[a] - alphas[b]).norm();
            }
        }
    }
    total / ((alphas[0].len() * z * (z - 1)) as f64).sqrt()
}

/// Runs ADMM iterations until the primal residual and the movement of the
/// local copies (the dual residual up to a factor `ρ`) both drop below
/// `tolerance · ‖ᾱ‖`, or the iteration cap is hit. The primal residual alone
/// is small as soon as the agents agree, even when they agree on a point
/// that is still moving.
///
/// `round` numbers the message rounds and is advanced once per exchange.
#[allow(clippy::too_many_arguments)]
pub fn run_consensus(
    problem: &mut dyn LocalProblem,
    state: &mut ConsensusState,
    topology: &Topology,
    transport: &mut dyn Transport,
    round: &mut u32,
    kind: PayloadKind,
    config: &AdmmConfig,
    hook: &mut dyn FnMut(&IterationRecord),
) -> Result<ConsensusOutcome> {
    Error::check_len("agents in topology", state.agents.len(), topology.num_agents())?;
    let z_count = state.agents.len();
    let dim = state.dim();
    for t in 1..=config.max_iterations {
        let previous: Vec<CVec> = state.agents.iter().map(|a| a.alpha.clone()).collect();
        match state.mode {
            ConsensusMode::Decentralized => {
                for (z, agent) in state.agents.iter_mut().enumerate() {
                    let mut anchor = CVec::zeros(dim);
                    for (b, u) in agent.beta.iter().zip(&agent.dual) {
                        anchor += b - u;
                    }
                    agent.alpha = problem.solve(z, &agent.alpha, &anchor, agent.beta.len(), agent.rho)?;
                }
                let gammas: Vec<Vec<CVec>> = state
                    .agents
                    .iter()
                    .map(|a| gamma_messages(&a.alpha, &a.dual))
                    .collect();
                if topology.num_edges() > 0 {
                    let mut outgoing = Vec::new();
                    for (z, msgs) in gammas.iter().enumerate() {
                        for (msg, &y) in msgs.iter().zip(topology.neighbors(z)) {
                            outgoing.push(Envelope {
                                round: *round,
                                from: z as u16,
                                to: y as u16,
                                kind,
                                payload: msg.as_slice().to_vec(),
                            });
                        }
                    }
                    let inbox = transport.exchange(topology, *round, kind, outgoing)?;
                    *round = round.wrapping_add(1);
                    for (z, agent) in state.agents.iter_mut().enumerate() {
                        for (i, env) in inbox[z].iter().enumerate() {
                            let received = CVec::from_column_slice(&env.payload);
                            agent.beta[i] = beta_update(&gammas[z][i], &received);
                        }
                        let AgentState { alpha, beta, dual, .. } = agent;
                        dual_update(dual, alpha, beta);
                    }
                }
            }
            ConsensusMode::Fusion => {
                for (z, agent) in state.agents.iter_mut().enumerate() {
                    let anchor = &state.average - &agent.dual[0];
                    agent.alpha = problem.solve(z, &agent.alpha, &anchor, 1, agent.rho)?;
                }
                let mut avg = CVec::zeros(dim);
                for a in &state.agents {
                    avg += &a.alpha + &a.dual[0];
                }
                state.average = avg / C64::new(z_count as f64, 0.0);
                for agent in &mut state.agents {
                    agent.dual[0] += &agent.alpha - &state.average;
                }
            }
        }

        let primal = primal_residual(state);
        let alphas = state.alphas();
        let spread = estimate_spread(&alphas);
        let change = state
            .agents
            .iter()
            .zip(&previous)
            .map(|(a, p)| (&a.alpha - p).norm())
            .sum::<f64>()
            / ((dim * z_count) as f64).sqrt();
        hook(&IterationRecord {
            iteration: t,
            primal,
            spread,
            change,
            rho: state.agents.iter().map(|a| a.rho).collect(),
        });

        let scale = config.tolerance * state.mean_alpha().norm();
        if primal <= scale && change <= scale {
            return Ok(ConsensusOutcome { iterations: t, converged: true });
        }
        if config.adapt_rho {
            for agent in &mut state.agents {
                let new_rho = adapt_rho(primal, agent.rho * change, agent.rho, config);
                if new_rho != agent.rho {
                    let ratio = C64::new(agent.rho / new_rho, 0.0);
                    agent.dual.iter_mut().for_each(|u| *u *= ratio);
                    agent.rho = new_rho;
                }
            }
        }
    }
    Ok(ConsensusOutcome { iterations: config.max_iterations, converged: false })
}

/// Gain-stage local problem: per-sensor sweeps with the conjugate refreshed
/// after every sensor.
pub struct GainProblem<'a> {
    pub agents: &'a [GainAgentData],
    pub local_tolerance: f64,
    pub max_sweeps: usize,
    /// Sweeps used by each agent in its latest solve.
    pub sweeps: Vec<usize>,
}

impl<'a> GainProblem<'a> {
    pub fn new(agents: &'a [GainAgentData], config: &AdmmConfig) -> Self {
        Self {
            agents,
            local_tolerance: config.local_tolerance,
            max_sweeps: config.max_sweeps,
            sweeps: vec![0; agents.len()],
        }
    }
}

impl LocalProblem for GainProblem<'_> {
    fn solve(&mut self, agent: usize, current: &CVec, anchor_sum: &CVec, anchors: usize, rho: f64) -> Result<CVec> {
        let data = &self.agents[agent];
        let k = data.order();
        let p_count = data.sensors();
        Error::check_len("local consensus vector", p_count * k, current.len())?;
        let mut alpha = current.clone();
        for sweep in 1..=self.max_sweeps {
            let before = alpha.clone();
            for p in 0..p_count {
                let (gram, rhs) = data.normal_equations(&alpha, p);
                let anchor = anchor_sum.rows(p * k, k).into_owned();
                let block = if p == 0 {
                    prox_solve_real(&gram, &rhs, &anchor, anchors, rho)?
                } else {
                    prox_solve(&gram, &rhs, &anchor, anchors, rho)?
                };
                alpha.rows_mut(p * k, k).copy_from(&block);
            }
            self.sweeps[agent] = sweep;
            if (&alpha - &before).norm() <= self.local_tolerance * alpha.norm() {
                break;
            }
        }
        Ok(alpha)
    }
}
