//! Semi-implicit time stepping of the coupled phase / bulk-stress / flow /
//! conformation system.
//!
//! One step runs four blocks in sequence, each lagging the blocks after it:
//!
//! 1. phase: convex-concave Cahn-Hilliard with lagged mobility, solved for
//!    the chemical potential; the new phase field is then recovered by an
//!    explicit conservative update so mass is exact regardless of the
//!    Krylov tolerance,
//! 2. bulk stress: implicit relaxation and `A`-weighted diffusion,
//! 3. velocity: implicit viscous step followed by an exact FFT projection,
//! 4. conformation: explicit stretching, semi-implicit Peterlin relaxation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    self, Boundary, FaceField, Grid, Parity, ScalarField, SymTensorField, VectorField,
};
use crate::physics::{
    eval_coupling_a, eval_mobility, eval_potential, CoefficientSet, PhysicsError,
};

// ---------------------------------------------------------------------------
// Errors and configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Phase,
    Bulk,
    Viscous,
    Pressure,
    Conformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrylovFailure {
    MaxIterations,
    /// A search direction with non-positive curvature; the operator is not SPD.
    Indefinite,
    Breakdown,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{method:?} failed ({reason:?}) after {iterations} iterations, last relative residual {:e}", residual_history.last().copied().unwrap_or(f64::NAN))]
pub struct KrylovError {
    pub method: KrylovMethod,
    pub reason: KrylovFailure,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("{block:?} block: {source}")]
    Krylov {
        block: Block,
        #[source]
        source: KrylovError,
    },
    #[error("projection left |div u| = {divergence:e} above tolerance {tolerance:e}")]
    Projection { divergence: f64, tolerance: f64 },
    #[error("{block:?} block produced non-finite values")]
    NonFinite { block: Block },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("step failed after {halvings} time-step halvings: {last}")]
    RetriesExhausted { halvings: u32, last: Box<SolverError> },
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrylovMethod {
    Cg,
    Bicgstab,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovConfig {
    /// Used for the symmetric blocks; the phase block is never symmetric
    /// and always uses BiCGSTAB.
    pub method: KrylovMethod,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convection {
    Upwind,
    SemiLagrangian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    ConvexConcave,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub dt: f64,
    pub convection: Convection,
    pub splitting: Splitting,
    pub krylov: KrylovConfig,
    /// Absolute bound on the discrete L2 norm of `div u` after projection.
    pub projection_tol: f64,
    /// Regularization cutoff forwarded to the mobility and potential.
    pub delta: f64,
    #[serde(default = "default_halvings")]
    pub max_halvings: u32,
}

fn default_halvings() -> u32 {
    5
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            dt: 0.01,
            convection: Convection::Upwind,
            splitting: Splitting::ConvexConcave,
            krylov: KrylovConfig {
                method: KrylovMethod::Cg,
                tol: 1e-10,
                max_iter: 2000,
            },
            projection_tol: 1e-9,
            delta: 1e-3,
            max_halvings: 5,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolverError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.krylov.tol > 0.0 && self.krylov.tol <= 1e-4) {
            return Err(SolverError::Config(format!(
                "Krylov tolerance must lie in (0, 1e-4], got {}",
                self.krylov.tol
            )));
        }
        if self.krylov.max_iter == 0 {
            return Err(SolverError::Config("max_iter must be positive".into()));
        }
        if !(self.projection_tol > 0.0) {
            return Err(SolverError::Config("projection_tol must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(SolverError::Config(format!(
                "delta = {} must lie in (0, 1/2)",
                self.delta
            )));
        }
        Ok(())
    }
}

/// The coefficient set with the scheme's regularization cutoff applied.
pub fn regularized(coeffs: &CoefficientSet, cfg: &SchemeConfig) -> CoefficientSet {
    let mut c = *coeffs;
    c.mobility.delta = cfg.delta;
    c.potential.delta = cfg.delta;
    c
}

// ---------------------------------------------------------------------------
// Krylov solvers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Matrix-free Krylov solve of `A x = rhs`, starting from `x0` (zero if absent).
///
/// Convergence is declared when `|rhs - A x| <= tol |rhs|`.
pub fn krylov_solve(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    rhs: &[f64],
    x0: Option<&[f64]>,
    method: KrylovMethod,
    tol: f64,
    max_iter: usize,
) -> std::result::Result<KrylovOutcome, KrylovError> {
    let n = rhs.len();
    let bnorm = norm(rhs);
    let fail = |reason, iterations, residual_history| KrylovError {
        method,
        reason,
        iterations,
        residual_history,
    };
    if !bnorm.is_finite() {
        return Err(fail(KrylovFailure::NonFinite, 0, vec![]));
    }
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            solution: vec![0.0; n],
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut history = vec![norm(&r) / bnorm];
    if history[0] <= tol {
        return Ok(KrylovOutcome {
            solution: x,
            iterations: 0,
            residual_history: history,
        });
    }
    match method {
        KrylovMethod::Cg => {
            let mut p = r.clone();
            let mut ap = vec![0.0; n];
            let mut rr = dot(&r, &r);
            for it in 1..=max_iter {
                apply(&p, &mut ap);
                let pap = dot(&p, &ap);
                if !pap.is_finite() {
                    return Err(fail(KrylovFailure::NonFinite, it, history));
                }
                if pap <= 0.0 {
                    return Err(fail(KrylovFailure::Indefinite, it, history));
                }
                let alpha = rr / pap;
                for k in 0..n {
                    x[k] += alpha * p[k];
                    r[k] -= alpha * ap[k];
                }
                let rr_new = dot(&r, &r);
                let rel = rr_new.sqrt() / bnorm;
                history.push(rel);
                if rel <= tol {
                    return Ok(KrylovOutcome {
                        solution: x,
                        iterations: it,
                        residual_history: history,
                    });
                }
                let beta = rr_new / rr;
                rr = rr_new;
                for k in 0..n {
                    p[k] = r[k] + beta * p[k];
                }
            }
            Err(fail(KrylovFailure::MaxIterations, max_iter, history))
        }
        KrylovMethod::Bicgstab => {
            let r_hat = r.clone();
            let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
            let mut v = vec![0.0; n];
            let mut p = vec![0.0; n];
            let mut s = vec![0.0; n];
            let mut t = vec![0.0; n];
            for it in 1..=max_iter {
                let rho_new = dot(&r_hat, &r);
                if rho_new == 0.0 || !rho_new.is_finite() {
                    return Err(fail(KrylovFailure::Breakdown, it, history));
                }
                let beta = (rho_new / rho) * (alpha / omega);
                rho = rho_new;
                for k in 0..n {
                    p[k] = r[k] + beta * (p[k] - omega * v[k]);
                }
                apply(&p, &mut v);
                let rv = dot(&r_hat, &v);
                if rv == 0.0 || !rv.is_finite() {
                    return Err(fail(KrylovFailure::Breakdown, it, history));
                }
                alpha = rho / rv;
                for k in 0..n {
                    s[k] = r[k] - alpha * v[k];
                }
                let snorm = norm(&s) / bnorm;
                if snorm <= tol {
                    for k in 0..n {
                        x[k] += alpha * p[k];
                    }
                    history.push(snorm);
                    return Ok(KrylovOutcome {
                        solution: x,
                        iterations: it,
                        residual_history: history,
                    });
                }
                apply(&s, &mut t);
                let tt = dot(&t, &t);
                if tt == 0.0 || !tt.is_finite() {
                    return Err(fail(KrylovFailure::Breakdown, it, history));
                }
                omega = dot(&t, &s) / tt;
                for k in 0..n {
                    x[k] += alpha * p[k] + omega * s[k];
                    r[k] = s[k] - omega * t[k];
                }
                let rel = norm(&r) / bnorm;
                history.push(rel);
                if !rel.is_finite() {
                    return Err(fail(KrylovFailure::NonFinite, it, history));
                }
                if rel <= tol {
                    return Ok(KrylovOutcome {
                        solution: x,
                        iterations: it,
                        residual_history: history,
                    });
                }
                if omega == 0.0 {
                    return Err(fail(KrylovFailure::Breakdown, it, history));
                }
            }
            Err(fail(KrylovFailure::MaxIterations, max_iter, history))
        }
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub phi: ScalarField,
    pub q: ScalarField,
    pub u: VectorField,
    pub c: SymTensorField,
    pub p: ScalarField,
    /// Chemical potential of the most recent phase step (or of the initial data).
    pub mu: ScalarField,
    pub t: f64,
}

impl State {
    /// Given phase field, zero stress and velocity, isotropic conformation `c0 I`.
    pub fn from_phase(phi: ScalarField, c0: f64, coeffs: &CoefficientSet) -> Result<Self> {
        let g = phi.grid;
        let mu = chemical_potential(&phi, coeffs)?;
        Ok(State {
            q: ScalarField::zeros(g),
            u: VectorField::zeros(g),
            c: SymTensorField::isotropic(g, c0),
            p: ScalarField::zeros(g),
            mu,
            phi,
            t: 0.0,
        })
    }

    pub fn grid(&self) -> Grid {
        self.phi.grid
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite()
            && self.q.is_finite()
            && self.u.is_finite()
            && self.c.is_finite()
            && self.p.is_finite()
            && self.mu.is_finite()
    }
}

/// `-c0 lap(phi) + F_delta'(phi)`.
pub fn chemical_potential(phi: &ScalarField, coeffs: &CoefficientSet) -> Result<ScalarField> {
    let g = phi.grid;
    let lap = fields::laplacian_raw(&g, &phi.data, Parity::Even);
    let mut mu = vec![0.0; g.len()];
    for k in 0..g.len() {
        mu[k] = -coeffs.c0 * lap[k] + eval_potential(&coeffs.potential, phi.data[k])?.slope;
    }
    Ok(ScalarField { grid: g, data: mu })
}

/// Peterlin stress `tr(C) C - I`.
pub fn peterlin_stress(c: &SymTensorField) -> SymTensorField {
    let mut t = c.clone();
    for k in 0..c.grid.len() {
        let tr = c.xx[k] + c.yy[k];
        t.xx[k] = tr * c.xx[k] - 1.0;
        t.xy[k] = tr * c.xy[k];
        t.yy[k] = tr * c.yy[k] - 1.0;
    }
    t
}

/// Phase-block fluxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxPair {
    /// `m_delta(phi^n) grad mu^{n+1}` at nodes.
    pub j: VectorField,
    /// `sqrt(m_delta(phi^n)) grad mu^{n+1}` at nodes.
    pub j_hat: VectorField,
    /// Compact face differences of `mu^{n+1}`.
    pub face_grad_mu: FaceField,
    /// Face means of `m_delta(phi^n)` and `n_delta(phi^n)`.
    pub face_m: FaceField,
    pub face_n: FaceField,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockStats {
    pub iterations: usize,
    pub residual: f64,
}

impl BlockStats {
    fn from_outcome(o: &KrylovOutcome) -> Self {
        BlockStats {
            iterations: o.iterations,
            residual: o.residual_history.last().copied().unwrap_or(0.0),
        }
    }

    fn merge(self, other: BlockStats) -> Self {
        BlockStats {
            iterations: self.iterations + other.iterations,
            residual: self.residual.max(other.residual),
        }
    }
}

/// External source terms added to the phase and bulk equations, evaluated
/// at the new time level. Used by manufactured-solution studies.
pub trait Forcing: Send + Sync {
    fn phase(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn bulk(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn has_phase(&self) -> bool {
        false
    }
    fn has_bulk(&self) -> bool {
        false
    }
}

pub struct NoForcing;
impl Forcing for NoForcing {}

fn add_forcing(grid: &Grid, out: &mut [f64], scale: f64, f: impl Fn(f64, f64) -> f64) {
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            out[grid.index(i, j)] += scale * f(grid.x(i), grid.y(j));
        }
    }
}

fn convect(cfg: &SchemeConfig, u: &VectorField, f: &[f64], parity: Parity) -> Vec<f64> {
    match cfg.convection {
        Convection::Upwind => fields::upwind_convection(u, f, parity),
        Convection::SemiLagrangian => {
            let dep = fields::semi_lagrangian_departure(u, f, parity, cfg.dt);
            f.iter().zip(&dep).map(|(a, b)| (a - b) / cfg.dt).collect()
        }
    }
}

fn check_finite(v: &[f64], block: Block) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFinite { block })
    }
}

fn krylov(
    block: Block,
    apply: impl FnMut(&[f64], &mut [f64]),
    rhs: &[f64],
    x0: Option<&[f64]>,
    method: KrylovMethod,
    cfg: &SchemeConfig,
) -> Result<KrylovOutcome> {
    krylov_solve(apply, rhs, x0, method, cfg.krylov.tol, cfg.krylov.max_iter)
        .map_err(|source| SolverError::Krylov { block, source })
}

// ---------------------------------------------------------------------------
// Phase block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStep {
    pub phi: ScalarField,
    pub mu: ScalarField,
    pub flux: FluxPair,
    pub stats: BlockStats,
}

/// Nodal coefficients of the phase block at the lagged state.
pub struct PhaseCoefficients {
    pub m: Vec<f64>,
    pub n: Vec<f64>,
    pub a: Vec<f64>,
    pub slope: Vec<f64>,
    pub convex_curvature: Vec<f64>,
}

pub fn phase_coefficients(phi: &ScalarField, coeffs: &CoefficientSet) -> Result<PhaseCoefficients> {
    let len = phi.grid.len();
    let mut pc = PhaseCoefficients {
        m: Vec::with_capacity(len),
        n: Vec::with_capacity(len),
        a: Vec::with_capacity(len),
        slope: Vec::with_capacity(len),
        convex_curvature: Vec::with_capacity(len),
    };
    for &x in &phi.data {
        let mob = eval_mobility(&coeffs.mobility, x)?;
        let pot = eval_potential(&coeffs.potential, x)?;
        pc.m.push(mob.m);
        pc.n.push(mob.n);
        pc.a.push(eval_coupling_a(coeffs, x)?.a);
        pc.slope.push(pot.slope);
        pc.convex_curvature.push(pot.convex_curvature);
    }
    Ok(pc)
}

pub fn step_phase(
    state: &State,
    coeffs: &CoefficientSet,
    cfg: &SchemeConfig,
    forcing: &dyn Forcing,
) -> Result<PhaseStep> {
    let coeffs = regularized(coeffs, cfg);
    let g = state.grid();
    let dt = cfg.dt;
    let len = g.len();
    let phi = &state.phi.data;
    let pc = phase_coefficients(&state.phi, &coeffs)?;
    let face_m = fields::face_mean(&g, &pc.m);
    let face_n = fields::face_mean(&g, &pc.n);

    let aq: Vec<f64> = pc.a.iter().zip(&state.q.data).map(|(a, q)| a * q).collect();
    let cross = fields::weighted_laplacian(&g, &aq, Parity::Even, &face_n);
    let conv = convect(cfg, &state.u, phi, Parity::Even);
    let mut phi_tilde: Vec<f64> = (0..len)
        .map(|k| phi[k] - dt * conv[k] - dt * cross[k])
        .collect();
    if forcing.has_phase() {
        let t = state.t + dt;
        add_forcing(&g, &mut phi_tilde, dt, |x, y| forcing.phase(t, x, y));
    }

    // mu = K phi_new + b,   phi_new = phi_tilde + dt L_m mu.
    let c0 = coeffs.c0;
    let apply_k = |v: &[f64], out: &mut [f64]| {
        fields::laplacian_into(&g, v, Parity::Even, out);
        for k in 0..len {
            out[k] = -c0 * out[k] + pc.convex_curvature[k] * v[k];
        }
    };
    let b: Vec<f64> = (0..len)
        .map(|k| pc.slope[k] - pc.convex_curvature[k] * phi[k])
        .collect();
    let mut rhs = vec![0.0; len];
    apply_k(&phi_tilde, &mut rhs);
    for k in 0..len {
        rhs[k] += b[k];
    }
    let mut lm = vec![0.0; len];
    let apply_m = |v: &[f64], out: &mut [f64]| {
        fields::weighted_laplacian_into(&g, v, Parity::Even, &face_m, &mut lm);
        apply_k(&lm, out);
        for k in 0..len {
            out[k] = v[k] - dt * out[k];
        }
    };
    let sol = krylov(
        Block::Phase,
        apply_m,
        &rhs,
        Some(&state.mu.data),
        KrylovMethod::Bicgstab,
        cfg,
    )?;
    let mu = sol.solution.clone();
    check_finite(&mu, Block::Phase)?;
    let lmu = fields::weighted_laplacian(&g, &mu, Parity::Even, &face_m);
    let phi_new: Vec<f64> = (0..len).map(|k| phi_tilde[k] + dt * lmu[k]).collect();
    check_finite(&phi_new, Block::Phase)?;

    let gx = fields::ddx(&g, &mu, Parity::Even);
    let gy = fields::ddy(&g, &mu, Parity::Even);
    let mut j = VectorField::zeros(g);
    let mut j_hat = VectorField::zeros(g);
    for k in 0..len {
        let s = pc.m[k].sqrt();
        j_hat.x[k] = s * gx[k];
        j_hat.y[k] = s * gy[k];
        j.x[k] = pc.m[k] * gx[k];
        j.y[k] = pc.m[k] * gy[k];
    }
    let flux = FluxPair {
        j,
        j_hat,
        face_grad_mu: fields::face_gradient(&g, &mu, Parity::Even),
        face_m,
        face_n,
    };
    Ok(PhaseStep {
        phi: ScalarField { grid: g, data: phi_new },
        mu: ScalarField { grid: g, data: mu },
        flux,
        stats: BlockStats::from_outcome(&sol),
    })
}

// ---------------------------------------------------------------------------
// Bulk-stress block
// ---------------------------------------------------------------------------

pub fn step_bulk(
    state: &State,
    phi_new: &ScalarField,
    mu_new: &ScalarField,
    flux: &FluxPair,
    coeffs: &CoefficientSet,
    cfg: &SchemeConfig,
    forcing: &dyn Forcing,
) -> Result<(ScalarField, BlockStats)> {
    let coeffs = regularized(coeffs, cfg);
    let g = state.grid();
    let len = g.len();
    let dt = cfg.dt;
    let mut a = Vec::with_capacity(len);
    let mut diag = Vec::with_capacity(len);
    for &x in &phi_new.data {
        a.push(eval_coupling_a(&coeffs, x)?.a);
        diag.push(1.0 / dt + 1.0 / coeffs.tau.eval(x));
    }
    let conv = convect(cfg, &state.u, &state.q.data, Parity::Even);
    let source = fields::weighted_laplacian(&g, &mu_new.data, Parity::Even, &flux.face_n);
    let mut rhs: Vec<f64> = (0..len)
        .map(|k| state.q.data[k] / dt - conv[k] - a[k] * source[k])
        .collect();
    if forcing.has_bulk() {
        let t = state.t + dt;
        add_forcing(&g, &mut rhs, 1.0, |x, y| forcing.bulk(t, x, y));
    }
    let eps1 = coeffs.eps1;
    let mut aw = vec![0.0; len];
    let mut lap_aw = vec![0.0; len];
    let mut lap_w = vec![0.0; len];
    let apply = |w: &[f64], out: &mut [f64]| {
        for k in 0..len {
            aw[k] = a[k] * w[k];
        }
        fields::laplacian_into(&g, &aw, Parity::Even, &mut lap_aw);
        fields::laplacian_into(&g, w, Parity::Even, &mut lap_w);
        for k in 0..len {
            out[k] = diag[k] * w[k] - a[k] * lap_aw[k] - eps1 * lap_w[k];
        }
    };
    let sol = krylov(Block::Bulk, apply, &rhs, Some(&state.q.data), cfg.krylov.method, cfg)?;
    check_finite(&sol.solution, Block::Bulk)?;
    let stats = BlockStats::from_outcome(&sol);
    Ok((ScalarField { grid: g, data: sol.solution }, stats))
}

// ---------------------------------------------------------------------------
// Velocity block
// ---------------------------------------------------------------------------

/// `V u = 1/2 face_div(eta_f face_grad u) + 1/2 div(eta (grad u)^T)`, the
/// discrete `div(eta D u)`.
pub fn apply_viscous(grid: &Grid, eta: &[f64], eta_face: &FaceField, ux: &[f64], uy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let len = grid.len();
    let lx = fields::weighted_laplacian(grid, ux, Parity::Odd, eta_face);
    let ly = fields::weighted_laplacian(grid, uy, Parity::Odd, eta_face);
    let dxu = fields::ddx(grid, ux, Parity::Odd);
    let dyu = fields::ddy(grid, ux, Parity::Odd);
    let dxv = fields::ddx(grid, uy, Parity::Odd);
    let dyv = fields::ddy(grid, uy, Parity::Odd);
    let e = |d: &[f64]| -> Vec<f64> { (0..len).map(|k| eta[k] * d[k]).collect() };
    let tx = fields::divergence_raw(grid, &e(&dxu), &e(&dxv), Parity::Even);
    let ty = fields::divergence_raw(grid, &e(&dyu), &e(&dyv), Parity::Even);
    (
        (0..len).map(|k| 0.5 * (lx[k] + tx[k])).collect(),
        (0..len).map(|k| 0.5 * (ly[k] + ty[k])).collect(),
    )
}

/// Solves `u / dt - V u = rhs` for both components at once.
pub fn solve_viscous(
    grid: &Grid,
    eta: &[f64],
    rhs_x: &[f64],
    rhs_y: &[f64],
    guess: Option<&VectorField>,
    cfg: &SchemeConfig,
) -> Result<(VectorField, BlockStats)> {
    let len = grid.len();
    let eta_face = fields::face_mean(grid, eta);
    let inv_dt = 1.0 / cfg.dt;
    let apply = |v: &[f64], out: &mut [f64]| {
        let (vx, vy) = v.split_at(len);
        let (ax, ay) = apply_viscous(grid, eta, &eta_face, vx, vy);
        for k in 0..len {
            out[k] = inv_dt * vx[k] - ax[k];
            out[len + k] = inv_dt * vy[k] - ay[k];
        }
    };
    let rhs: Vec<f64> = rhs_x.iter().chain(rhs_y).copied().collect();
    let x0: Option<Vec<f64>> = guess.map(|u| u.x.iter().chain(&u.y).copied().collect());
    let sol = krylov(Block::Viscous, apply, &rhs, x0.as_deref(), cfg.krylov.method, cfg)?;
    check_finite(&sol.solution, Block::Viscous)?;
    let stats = BlockStats::from_outcome(&sol);
    let (x, y) = sol.solution.split_at(len);
    Ok((
        VectorField {
            grid: *grid,
            x: x.to_vec(),
            y: y.to_vec(),
        },
        stats,
    ))
}

/// Exact solver for `div_c grad_c psi = r` (centred operators, the pressure
/// Poisson problem of the projection).
///
/// Periodic grids are diagonalized by the FFT directly. Neumann grids are
/// mirrored evenly into a doubled periodic box, which reproduces the ghost
/// rules exactly. Components of `r` in the null space (constants, and the
/// checkerboard modes of even periodic grids) are discarded; the returned
/// `psi` has no component in the null space, in particular zero mean.
pub struct PoissonSolver {
    grid: Grid,
    mx: usize,
    my: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    symbol: Vec<f64>,
}

impl std::fmt::Debug for PoissonSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSolver").field("grid", &self.grid).finish()
    }
}

impl PoissonSolver {
    pub fn new(grid: Grid) -> Self {
        let factor = match grid.bc() {
            Boundary::Periodic => 1,
            Boundary::Neumann => 2,
        };
        let (mx, my) = (factor * grid.nx(), factor * grid.ny());
        let mut planner = FftPlanner::new();
        let axis = |m: usize, h: f64| -> Vec<f64> {
            (0..m)
                .map(|k| {
                    if k == 0 || 2 * k == m {
                        0.0
                    } else {
                        let s = (2.0 * std::f64::consts::PI * k as f64 / m as f64).sin();
                        -s * s / (h * h)
                    }
                })
                .collect()
        };
        let (sx, sy) = (axis(mx, grid.hx()), axis(my, grid.hy()));
        let mut symbol = vec![0.0; mx * my];
        for j in 0..my {
            for i in 0..mx {
                symbol[j * mx + i] = sx[i] + sy[j];
            }
        }
        PoissonSolver {
            grid,
            mx,
            my,
            fwd_x: planner.plan_fft_forward(mx),
            inv_x: planner.plan_fft_inverse(mx),
            fwd_y: planner.plan_fft_forward(my),
            inv_y: planner.plan_fft_inverse(my),
            symbol,
        }
    }

    fn transform(&self, buf: &mut [Complex<f64>], forward: bool) {
        let (mx, my) = (self.mx, self.my);
        let (fx, fy) = if forward {
            (&self.fwd_x, &self.fwd_y)
        } else {
            (&self.inv_x, &self.inv_y)
        };
        fx.process(buf);
        let mut col = vec![Complex::new(0.0, 0.0); my];
        for i in 0..mx {
            for j in 0..my {
                col[j] = buf[j * mx + i];
            }
            fy.process(&mut col);
            for j in 0..my {
                buf[j * mx + i] = col[j];
            }
        }
    }

    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let (mx, my) = (self.mx, self.my);
        let mut buf = vec![Complex::new(0.0, 0.0); mx * my];
        for j in 0..my {
            for i in 0..mx {
                let v = g.value_at(r, i as isize, j as isize, Parity::Even);
                buf[j * mx + i] = Complex::new(v, 0.0);
            }
        }
        self.transform(&mut buf, true);
        let scale = 1.0 / (mx * my) as f64;
        for (b, &s) in buf.iter_mut().zip(&self.symbol) {
            *b = if s == 0.0 {
                Complex::new(0.0, 0.0)
            } else {
                *b * (scale / s)
            };
        }
        self.transform(&mut buf, false);
        let mut out = vec![0.0; g.len()];
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                out[g.index(i, j)] = buf[j * mx + i].re;
            }
        }
        out
    }
}

/// Discrete L2 norm of the centred divergence.
pub fn divergence_norm(u: &VectorField) -> f64 {
    let d = fields::divergence(u);
    fields::inner(&d, &d).sqrt()
}

/// Projects `u_star` onto discretely divergence-free fields.
/// Returns the projected velocity and the potential `psi` with `u = u* - grad psi`.
pub fn project(
    poisson: &PoissonSolver,
    u_star: &VectorField,
    tol: f64,
) -> Result<(VectorField, Vec<f64>)> {
    let g = u_star.grid;
    let div = fields::divergence_raw(&g, &u_star.x, &u_star.y, Parity::Odd);
    let psi = poisson.solve(&div);
    check_finite(&psi, Block::Pressure)?;
    let gx = fields::ddx(&g, &psi, Parity::Even);
    let gy = fields::ddy(&g, &psi, Parity::Even);
    let u = VectorField {
        grid: g,
        x: u_star.x.iter().zip(&gx).map(|(a, b)| a - b).collect(),
        y: u_star.y.iter().zip(&gy).map(|(a, b)| a - b).collect(),
    };
    let divergence = divergence_norm(&u);
    if !(divergence <= tol) {
        return Err(SolverError::Projection {
            divergence,
            tolerance: tol,
        });
    }
    Ok((u, psi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityStep {
    pub u: VectorField,
    pub p: ScalarField,
    pub viscous: BlockStats,
    pub pressure: BlockStats,
}

/// Explicit momentum forcing `div T(C) - c0 lap(phi) grad(phi)`.
pub fn momentum_forcing(c: &SymTensorField, phi: &ScalarField, c0: f64) -> VectorField {
    let g = phi.grid;
    let mut f = fields::tensor_divergence(&peterlin_stress(c));
    let lap = fields::laplacian_raw(&g, &phi.data, Parity::Even);
    let gx = fields::ddx(&g, &phi.data, Parity::Even);
    let gy = fields::ddy(&g, &phi.data, Parity::Even);
    for k in 0..g.len() {
        f.x[k] -= c0 * lap[k] * gx[k];
        f.y[k] -= c0 * lap[k] * gy[k];
    }
    f
}

pub fn step_velocity(
    state: &State,
    phi_new: &ScalarField,
    coeffs: &CoefficientSet,
    cfg: &SchemeConfig,
    poisson: &PoissonSolver,
) -> Result<VelocityStep> {
    let g = state.grid();
    let len = g.len();
    let dt = cfg.dt;
    let force = momentum_forcing(&state.c, phi_new, coeffs.c0);
    let cx = convect(cfg, &state.u, &state.u.x, Parity::Odd);
    let cy = convect(cfg, &state.u, &state.u.y, Parity::Odd);
    let rhs_x: Vec<f64> = (0..len).map(|k| state.u.x[k] / dt - cx[k] + force.x[k]).collect();
    let rhs_y: Vec<f64> = (0..len).map(|k| state.u.y[k] / dt - cy[k] + force.y[k]).collect();
    let eta: Vec<f64> = phi_new.data.iter().map(|&x| coeffs.eta.eval(x)).collect();
    let (u_star, viscous) = solve_viscous(&g, &eta, &rhs_x, &rhs_y, Some(&state.u), cfg)?;
    let (u, psi) = project(poisson, &u_star, cfg.projection_tol)?;
    let pressure = BlockStats {
        iterations: 1,
        residual: divergence_norm(&u),
    };
    Ok(VelocityStep {
        u,
        p: ScalarField {
            grid: g,
            data: psi.iter().map(|v| v / dt).collect(),
        },
        viscous,
        pressure,
    })
}

// ---------------------------------------------------------------------------
// Conformation block
// ---------------------------------------------------------------------------

/// Upper-convected stretch `G C + C G^T` with `G = grad u` (`G_ab = d_b u_a`).
pub fn stretch(u: &VectorField, c: &SymTensorField) -> SymTensorField {
    let g = &u.grid;
    let gxx = fields::ddx(g, &u.x, Parity::Odd);
    let gxy = fields::ddy(g, &u.x, Parity::Odd);
    let gyx = fields::ddx(g, &u.y, Parity::Odd);
    let gyy = fields::ddy(g, &u.y, Parity::Odd);
    let mut s = SymTensorField::zeros(*g);
    for k in 0..g.len() {
        let (cxx, cxy, cyy) = (c.xx[k], c.xy[k], c.yy[k]);
        s.xx[k] = 2.0 * (gxx[k] * cxx + gxy[k] * cxy);
        s.xy[k] = gxx[k] * cxy + gxy[k] * cyy + cxx * gyx[k] + cxy * gyy[k];
        s.yy[k] = 2.0 * (gyx[k] * cxy + gyy[k] * cyy);
    }
    s
}

pub fn step_conformation(
    state: &State,
    phi_new: &ScalarField,
    u_new: &VectorField,
    coeffs: &CoefficientSet,
    cfg: &SchemeConfig,
) -> Result<(SymTensorField, BlockStats)> {
    let g = state.grid();
    let len = g.len();
    let dt = cfg.dt;
    let c = &state.c;
    let st = stretch(u_new, c);
    let mut diag = Vec::with_capacity(len);
    let mut iso = Vec::with_capacity(len);
    for k in 0..len {
        let h = coeffs.h.eval(phi_new.data[k]);
        let tr = c.xx[k] + c.yy[k];
        diag.push(1.0 / dt + h * tr * tr);
        iso.push(h * tr);
    }
    let eps2 = coeffs.eps2;
    let mut lap = vec![0.0; len];
    let mut solve = |old: &[f64], s: &[f64], isotropic: bool| -> Result<(Vec<f64>, BlockStats)> {
        let conv = convect(cfg, u_new, old, Parity::Even);
        let rhs: Vec<f64> = (0..len)
            .map(|k| old[k] / dt - conv[k] + s[k] + if isotropic { iso[k] } else { 0.0 })
            .collect();
        let apply = |w: &[f64], out: &mut [f64]| {
            fields::laplacian_into(&g, w, Parity::Even, &mut lap);
            for k in 0..len {
                out[k] = diag[k] * w[k] - eps2 * lap[k];
            }
        };
        let sol = krylov(Block::Conformation, apply, &rhs, Some(old), cfg.krylov.method, cfg)?;
        check_finite(&sol.solution, Block::Conformation)?;
        let stats = BlockStats::from_outcome(&sol);
        Ok((sol.solution, stats))
    };
    let (xx, s1) = solve(&c.xx, &st.xx, true)?;
    let (xy, s2) = solve(&c.xy, &st.xy, false)?;
    let (yy, s3) = solve(&c.yy, &st.yy, true)?;
    Ok((
        SymTensorField { grid: g, xx, xy, yy },
        s1.merge(s2).merge(s3),
    ))
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Which blocks after the phase block are advanced; frozen blocks keep
/// their fields unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMask {
    pub bulk: bool,
    pub velocity: bool,
    pub conformation: bool,
}

impl BlockMask {
    pub const ALL: BlockMask = BlockMask {
        bulk: true,
        velocity: true,
        conformation: true,
    };
    pub const PHASE_ONLY: BlockMask = BlockMask {
        bulk: false,
        velocity: false,
        conformation: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Time at the end of the step.
    pub t: f64,
    pub dt: f64,
    pub cfl: f64,
    pub phase: BlockStats,
    pub bulk: BlockStats,
    pub viscous: BlockStats,
    pub pressure: BlockStats,
    pub conformation: BlockStats,
    /// Number of times the step had to be split by halving.
    pub retries: u32,
}

impl StepReport {
    pub const CSV_HEADER: [&'static str; 14] = [
        "t",
        "dt",
        "cfl",
        "phase_iters",
        "phase_residual",
        "bulk_iters",
        "bulk_residual",
        "viscous_iters",
        "viscous_residual",
        "pressure_iters",
        "pressure_divergence",
        "conformation_iters",
        "conformation_residual",
        "retries",
    ];
}

/// Time stepper owning the per-grid solver state.
pub struct Stepper {
    pub coeffs: CoefficientSet,
    pub cfg: SchemeConfig,
    pub mask: BlockMask,
    forcing: Box<dyn Forcing>,
    poisson: PoissonSolver,
    last_flux: Option<FluxPair>,
}

impl Stepper {
    pub fn new(grid: Grid, coeffs: CoefficientSet, cfg: SchemeConfig) -> Result<Self> {
        cfg.validate()?;
        let coeffs = regularized(&coeffs, &cfg);
        coeffs.check()?;
        Ok(Stepper {
            coeffs,
            cfg,
            mask: BlockMask::ALL,
            forcing: Box::new(NoForcing),
            poisson: PoissonSolver::new(grid),
            last_flux: None,
        })
    }

    pub fn with_mask(mut self, mask: BlockMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_forcing(mut self, forcing: Box<dyn Forcing>) -> Self {
        self.forcing = forcing;
        self
    }

    /// Fluxes of the most recent phase step.
    pub fn last_flux(&self) -> Option<&FluxPair> {
        self.last_flux.as_ref()
    }

    fn single(&self, state: &State, cfg: &SchemeConfig) -> Result<(State, StepReport, FluxPair)> {
        let forcing = self.forcing.as_ref();
        let ph = step_phase(state, &self.coeffs, cfg, forcing)?;
        let mut report = StepReport {
            t: state.t + cfg.dt,
            dt: cfg.dt,
            cfl: state.grid().cfl(&state.u, cfg.dt),
            phase: ph.stats,
            bulk: BlockStats::default(),
            viscous: BlockStats::default(),
            pressure: BlockStats::default(),
            conformation: BlockStats::default(),
            retries: 0,
        };
        let q = if self.mask.bulk {
            let (q, s) = step_bulk(state, &ph.phi, &ph.mu, &ph.flux, &self.coeffs, cfg, forcing)?;
            report.bulk = s;
            q
        } else {
            state.q.clone()
        };
        let (u, p) = if self.mask.velocity {
            let v = step_velocity(state, &ph.phi, &self.coeffs, cfg, &self.poisson)?;
            report.viscous = v.viscous;
            report.pressure = v.pressure;
            (v.u, v.p)
        } else {
            (state.u.clone(), state.p.clone())
        };
        let c = if self.mask.conformation {
            let (c, s) = step_conformation(state, &ph.phi, &u, &self.coeffs, cfg)?;
            report.conformation = s;
            c
        } else {
            state.c.clone()
        };
        let next = State {
            phi: ph.phi,
            q,
            u,
            c,
            p,
            mu: ph.mu,
            t: state.t + cfg.dt,
        };
        Ok((next, report, ph.flux))
    }

    /// Advances by `2^-level` of the configured step, splitting further on failure.
    fn attempt(&self, state: &State, level: u32) -> Result<(State, StepReport, FluxPair)> {
        let mut cfg = self.cfg;
        cfg.dt = self.cfg.dt / f64::from(1u32 << level);
        match self.single(state, &cfg) {
            Ok(r) => Ok(r),
            Err(e) if level >= self.cfg.max_halvings => Err(SolverError::RetriesExhausted {
                halvings: level,
                last: Box::new(e),
            }),
            Err(_) => {
                let (mid, r1, _) = self.attempt(state, level + 1)?;
                let (end, r2, flux) = self.attempt(&mid, level + 1)?;
                let report = StepReport {
                    t: end.t,
                    dt: cfg.dt,
                    cfl: r1.cfl.max(r2.cfl),
                    phase: r1.phase.merge(r2.phase),
                    bulk: r1.bulk.merge(r2.bulk),
                    viscous: r1.viscous.merge(r2.viscous),
                    pressure: r1.pressure.merge(r2.pressure),
                    conformation: r1.conformation.merge(r2.conformation),
                    retries: 1 + r1.retries + r2.retries,
                };
                Ok((end, report, flux))
            }
        }
    }

    pub fn advance(&mut self, state: &State) -> Result<(State, StepReport)> {
        let (next, report, flux) = self.attempt(state, 0)?;
        self.last_flux = Some(flux);
        Ok((next, report))
    }
}

/// One full step with a freshly built stepper.
pub fn advance(state: &State, coeffs: &CoefficientSet, cfg: &SchemeConfig) -> Result<(State, StepReport)> {
    Stepper::new(state.grid(), *coeffs, *cfg)?.advance(state)
}
