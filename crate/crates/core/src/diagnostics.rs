//! Energy, dissipation, entropy and confinement functionals of a state.
//!
//! Gradient terms are evaluated on cell faces with the same quadrature the
//! solver's face operators are adjoint to, so that for the phase block the
//! reported energy drop and dissipation balance to round-off.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::fields::{self, Boundary, FaceField, Grid, Parity, ScalarField};
use crate::physics::{
    eval_coupling_a, eval_entropy, eval_mobility, eval_potential, CoefficientSet, EntropySpec,
    PhysicsError,
};
use crate::solver::{FluxPair, State};

type Result<T> = std::result::Result<T, PhysicsError>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dissipation {
    /// `(sqrt(m) |grad mu| - |grad(A q)|)^2`, the form used in the residual.
    pub cross_abs: f64,
    /// `|n grad mu - grad(A q)|^2`.
    pub cross_vec: f64,
    pub relax_q: f64,
    pub eps1: f64,
    pub visc: f64,
    pub eps2: f64,
    pub peterlin: f64,
}

impl Dissipation {
    pub fn total(&self) -> f64 {
        self.cross_abs + self.relax_q + self.eps1 + self.visc + self.eps2 + self.peterlin
    }

    pub fn all_non_negative(&self) -> bool {
        [
            self.cross_abs,
            self.cross_vec,
            self.relax_q,
            self.eps1,
            self.visc,
            self.eps2,
            self.peterlin,
        ]
        .iter()
        .all(|&v| v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub t: f64,
    pub e_mix: f64,
    pub e_bulk: f64,
    /// `1/4 int |C|^2`.
    pub e_el: f64,
    pub e_kin: f64,
    pub e_tot: f64,
    /// `1/4 int (tr C)^2 - 2 - 2 ln det C - 2`, available only when `C` is
    /// positive definite at every node.
    pub e_el_tracelog: Option<f64>,
    pub dissipation: Dissipation,
    pub source: f64,
}

fn face_sq(grid: &Grid, f: &[f64], parity: Parity) -> FaceField {
    fields::face_gradient(grid, f, parity).map(|d| d * d)
}

/// Face Dirichlet energy `int |grad f|^2`.
pub fn dirichlet(grid: &Grid, f: &[f64], parity: Parity) -> f64 {
    face_sq(grid, f, parity).integrate()
}

/// Energy and dissipation rates of `state`. The cross terms use `flux`
/// when given (mobilities lagged as in the step that produced `state`),
/// otherwise mobilities of the current phase field.
pub fn energy_report(
    state: &State,
    coeffs: &CoefficientSet,
    flux: Option<&FluxPair>,
) -> Result<EnergyReport> {
    let g = state.grid();
    let len = g.len();
    let phi = &state.phi.data;

    let mut f_int = 0.0;
    let mut aq = Vec::with_capacity(len);
    let mut q_relax = 0.0;
    let mut peterlin = 0.0;
    let mut source = 0.0;
    let mut el = 0.0;
    let mut tracelog = Some(0.0);
    for k in 0..len {
        let x = phi[k];
        f_int += eval_potential(&coeffs.potential, x)?.value;
        aq.push(eval_coupling_a(coeffs, x)?.a * state.q.data[k]);
        q_relax += state.q.data[k] * state.q.data[k] / coeffs.tau.eval(x);
        let (cxx, cxy, cyy) = (state.c.xx[k], state.c.xy[k], state.c.yy[k]);
        let tr = cxx + cyy;
        let frob = cxx * cxx + 2.0 * cxy * cxy + cyy * cyy;
        let h = coeffs.h.eval(x);
        peterlin += 0.5 * h * tr * tr * frob;
        source += 0.5 * h * tr * tr;
        el += 0.25 * frob;
        let det = cxx * cyy - cxy * cxy;
        tracelog = match tracelog {
            Some(acc) if det > 0.0 && tr > 0.0 => Some(acc + 0.25 * (tr * tr - 4.0 - 2.0 * det.ln())),
            _ => None,
        };
    }
    let da = g.cell_area();

    let e_mix = 0.5 * coeffs.c0 * dirichlet(&g, phi, Parity::Even) + f_int * da;
    let e_bulk = 0.5 * fields::inner(&state.q, &state.q);
    let e_kin = 0.5 * fields::inner_vector(&state.u, &state.u);
    let e_el = el * da;

    let owned;
    let (grad_mu, face_m, face_n) = match flux {
        Some(f) => (&f.face_grad_mu, &f.face_m, &f.face_n),
        None => {
            let mut m = Vec::with_capacity(len);
            let mut n = Vec::with_capacity(len);
            for &x in phi {
                let e = eval_mobility(&coeffs.mobility, x)?;
                m.push(e.m);
                n.push(e.n);
            }
            owned = (
                fields::face_gradient(&g, &state.mu.data, Parity::Even),
                fields::face_mean(&g, &m),
                fields::face_mean(&g, &n),
            );
            (&owned.0, &owned.1, &owned.2)
        }
    };
    let grad_aq = fields::face_gradient(&g, &aq, Parity::Even);
    let cross_abs = {
        let a = grad_mu.zip(face_m, |d, m| m.sqrt() * d.abs());
        a.zip(&grad_aq, |s, d| (s - d.abs()).powi(2)).integrate()
    };
    let cross_vec = {
        let a = grad_mu.zip(face_n, |d, n| n * d);
        a.zip(&grad_aq, |s, d| (s - d).powi(2)).integrate()
    };

    let eps1 = coeffs.eps1 * dirichlet(&g, &state.q.data, Parity::Even);
    let visc = viscous_dissipation(state, coeffs);
    let c = &state.c;
    let eps2 = 0.5
        * coeffs.eps2
        * (dirichlet(&g, &c.xx, Parity::Even)
            + 2.0 * dirichlet(&g, &c.xy, Parity::Even)
            + dirichlet(&g, &c.yy, Parity::Even));

    Ok(EnergyReport {
        t: state.t,
        e_mix,
        e_bulk,
        e_el,
        e_kin,
        e_tot: e_mix + e_bulk + e_el + e_kin,
        e_el_tracelog: tracelog.map(|v| v * da),
        dissipation: Dissipation {
            cross_abs,
            cross_vec,
            relax_q: q_relax * da,
            eps1,
            visc,
            eps2,
            peterlin: peterlin * da,
        },
        source: source * da,
    })
}

/// Discrete `int eta |D u|^2` matching the solver's viscous operator:
/// half the face-gradient energy plus half of `eta tr(G G)` at nodes.
pub fn viscous_dissipation(state: &State, coeffs: &CoefficientSet) -> f64 {
    let g = state.grid();
    let u = &state.u;
    let eta: Vec<f64> = state.phi.data.iter().map(|&x| coeffs.eta.eval(x)).collect();
    let eta_f = fields::face_mean(&g, &eta);
    let face = face_sq(&g, &u.x, Parity::Odd)
        .zip(&face_sq(&g, &u.y, Parity::Odd), |a, b| a + b)
        .zip(&eta_f, |d, e| d * e)
        .integrate();
    let a = fields::ddx(&g, &u.x, Parity::Odd);
    let b = fields::ddy(&g, &u.x, Parity::Odd);
    let c = fields::ddx(&g, &u.y, Parity::Odd);
    let d = fields::ddy(&g, &u.y, Parity::Odd);
    let node: f64 = (0..g.len())
        .map(|k| eta[k] * (a[k] * a[k] + 2.0 * b[k] * c[k] + d[k] * d[k]))
        .sum::<f64>()
        * g.cell_area();
    0.5 * (face + node)
}

/// Streaming form of the integrated energy inequality residual
/// `R_k = E_k - E_0 + sum_{i<=k} dt_i (D_i - S_i)`, rates taken at the end
/// of each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTracker {
    e0: f64,
    t_prev: f64,
    integral: f64,
}

impl ResidualTracker {
    pub fn new(initial: &EnergyReport) -> Self {
        ResidualTracker {
            e0: initial.e_tot,
            t_prev: initial.t,
            integral: 0.0,
        }
    }

    pub fn push(&mut self, report: &EnergyReport) -> f64 {
        let dt = report.t - self.t_prev;
        self.t_prev = report.t;
        self.integral += dt * (report.dissipation.total() - report.source);
        report.e_tot - self.e0 + self.integral
    }
}

pub fn energy_inequality_residual(history: &[EnergyReport]) -> Vec<f64> {
    let Some(first) = history.first() else {
        return vec![];
    };
    let mut tracker = ResidualTracker::new(first);
    std::iter::once(0.0)
        .chain(history[1..].iter().map(|r| tracker.push(r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub phi_min: f64,
    pub phi_max: f64,
    pub overshoot_sq_high: f64,
    pub overshoot_sq_low: f64,
    pub entropy_total: f64,
    pub bound_rhs_high: f64,
    pub bound_rhs_low: f64,
    pub degenerate_set_fraction: f64,
}

impl BoundReport {
    /// The literal discrete confinement inequalities.
    pub fn holds(&self) -> bool {
        self.overshoot_sq_high <= self.bound_rhs_high && self.overshoot_sq_low <= self.bound_rhs_low
    }
}

pub const DEGENERATE_THRESHOLD: f64 = 1e-3;

pub fn entropy_total(phi: &ScalarField, spec: &EntropySpec) -> Result<f64> {
    let mut s = 0.0;
    for &x in &phi.data {
        s += eval_entropy(spec, x)?.g;
    }
    Ok(s * phi.grid.cell_area())
}

pub fn bound_report(phi: &ScalarField, coeffs: &CoefficientSet, eps0: f64) -> Result<BoundReport> {
    let spec = EntropySpec::for_mobility(coeffs.mobility);
    let da = phi.grid.cell_area();
    let (mut hi, mut lo, mut degenerate) = (0.0, 0.0, 0usize);
    for &x in &phi.data {
        if x > 1.0 {
            hi += (x - 1.0) * (x - 1.0);
        }
        if x < 0.0 {
            lo += x * x;
        }
        if x.abs() < eps0 || (x - 1.0).abs() < eps0 {
            degenerate += 1;
        }
    }
    let entropy = entropy_total(phi, &spec)?;
    Ok(BoundReport {
        phi_min: phi.min(),
        phi_max: phi.max(),
        overshoot_sq_high: hi * da,
        overshoot_sq_low: lo * da,
        entropy_total: entropy,
        bound_rhs_high: 2.0 * coeffs.mobility.endpoint_mobility(true) * entropy,
        bound_rhs_low: 2.0 * coeffs.mobility.endpoint_mobility(false) * entropy,
        degenerate_set_fraction: degenerate as f64 / phi.grid.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySample {
    pub t: f64,
    pub entropy: f64,
    /// `|grad phi|^2 (|q|^2 + |grad q|^2)`.
    pub gronwall: f64,
}

pub fn entropy_sample(state: &State, coeffs: &CoefficientSet) -> Result<EntropySample> {
    let g = state.grid();
    let spec = EntropySpec::for_mobility(coeffs.mobility);
    let grad_phi = dirichlet(&g, &state.phi.data, Parity::Even);
    let q2 = fields::inner(&state.q, &state.q);
    let grad_q = dirichlet(&g, &state.q.data, Parity::Even);
    Ok(EntropySample {
        t: state.t,
        entropy: entropy_total(&state.phi, &spec)?,
        gronwall: grad_phi * (q2 + grad_q),
    })
}

pub fn entropy_series<'a>(
    states: impl IntoIterator<Item = &'a State>,
    coeffs: &CoefficientSet,
) -> Result<Vec<EntropySample>> {
    states.into_iter().map(|s| entropy_sample(s, coeffs)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureMetrics {
    /// `int (phi - mean)^2 / |Omega|`.
    pub variance: f64,
    /// `int |grad phi|^2`.
    pub interface: f64,
    /// `2 pi / k1` with `k1` the first moment of the shell-averaged power
    /// spectrum; zero for a uniform field.
    pub domain_scale: f64,
}

/// Spectral analysis with FFT plans cached for one grid.
pub struct StructureAnalyzer {
    grid: Grid,
    mx: usize,
    my: usize,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
}

impl StructureAnalyzer {
    pub fn new(grid: Grid) -> Self {
        let factor = match grid.bc() {
            Boundary::Periodic => 1,
            Boundary::Neumann => 2,
        };
        let (mx, my) = (factor * grid.nx(), factor * grid.ny());
        let mut planner = FftPlanner::new();
        StructureAnalyzer {
            grid,
            mx,
            my,
            fft_x: planner.plan_fft_forward(mx),
            fft_y: planner.plan_fft_forward(my),
        }
    }

    pub fn analyze(&self, phi: &ScalarField) -> StructureMetrics {
        let g = &self.grid;
        let mean = phi.mean();
        let variance = phi.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g.len() as f64;
        let interface = dirichlet(g, &phi.data, Parity::Even);
        StructureMetrics {
            variance,
            interface,
            domain_scale: self.domain_scale(phi, mean),
        }
    }

    fn domain_scale(&self, phi: &ScalarField, mean: f64) -> f64 {
        let g = &self.grid;
        let (mx, my) = (self.mx, self.my);
        let mut buf = vec![Complex::new(0.0, 0.0); mx * my];
        for j in 0..my {
            for i in 0..mx {
                let v = g.value_at(&phi.data, i as isize, j as isize, Parity::Even) - mean;
                buf[j * mx + i] = Complex::new(v, 0.0);
            }
        }
        for row in buf.chunks_exact_mut(mx) {
            self.fft_x.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); my];
        for i in 0..mx {
            for j in 0..my {
                col[j] = buf[j * mx + i];
            }
            self.fft_y.process(&mut col);
            for j in 0..my {
                buf[j * mx + i] = col[j];
            }
        }
        let (ext_x, ext_y) = (g.hx() * mx as f64, g.hy() * my as f64);
        let tau = 2.0 * std::f64::consts::PI;
        let dk = (tau / ext_x).min(tau / ext_y);
        let signed = |k: usize, m: usize| if 2 * k <= m { k as f64 } else { k as f64 - m as f64 };
        let mut power = Vec::<f64>::new();
        let mut count = Vec::<usize>::new();
        for j in 0..my {
            let ky = tau * signed(j, my) / ext_y;
            for i in 0..mx {
                if i == 0 && j == 0 {
                    continue;
                }
                let kx = tau * signed(i, mx) / ext_x;
                let shell = ((kx * kx + ky * ky).sqrt() / dk).round() as usize;
                if shell >= power.len() {
                    power.resize(shell + 1, 0.0);
                    count.resize(shell + 1, 0);
                }
                power[shell] += buf[j * mx + i].norm_sqr();
                count[shell] += 1;
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (s, (&p, &c)) in power.iter().zip(&count).enumerate() {
            if c > 0 {
                let avg = p / c as f64;
                num += s as f64 * dk * avg;
                den += avg;
            }
        }
        // Relative to the field's own magnitude, anything below round-off is "flat".
        if den <= 1e-24 * (mx * my) as f64 * (mx * my) as f64 || num == 0.0 {
            0.0
        } else {
            tau / (num / den)
        }
    }
}

pub fn structure_metrics(phi: &ScalarField) -> StructureMetrics {
    StructureAnalyzer::new(phi.grid).analyze(phi)
}

/// Mean of `phi`, the conserved quantity.
pub fn mass(phi: &ScalarField) -> f64 {
    phi.mean()
}
