//! Run manifests, experiment drivers (single run, delta sweep, manufactured
//! solutions) and the on-disk output layout.
//!
//! An output directory holds `manifest.toml` (the effective manifest after
//! command-line overrides), `diagnostics.csv`, `steps.csv`, `fields/*.vpsf`
//! and `verify.txt`. `verify` needs nothing but that directory.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{
    self, bound_report, energy_report, entropy_sample, EnergyReport, ResidualTracker,
    StructureAnalyzer,
};
use crate::fields::{self, Boundary, Grid, ScalarField, VectorField};
use crate::physics::{
    eval_entropy, eval_potential, validate_coefficients,
    CoefficientSet, CouplingKind, EntropySpec, MobilityKind, MobilitySpec, PotentialKind,
    PotentialSpec, ScalarCoefficient,
};
use crate::solver::{
    self, BlockMask, Forcing, KrylovConfig, PoissonSolver, SchemeConfig, State, StepReport,
    Stepper,
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("solver failure at t = {t}: {source}")]
    Solver {
        t: f64,
        #[source]
        source: solver::SolverError,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Io { .. } => 2,
            AppError::Solver { .. } => 3,
            AppError::Invariant(_) => 4,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> AppError {
        let context = context.into();
        move |source| AppError::Io { context, source }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

fn config(e: impl fmt::Display) -> AppError {
    AppError::Config(e.to_string())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Phase separation from a perturbed mixture.
    Spinodal,
    /// Uniform equilibrium; every diagnostic must stay constant.
    Quiescent,
    /// Forced run with a known exact solution; the energy gate does not apply.
    Manufactured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub bc: Boundary,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.nx, self.ny, self.lx, self.ly, self.bc).map_err(config)
    }
}

/// Every coefficient function with its constants. The regularization
/// cutoff lives in the scheme section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSpec {
    pub c0: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub tau: ScalarCoefficient,
    pub h: ScalarCoefficient,
    pub eta: ScalarCoefficient,
    pub coupling: CouplingKind,
    pub mobility: MobilityKind,
    pub potential: PotentialKind,
}

impl CoefficientsSpec {
    pub fn experiment_one() -> Self {
        Self::from_set(&CoefficientSet::experiment_one(1e-3))
    }

    pub fn from_set(set: &CoefficientSet) -> Self {
        CoefficientsSpec {
            c0: set.c0,
            eps1: set.eps1,
            eps2: set.eps2,
            tau: set.tau,
            h: set.h,
            eta: set.eta,
            coupling: set.coupling,
            mobility: set.mobility.kind,
            potential: set.potential.kind,
        }
    }

    pub fn build(&self, delta: f64) -> CoefficientSet {
        CoefficientSet {
            tau: self.tau,
            h: self.h,
            eta: self.eta,
            coupling: self.coupling,
            mobility: MobilitySpec {
                kind: self.mobility,
                delta,
            },
            potential: PotentialSpec {
                kind: self.potential,
                delta,
            },
            c0: self.c0,
            eps1: self.eps1,
            eps2: self.eps2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseInit {
    /// `mean + a (2U - 1)` per node, see [`uniform_noise`].
    UniformNoise { mean: f64, amplitude: f64, seed: u64 },
    /// First component of a VPSF1 snapshot on the same grid.
    File { path: PathBuf },
    /// The manufactured solution at `t = 0`; the run gets the matching forcing.
    Manufactured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConformationInit {
    /// `I / sqrt(2)`, the Peterlin fixed point in two dimensions.
    Equilibrium,
    /// `I / sqrt(3)`, the three-dimensional fixed point.
    ThreeDimensional,
    Isotropic { value: f64 },
}

impl ConformationInit {
    pub fn value(&self) -> f64 {
        match *self {
            ConformationInit::Equilibrium => 0.5f64.sqrt(),
            ConformationInit::ThreeDimensional => 1.0 / 3f64.sqrt(),
            ConformationInit::Isotropic { value } => value,
        }
    }
}

fn default_conformation() -> ConformationInit {
    ConformationInit::Equilibrium
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default = "default_conformation")]
    pub conformation: ConformationInit,
    pub phase: PhaseInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Diagnostics row cadence in steps.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Snapshot cadence in steps; 0 writes only the initial and final state.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub vtk: bool,
}

fn default_every() -> usize {
    100
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            every: default_every(),
            snapshot_every: 0,
            vtk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub experiment: Experiment,
    pub t_end: f64,
    pub grid: GridSpec,
    pub scheme: SchemeConfig,
    pub coefficients: CoefficientsSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunManifest {
    /// The two-dimensional reduction of the published polymer-solvent
    /// experiment: `[0, 24]^2`, 96^2 cells, `dt = 0.01`, `T = 200`.
    pub fn flagship() -> Self {
        RunManifest {
            experiment: Experiment::Spinodal,
            t_end: 200.0,
            grid: GridSpec {
                nx: 96,
                ny: 96,
                lx: 24.0,
                ly: 24.0,
                bc: Boundary::Neumann,
            },
            scheme: SchemeConfig::default(),
            coefficients: CoefficientsSpec::experiment_one(),
            initial: InitialSpec {
                conformation: ConformationInit::Equilibrium,
                phase: PhaseInit::UniformNoise {
                    mean: 0.4,
                    amplitude: 1e-3,
                    seed: 20240601,
                },
            },
            output: OutputSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).map_err(config)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(AppError::io(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn coefficient_set(&self) -> CoefficientSet {
        self.coefficients.build(self.scheme.delta)
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.scheme.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        self.scheme.validate().map_err(config)?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.output.every == 0 {
            return Err(config("output.every must be at least 1"));
        }
        let set = self.coefficient_set();
        set.check().map_err(config)?;
        let report = validate_coefficients(&set);
        if !report.passed() {
            return Err(config(format!("coefficient validation failed:\n{report}")));
        }
        let c = self.initial.conformation.value();
        if !(c > 0.0 && c.is_finite()) {
            return Err(config("initial conformation must be positive definite"));
        }
        let manufactured = matches!(self.initial.phase, PhaseInit::Manufactured);
        if manufactured != (self.experiment == Experiment::Manufactured) {
            return Err(config(
                "the manufactured initial condition and experiment go together",
            ));
        }
        if manufactured {
            ManufacturedForcing::new(&set, self.grid.lx, self.grid.ly)?;
        }
        if let PhaseInit::UniformNoise { amplitude, mean, .. } = self.initial.phase {
            if !(amplitude >= 0.0 && amplitude.is_finite() && mean.is_finite()) {
                return Err(config("noise mean must be finite and amplitude non-negative"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

/// `mean + amplitude (2U - 1)` with `U = (x >> 11) 2^-53` and `x` the
/// successive outputs of xoshiro256++ seeded via SplitMix64 from `seed`
/// (`seed_from_u64`). Nodes are filled row-major, `i` fastest.
pub fn uniform_noise(grid: Grid, mean: f64, amplitude: f64, seed: u64) -> ScalarField {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let scale = 1.0 / (1u64 << 53) as f64;
    let data = (0..grid.len())
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * scale;
            mean + amplitude * (2.0 * u - 1.0)
        })
        .collect();
    ScalarField { grid, data }
}

pub fn initial_state(manifest: &RunManifest, base_dir: Option<&Path>) -> Result<State> {
    let grid = manifest.grid.build()?;
    let set = manifest.coefficient_set();
    let mut q = None;
    let phi = match &manifest.initial.phase {
        PhaseInit::UniformNoise {
            mean,
            amplitude,
            seed,
        } => uniform_noise(grid, *mean, *amplitude, *seed),
        PhaseInit::File { path } => {
            let full = match base_dir {
                Some(d) if path.is_relative() => d.join(path),
                _ => path.clone(),
            };
            let file = fs::File::open(&full)
                .map_err(AppError::io(format!("opening {}", full.display())))?;
            let snap = fields::read_snapshot(std::io::BufReader::new(file)).map_err(config)?;
            if snap.grid != grid {
                return Err(config(format!(
                    "{} was written on a different grid",
                    full.display()
                )));
            }
            ScalarField {
                grid,
                data: snap.components.into_iter().next().unwrap_or_default(),
            }
        }
        PhaseInit::Manufactured => {
            let mf = ManufacturedForcing::new(&set, manifest.grid.lx, manifest.grid.ly)?;
            q = Some(ScalarField::from_fn(grid, |x, y| mf.q_exact(0.0, x, y)));
            ScalarField::from_fn(grid, |x, y| mf.phi_exact(0.0, x, y))
        }
    };
    let mut state = State::from_phase(phi, manifest.initial.conformation.value(), &set)
        .map_err(config)?;
    if let Some(q) = q {
        state.q = q;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Manufactured solution
// ---------------------------------------------------------------------------

/// Forcing for the exact pair
/// `phi* = 1/2 + 1/4 cos(kx x) cos(ky y) e^-t`,
/// `q*   = 1/2 cos(2 kx x) cos(ky y) e^-t`, `k = 2 pi / L`,
/// with constant mobility, coupling and relaxation time and no flow. Both
/// profiles are smooth under periodic wrapping and even mirroring, so
/// either boundary type reproduces them exactly.
#[derive(Debug, Clone, Copy)]
pub struct ManufacturedForcing {
    coeffs: CoefficientSet,
    kx: f64,
    ky: f64,
    m: f64,
    n: f64,
    a: f64,
    tau: f64,
}

impl ManufacturedForcing {
    pub fn new(coeffs: &CoefficientSet, lx: f64, ly: f64) -> Result<Self> {
        let (m, n) = match coeffs.mobility.kind {
            MobilityKind::RegularConstant { value } => (value, value),
            _ => return Err(config("manufactured runs need a constant mobility")),
        };
        let a = match coeffs.coupling {
            CouplingKind::Constant { value } => value,
            _ => return Err(config("manufactured runs need a constant coupling")),
        };
        let tau = match coeffs.tau {
            ScalarCoefficient::Constant { value } => value,
            _ => return Err(config("manufactured runs need a constant relaxation time")),
        };
        Ok(ManufacturedForcing {
            coeffs: *coeffs,
            kx: 2.0 * PI / lx,
            ky: 2.0 * PI / ly,
            m,
            n,
            a,
            tau,
        })
    }

    pub fn phi_exact(&self, t: f64, x: f64, y: f64) -> f64 {
        0.5 + 0.25 * (self.kx * x).cos() * (self.ky * y).cos() * (-t).exp()
    }

    pub fn q_exact(&self, t: f64, x: f64, y: f64) -> f64 {
        0.5 * (2.0 * self.kx * x).cos() * (self.ky * y).cos() * (-t).exp()
    }

    fn lap_mu(&self, t: f64, x: f64, y: f64) -> f64 {
        let (kx, ky) = (self.kx, self.ky);
        let k2 = kx * kx + ky * ky;
        let phi = self.phi_exact(t, x, y);
        let dev = phi - 0.5;
        let e = 0.25 * (-t).exp();
        let gx = -e * kx * (kx * x).sin() * (ky * y).cos();
        let gy = -e * ky * (kx * x).cos() * (ky * y).sin();
        let pot = eval_potential(&self.coeffs.potential, phi).expect("finite");
        let f2 = pot.convex_curvature + pot.concave_curvature;
        let f3 = self
            .coeffs
            .potential
            .convex_third_derivative(phi)
            .expect("finite");
        -self.coeffs.c0 * k2 * k2 * dev + f2 * (-k2 * dev) + f3 * (gx * gx + gy * gy)
    }

    fn lap_q(&self, t: f64, x: f64, y: f64) -> f64 {
        -(4.0 * self.kx * self.kx + self.ky * self.ky) * self.q_exact(t, x, y)
    }
}

impl Forcing for ManufacturedForcing {
    fn phase(&self, t: f64, x: f64, y: f64) -> f64 {
        let dphi = -(self.phi_exact(t, x, y) - 0.5);
        dphi - self.m * self.lap_mu(t, x, y) + self.n * self.a * self.lap_q(t, x, y)
    }

    fn bulk(&self, t: f64, x: f64, y: f64) -> f64 {
        let q = self.q_exact(t, x, y);
        -q + q / self.tau - (self.a * self.a + self.coeffs.eps1) * self.lap_q(t, x, y)
            + self.a * self.n * self.lap_mu(t, x, y)
    }

    fn has_phase(&self) -> bool {
        true
    }

    fn has_bulk(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Diagnostics rows
// ---------------------------------------------------------------------------

/// One line of `diagnostics.csv`. Columns ending in `_max`, `overshoot_max`
/// and `bound_ok` are running values over every step so far, not only the
/// logged ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub step: u64,
    pub t: f64,
    pub mass: f64,
    pub mass_drift_max: f64,
    pub e_mix: f64,
    pub e_bulk: f64,
    pub e_el: f64,
    pub e_el_tracelog: Option<f64>,
    pub e_kin: f64,
    pub e_tot: f64,
    pub d_cross: f64,
    pub d_cross_vec: f64,
    pub d_relax_q: f64,
    pub d_eps1: f64,
    pub d_visc: f64,
    pub d_eps2: f64,
    pub d_peterlin: f64,
    pub source: f64,
    pub residual: f64,
    pub residual_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub overshoot_max: f64,
    pub overshoot_sq_high: f64,
    pub overshoot_sq_low: f64,
    pub bound_rhs_high: f64,
    pub bound_rhs_low: f64,
    pub bound_ok: bool,
    pub entropy: f64,
    pub entropy_max: f64,
    pub gronwall: f64,
    pub degenerate_fraction: f64,
    pub variance: f64,
    pub interface: f64,
    pub domain_scale: f64,
    pub div_u: f64,
    pub q_max: f64,
    pub trace_c_mean: f64,
}

impl DiagnosticsRow {
    /// Values that must stay put at a fixed point (excludes the step
    /// counter, time and the zero-by-construction dissipation columns).
    fn state_columns(&self) -> [(&'static str, f64); 14] {
        [
            ("mass", self.mass),
            ("e_mix", self.e_mix),
            ("e_bulk", self.e_bulk),
            ("e_el", self.e_el),
            ("e_kin", self.e_kin),
            ("e_tot", self.e_tot),
            ("phi_min", self.phi_min),
            ("phi_max", self.phi_max),
            ("entropy", self.entropy),
            ("variance", self.variance),
            ("interface", self.interface),
            ("div_u", self.div_u),
            ("q_max", self.q_max),
            ("trace_c_mean", self.trace_c_mean),
        ]
    }
}

/// Per-step running extremes; every step feeds it, rows snapshot it.
#[derive(Debug, Clone)]
struct Running {
    mass0: f64,
    mass_drift_max: f64,
    residual_max: f64,
    overshoot_max: f64,
    entropy_max: f64,
    bound_ok: bool,
}

fn overshoot(phi_min: f64, phi_max: f64) -> f64 {
    (phi_max - 1.0).max(-phi_min).max(0.0)
}

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

/// Acceptance thresholds shared by `run`, `verify` and the sweep.
pub mod gates {
    /// `|int phi(t) - int phi(0)| / |Omega|`.
    pub const MASS_DRIFT: f64 = 1e-8;
    /// Energy-inequality residual relative to `max_t |E_tot|`.
    pub const RESIDUAL_REL: f64 = 1e-3;
    /// Allowed excursion of `phi` outside `[0, 1]`.
    pub const KAPPA: f64 = 1e-2;
    /// Relative drift of a fixed point.
    pub const STATIONARY: f64 = 1e-12;
    /// Spread of the entropy maximum across a delta sweep.
    pub const ENTROPY_RATIO: f64 = 2.0;
    /// Round-off allowance for dissipation terms that are non-negative
    /// analytically, relative to the energy scale.
    pub const DISSIPATION_SLACK: f64 = 1e-12;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Gate {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Gate {
            name: name.to_string(),
            value,
            limit,
            passed: value <= limit,
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (limit {:.3e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.limit
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub gates: Vec<Gate>,
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }

    fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let failed: Vec<_> = self
                .gates
                .iter()
                .filter(|g| !g.passed)
                .map(|g| g.name.as_str())
                .collect();
            Err(AppError::Invariant(format!("failed gates: {}", failed.join(", "))))
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.gates {
            writeln!(f, "{g}")?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        write!(f, "{}", if self.passed() { "OK" } else { "FAILED" })
    }
}

/// Entropy of a pure phase over the whole domain: the largest value of
/// `int G` attainable by any field confined to `[0, 1]`.
fn pure_phase_entropy(set: &CoefficientSet, area: f64) -> Result<f64> {
    let spec = EntropySpec::for_mobility(set.mobility);
    let lo = eval_entropy(&spec, 0.0).map_err(config)?.g;
    let hi = eval_entropy(&spec, 1.0).map_err(config)?.g;
    Ok(area * lo.max(hi))
}

pub fn evaluate_gates(manifest: &RunManifest, rows: &[DiagnosticsRow]) -> Result<VerifyReport> {
    let first = rows
        .first()
        .ok_or_else(|| config("diagnostics contain no rows"))?;
    let mut report = VerifyReport::default();
    let finite = rows.iter().all(|r| {
        [r.mass, r.e_tot, r.residual_max, r.entropy_max, r.phi_min, r.phi_max]
            .iter()
            .all(|v| v.is_finite())
    });
    if !finite {
        report.gates.push(Gate {
            name: "finite diagnostics".into(),
            value: f64::NAN,
            limit: 0.0,
            passed: false,
        });
        return Ok(report);
    }

    let drift = rows
        .iter()
        .map(|r| (r.mass - first.mass).abs().max(r.mass_drift_max))
        .fold(0.0, f64::max);
    report.gates.push(Gate::at_most("mass drift", drift, gates::MASS_DRIFT));

    let e_scale = rows.iter().map(|r| r.e_tot.abs()).fold(0.0, f64::max);
    if manifest.experiment == Experiment::Manufactured {
        report
            .notes
            .push("energy inequality not gated: manufactured forcing does work".into());
    } else {
        let r_max = rows.iter().map(|r| r.residual_max).fold(f64::MIN, f64::max);
        report.gates.push(Gate::at_most(
            "energy inequality",
            r_max,
            gates::RESIDUAL_REL * e_scale,
        ));
        let slack = gates::DISSIPATION_SLACK * e_scale.max(1.0);
        let worst = rows
            .iter()
            .flat_map(|r| [r.d_cross, r.d_relax_q, r.d_eps1, r.d_visc, r.d_eps2, r.d_peterlin])
            .map(|d| -d)
            .fold(0.0, f64::max);
        report
            .gates
            .push(Gate::at_most("dissipation non-negative", worst, slack));

        let violations = rows
            .iter()
            .filter(|r| {
                !r.bound_ok
                    || r.overshoot_sq_high > r.bound_rhs_high
                    || r.overshoot_sq_low > r.bound_rhs_low
            })
            .count();
        report
            .gates
            .push(Gate::at_most("bound inequality", violations as f64, 0.0));
        let over = rows.iter().map(|r| r.overshoot_max).fold(0.0, f64::max);
        report.gates.push(Gate::at_most("phase confinement", over, gates::KAPPA));

        let set = manifest.coefficient_set();
        let area = manifest.grid.lx * manifest.grid.ly;
        let ent = rows.iter().map(|r| r.entropy_max).fold(0.0, f64::max);
        report.gates.push(Gate::at_most(
            "entropy bounded",
            ent,
            pure_phase_entropy(&set, area)?,
        ));
    }

    if manifest.experiment == Experiment::Quiescent {
        let mut worst = 0.0f64;
        for r in rows {
            for ((_, a), (_, b)) in r.state_columns().iter().zip(first.state_columns().iter()) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
        report
            .gates
            .push(Gate::at_most("stationary", worst, gates::STATIONARY));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub quiet: bool,
    /// Directory that relative paths in the manifest refer to.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<DiagnosticsRow>,
    pub steps: usize,
    pub final_state: State,
    pub verify: VerifyReport,
}

impl RunSummary {
    pub fn max_overshoot(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.overshoot_max)
    }

    pub fn max_entropy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.entropy_max)
    }
}

struct Sink {
    dir: PathBuf,
    diagnostics: csv::Writer<BufWriter<fs::File>>,
    steps: csv::Writer<BufWriter<fs::File>>,
    vtk: bool,
}

impl Sink {
    fn create(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        fs::create_dir_all(dir.join("fields"))
            .map_err(AppError::io(format!("creating {}", dir.display())))?;
        fs::write(dir.join("manifest.toml"), manifest.to_toml())
            .map_err(AppError::io("writing manifest copy"))?;
        let open = |name: &str| -> Result<csv::Writer<BufWriter<fs::File>>> {
            let f = fs::File::create(dir.join(name))
                .map_err(AppError::io(format!("creating {name}")))?;
            Ok(csv::Writer::from_writer(BufWriter::new(f)))
        };
        let mut steps = open("steps.csv")?;
        let mut header = vec!["step"];
        header.extend_from_slice(&StepReport::CSV_HEADER);
        steps.write_record(&header).map_err(csv_io)?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            diagnostics: open("diagnostics.csv")?,
            steps,
            vtk: manifest.output.vtk,
        })
    }

    fn row(&mut self, row: &DiagnosticsRow) -> Result<()> {
        self.diagnostics.serialize(row).map_err(csv_io)
    }

    fn step(&mut self, step: usize, r: &StepReport) -> Result<()> {
        let rec = [
            step.to_string(),
            r.t.to_string(),
            r.dt.to_string(),
            r.cfl.to_string(),
            r.phase.iterations.to_string(),
            r.phase.residual.to_string(),
            r.bulk.iterations.to_string(),
            r.bulk.residual.to_string(),
            r.viscous.iterations.to_string(),
            r.viscous.residual.to_string(),
            r.pressure.iterations.to_string(),
            r.pressure.residual.to_string(),
            r.conformation.iterations.to_string(),
            r.conformation.residual.to_string(),
            r.retries.to_string(),
        ];
        self.steps.write_record(&rec).map_err(csv_io)
    }

    fn snapshot(&self, step: usize, s: &State) -> Result<()> {
        let comps: [&[f64]; 9] = [
            &s.phi.data, &s.q.data, &s.u.x, &s.u.y, &s.c.xx, &s.c.xy, &s.c.yy, &s.p.data,
            &s.mu.data,
        ];
        let name = "phi q ux uy cxx cxy cyy p mu";
        let g = s.grid();
        let path = self.dir.join("fields").join(format!("{step:06}.vpsf"));
        let f = fs::File::create(&path).map_err(AppError::io(format!("creating {}", path.display())))?;
        fields::write_snapshot(BufWriter::new(f), &g, name, &comps).map_err(snapshot_io)?;
        if self.vtk {
            let path = path.with_extension("vtk");
            let f = fs::File::create(&path)
                .map_err(AppError::io(format!("creating {}", path.display())))?;
            fields::write_vtk(BufWriter::new(f), &g, "state", &comps).map_err(snapshot_io)?;
        }
        Ok(())
    }

    fn finish(mut self, report: &VerifyReport) -> Result<()> {
        self.diagnostics.flush().map_err(AppError::io("flushing diagnostics.csv"))?;
        self.steps.flush().map_err(AppError::io("flushing steps.csv"))?;
        fs::write(self.dir.join("verify.txt"), format!("{report}\n"))
            .map_err(AppError::io("writing verify.txt"))
    }
}

fn csv_io(e: csv::Error) -> AppError {
    AppError::Io {
        context: "writing CSV".into(),
        source: e.into(),
    }
}

fn snapshot_io(e: fields::FieldError) -> AppError {
    match e {
        fields::FieldError::Io(source) => AppError::Io {
            context: "writing snapshot".into(),
            source,
        },
        other => config(other),
    }
}

struct Observer {
    set: CoefficientSet,
    analyzer: StructureAnalyzer,
    tracker: ResidualTracker,
    running: Running,
}

impl Observer {
    fn new(state: &State, set: CoefficientSet) -> Result<(Self, EnergyReport)> {
        let e0 = energy_report(state, &set, None).map_err(config)?;
        let mass0 = diagnostics::mass(&state.phi);
        let obs = Observer {
            set,
            analyzer: StructureAnalyzer::new(state.grid()),
            tracker: ResidualTracker::new(&e0),
            running: Running {
                mass0,
                mass_drift_max: 0.0,
                residual_max: 0.0,
                overshoot_max: 0.0,
                entropy_max: f64::MIN,
                bound_ok: true,
            },
        };
        Ok((obs, e0))
    }

    /// Updates the running quantities; returns what a row needs.
    fn observe(
        &mut self,
        state: &State,
        energy: &EnergyReport,
        first: bool,
    ) -> Result<(f64, diagnostics::BoundReport)> {
        let residual = if first { 0.0 } else { self.tracker.push(energy) };
        let bound = bound_report(&state.phi, &self.set, diagnostics::DEGENERATE_THRESHOLD)
            .map_err(config)?;
        let r = &mut self.running;
        r.mass_drift_max = r
            .mass_drift_max
            .max((diagnostics::mass(&state.phi) - r.mass0).abs());
        r.residual_max = r.residual_max.max(residual);
        r.overshoot_max = r.overshoot_max.max(overshoot(bound.phi_min, bound.phi_max));
        r.entropy_max = r.entropy_max.max(bound.entropy_total);
        r.bound_ok &= bound.holds();
        Ok((residual, bound))
    }

    fn row(
        &self,
        step: usize,
        state: &State,
        e: &EnergyReport,
        residual: f64,
        b: &diagnostics::BoundReport,
    ) -> Result<DiagnosticsRow> {
        let sm = self.analyzer.analyze(&state.phi);
        let es = entropy_sample(state, &self.set).map_err(config)?;
        let d = &e.dissipation;
        let r = &self.running;
        let tr = state.c.trace();
        Ok(DiagnosticsRow {
            step: step as u64,
            t: state.t,
            mass: diagnostics::mass(&state.phi),
            mass_drift_max: r.mass_drift_max,
            e_mix: e.e_mix,
            e_bulk: e.e_bulk,
            e_el: e.e_el,
            e_el_tracelog: e.e_el_tracelog,
            e_kin: e.e_kin,
            e_tot: e.e_tot,
            d_cross: d.cross_abs,
            d_cross_vec: d.cross_vec,
            d_relax_q: d.relax_q,
            d_eps1: d.eps1,
            d_visc: d.visc,
            d_eps2: d.eps2,
            d_peterlin: d.peterlin,
            source: e.source,
            residual,
            residual_max: r.residual_max,
            phi_min: b.phi_min,
            phi_max: b.phi_max,
            overshoot_max: r.overshoot_max,
            overshoot_sq_high: b.overshoot_sq_high,
            overshoot_sq_low: b.overshoot_sq_low,
            bound_rhs_high: b.bound_rhs_high,
            bound_rhs_low: b.bound_rhs_low,
            bound_ok: r.bound_ok,
            entropy: b.entropy_total,
            entropy_max: r.entropy_max,
            gronwall: es.gronwall,
            degenerate_fraction: b.degenerate_set_fraction,
            variance: sm.variance,
            interface: sm.interface,
            domain_scale: sm.domain_scale,
            div_u: solver::divergence_norm(&state.u),
            q_max: state.q.data.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            trace_c_mean: tr.mean(),
        })
    }
}

/// Runs a manifest to completion. With `opts.out` set, writes the output
/// directory as it goes. Gate failures are reported in the summary, not as
/// an error; [`cli_run`] turns them into exit status 4.
pub fn simulate(manifest: &RunManifest, opts: &RunOptions) -> Result<RunSummary> {
    manifest.validate()?;
    let grid = manifest.grid.build()?;
    let set = manifest.coefficient_set();
    let mut state = initial_state(manifest, opts.base_dir.as_deref())?;
    let mut stepper = Stepper::new(grid, set, manifest.scheme).map_err(config)?;
    if manifest.experiment == Experiment::Manufactured {
        let mf = ManufacturedForcing::new(&stepper.coeffs, manifest.grid.lx, manifest.grid.ly)?;
        stepper = stepper
            .with_forcing(Box::new(mf))
            .with_mask(BlockMask {
                bulk: true,
                velocity: false,
                conformation: false,
            });
    }
    let set = stepper.coeffs;
    let mut sink = match &opts.out {
        Some(dir) => Some(Sink::create(dir, manifest)?),
        None => None,
    };

    let steps = manifest.steps();
    let every = manifest.output.every;
    let snap_every = manifest.output.snapshot_every;
    let (mut obs, e0) = Observer::new(&state, set)?;
    let (res0, b0) = obs.observe(&state, &e0, true)?;
    let mut rows = vec![obs.row(0, &state, &e0, res0, &b0)?];
    if let Some(s) = sink.as_mut() {
        s.row(&rows[0])?;
        s.snapshot(0, &state)?;
    }

    for step in 1..=steps {
        let (next, report) = stepper.advance(&state).map_err(|source| AppError::Solver {
            t: state.t,
            source,
        })?;
        state = next;
        if !state.is_finite() {
            return Err(AppError::Invariant(format!("non-finite state at t = {}", state.t)));
        }
        let e = energy_report(&state, &set, stepper.last_flux()).map_err(config)?;
        let (residual, bound) = obs.observe(&state, &e, false)?;
        if let Some(s) = sink.as_mut() {
            s.step(step, &report)?;
        }
        let last = step == steps;
        if step % every == 0 || last {
            let row = obs.row(step, &state, &e, residual, &bound)?;
            if !opts.quiet {
                eprintln!(
                    "step {step:>7} t = {:>9.3}  E = {:.9e}  R = {:+.3e}  var = {:.3e}  phi in [{:.5}, {:.5}]",
                    row.t, row.e_tot, row.residual, row.variance, row.phi_min, row.phi_max
                );
            }
            if let Some(s) = sink.as_mut() {
                s.row(&row)?;
            }
            rows.push(row);
        }
        if let Some(s) = sink.as_ref() {
            if last || (snap_every > 0 && step % snap_every == 0) {
                s.snapshot(step, &state)?;
            }
        }
    }

    let verify = evaluate_gates(manifest, &rows)?;
    if let Some(s) = sink {
        s.finish(&verify)?;
    }
    Ok(RunSummary {
        rows,
        steps,
        final_state: state,
        verify,
    })
}

// ---------------------------------------------------------------------------
// CLI entry points
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snapshots: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, m: &mut RunManifest) {
        if let Some(seed) = self.seed {
            if let PhaseInit::UniformNoise { seed: s, .. } = &mut m.initial.phase {
                *s = seed;
            }
        }
        if let Some(k) = self.snapshots {
            m.output.snapshot_every = k;
        }
    }
}

pub fn default_out(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

pub fn cli_run(path: &Path, out: Option<PathBuf>, ov: &Overrides, quiet: bool) -> Result<RunSummary> {
    let mut manifest = RunManifest::load(path)?;
    ov.apply(&mut manifest);
    manifest.validate()?;
    let out = out.unwrap_or_else(|| default_out(path));
    let opts = RunOptions {
        out: Some(out),
        quiet,
        base_dir: path.parent().map(Path::to_path_buf),
    };
    let summary = simulate(&manifest, &opts)?;
    if !quiet {
        println!("{}", summary.verify);
    }
    summary.verify.clone().into_result()?;
    Ok(summary)
}

pub fn read_rows(path: &Path) -> Result<Vec<DiagnosticsRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| config(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<DiagnosticsRow>, _>>()
        .map_err(|e| config(format!("{}: {e}", path.display())))
}

/// Re-reads a finished run directory and re-evaluates every gate.
pub fn cli_verify(dir: &Path) -> Result<VerifyReport> {
    let manifest_path = dir.join("manifest.toml");
    if !manifest_path.is_file() {
        return Err(config(format!("{} has no manifest.toml", dir.display())));
    }
    let manifest = RunManifest::load(&manifest_path)?;
    let rows = read_rows(&dir.join("diagnostics.csv"))?;
    let report = evaluate_gates(&manifest, &rows)?;
    println!("{report}");
    report.into_result()
}

// ---------------------------------------------------------------------------
// Delta sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseManifest {
    Path(PathBuf),
    Inline(Box<RunManifest>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Strictly decreasing cutoffs.
    pub deltas: Vec<f64>,
    pub base: BaseManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub max_overshoot: f64,
    pub max_entropy: f64,
    /// `||phi_delta - phi_next||_2` at the final time, `next` being the
    /// following (smaller) cutoff.
    pub terminal_l2_to_next: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub gates: VerifyReport,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>14} {:>14} {:>14}", "delta", "max overshoot", "max int G", "l2 to next")?;
        for r in &self.rows {
            let next = r
                .terminal_l2_to_next
                .map_or("-".to_string(), |v| format!("{v:.6e}"));
            writeln!(
                f,
                "{:>10.1e} {:>14.6e} {:>14.6e} {:>14}",
                r.delta, r.max_overshoot, r.max_entropy, next
            )?;
        }
        write!(f, "{}", self.gates)
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<(Self, RunManifest)> {
        let text = fs::read_to_string(path)
            .map_err(AppError::io(format!("reading {}", path.display())))?;
        let spec: SweepSpec = toml::from_str(&text).map_err(config)?;
        let base = match &spec.base {
            BaseManifest::Inline(m) => (**m).clone(),
            BaseManifest::Path(p) => {
                let full = path.parent().map_or(p.clone(), |d| d.join(p));
                RunManifest::load(&full)?
            }
        };
        spec.validate()?;
        Ok((spec, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(config("sweep needs at least one delta"));
        }
        if self.deltas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(config("sweep deltas must be strictly decreasing"));
        }
        Ok(())
    }
}

fn l2_distance(a: &ScalarField, b: &ScalarField) -> f64 {
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    (s * a.grid.cell_area()).sqrt()
}

/// Runs every cutoff of the sweep in order, sub-run `k` going to
/// `out/delta_k`. Monotonicity gates are applied only to degenerate
/// mobilities with at least two cutoffs.
pub fn sweep_delta(
    spec: &SweepSpec,
    base: &RunManifest,
    out: Option<&Path>,
    quiet: bool,
) -> Result<SweepReport> {
    spec.validate()?;
    let mut summaries = Vec::with_capacity(spec.deltas.len());
    for (k, &delta) in spec.deltas.iter().enumerate() {
        let mut m = base.clone();
        m.scheme.delta = delta;
        let opts = RunOptions {
            out: out.map(|d| d.join(format!("delta_{k}"))),
            quiet,
            base_dir: None,
        };
        if !quiet {
            eprintln!("sweep: delta = {delta:e}");
        }
        let s = simulate(&m, &opts)?;
        s.verify.clone().into_result()?;
        summaries.push(s);
    }
    let rows: Vec<SweepRow> = summaries
        .iter()
        .enumerate()
        .map(|(k, s)| SweepRow {
            delta: spec.deltas[k],
            max_overshoot: s.max_overshoot(),
            max_entropy: s.max_entropy(),
            terminal_l2_to_next: summaries
                .get(k + 1)
                .map(|n| l2_distance(&s.final_state.phi, &n.final_state.phi)),
        })
        .collect();

    let mut gates = VerifyReport::default();
    let degenerate = base.coefficient_set().mobility.is_degenerate();
    if rows.len() < 2 {
        gates.notes.push("single cutoff: nothing to compare".into());
    } else if !degenerate {
        gates
            .notes
            .push("non-degenerate mobility: overshoot need not shrink with delta, assertions skipped".into());
    } else {
        let rises = rows
            .windows(2)
            .map(|w| w[1].max_overshoot - w[0].max_overshoot)
            .fold(0.0, f64::max);
        gates
            .gates
            .push(Gate::at_most("overshoot non-increasing", rises, 0.0));
        let d: Vec<f64> = rows.iter().filter_map(|r| r.terminal_l2_to_next).collect();
        let rises = d.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        gates
            .gates
            .push(Gate::at_most("terminal differences non-increasing", rises, 0.0));
        let hi = rows.iter().map(|r| r.max_entropy).fold(f64::MIN, f64::max);
        let lo = rows.iter().map(|r| r.max_entropy).fold(f64::MAX, f64::min);
        gates.gates.push(Gate::at_most(
            "entropy spread",
            if lo > 0.0 { hi / lo } else { f64::INFINITY },
            gates::ENTROPY_RATIO,
        ));
    }
    let report = SweepReport { rows, gates };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(AppError::io(format!("creating {}", dir.display())))?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(|e| config(e))?;
        for r in &report.rows {
            w.serialize(r).map_err(csv_io)?;
        }
        w.flush().map_err(AppError::io("flushing sweep.csv"))?;
        fs::write(dir.join("verify.txt"), format!("{}\n", report.gates))
            .map_err(AppError::io("writing verify.txt"))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Manufactured-solution order study
// ---------------------------------------------------------------------------

fn default_grids() -> Vec<usize> {
    vec![32, 48, 64, 96]
}

fn default_min_order() -> f64 {
    1.9
}

fn default_krylov() -> KrylovConfig {
    KrylovConfig {
        method: solver::KrylovMethod::Cg,
        tol: 1e-12,
        max_iter: 5000,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmsSpec {
    #[serde(default = "default_grids")]
    pub grids: Vec<usize>,
    pub length: f64,
    pub bc: Boundary,
    pub t_end: f64,
    /// `dt = dt_scale h^2`.
    pub dt_scale: f64,
    #[serde(default = "default_min_order")]
    pub min_order: f64,
    #[serde(default = "default_krylov")]
    pub krylov: KrylovConfig,
    pub coefficients: CoefficientsSpec,
    /// Upwind transport study; reported, never gated.
    #[serde(default)]
    pub transport: Option<TransportSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    pub velocity: [f64; 2],
    pub t_end: f64,
    /// `dt = cfl h / |u|_max`.
    pub cfl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsRow {
    pub block: String,
    pub n: usize,
    pub h: f64,
    pub error: f64,
    /// Order against the previous grid of the same block.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsReport {
    pub rows: Vec<MmsRow>,
    /// Least-squares slope of `log e` against `log h` per block.
    pub fitted: Vec<(String, f64)>,
    pub gates: VerifyReport,
}

impl MmsReport {
    pub fn fitted_order(&self, block: &str) -> Option<f64> {
        self.fitted.iter().find(|(b, _)| b == block).map(|(_, s)| *s)
    }
}

impl fmt::Display for MmsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>12} {:>14} {:>7}", "block", "n", "h", "L2 error", "order")?;
        for r in &self.rows {
            let o = r.order.map_or("-".to_string(), |o| format!("{o:.3}"));
            writeln!(f, "{:<10} {:>5} {:>12.5e} {:>14.6e} {:>7}", r.block, r.n, r.h, r.error, o)?;
        }
        for (b, s) in &self.fitted {
            writeln!(f, "fitted order {b}: {s:.3}")?;
        }
        write!(f, "{}", self.gates)
    }
}

fn fitted_slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn l2_error(grid: &Grid, v: &[f64], exact: impl Fn(f64, f64) -> f64) -> f64 {
    let mut s = 0.0;
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let d = v[grid.index(i, j)] - exact(grid.x(i), grid.y(j));
            s += d * d;
        }
    }
    (s * grid.cell_area()).sqrt()
}

impl MmsSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(AppError::io(format!("reading {}", path.display())))?;
        let spec: MmsSpec = toml::from_str(&text).map_err(config)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.len() < 2 {
            return Err(config("an order study needs at least two grids"));
        }
        if !(self.length > 0.0 && self.t_end > 0.0 && self.dt_scale > 0.0) {
            return Err(config("length, t_end and dt_scale must be positive"));
        }
        let set = self.coefficients.build(1e-3);
        set.check().map_err(config)?;
        ManufacturedForcing::new(&set, self.length, self.length)?;
        Ok(())
    }

    fn scheme(&self, dt: f64) -> SchemeConfig {
        SchemeConfig {
            dt,
            krylov: self.krylov,
            ..SchemeConfig::default()
        }
    }

    /// The coupled phase / bulk-stress manufactured run on an `n x n` grid.
    pub fn manifest(&self, n: usize) -> RunManifest {
        let h = self.length / n as f64;
        let steps = (self.t_end / (self.dt_scale * h * h)).ceil();
        RunManifest {
            experiment: Experiment::Manufactured,
            t_end: self.t_end,
            grid: GridSpec {
                nx: n,
                ny: n,
                lx: self.length,
                ly: self.length,
                bc: self.bc,
            },
            scheme: self.scheme(self.t_end / steps),
            coefficients: self.coefficients,
            initial: InitialSpec {
                conformation: ConformationInit::Equilibrium,
                phase: PhaseInit::Manufactured,
            },
            output: OutputSpec {
                every: usize::MAX,
                snapshot_every: 0,
                vtk: false,
            },
        }
    }
}

/// Errors of the steady pressure-Poisson solve against
/// `psi = cos(k x) cos(2 k y)`.
pub fn poisson_error(grid: Grid) -> f64 {
    let k = 2.0 * PI / grid.lx();
    let l = 2.0 * PI / grid.ly();
    let psi = |x: f64, y: f64| (k * x).cos() * (2.0 * l * y).cos();
    let rhs = ScalarField::from_fn(grid, |x, y| -(k * k + 4.0 * l * l) * psi(x, y));
    let sol = PoissonSolver::new(grid).solve(&rhs.data);
    l2_error(&grid, &sol, psi)
}

/// Error of the viscous solve `u - V u = f` with variable viscosity
/// `eta = 2 + cos(kx) cos(ky) / 2` and `u = (sin kx sin ky, sin 2kx sin ky / 2)`,
/// both odd about every wall so that no-slip and periodic grids share it.
pub fn viscous_error(grid: Grid, cfg: &SchemeConfig) -> Result<f64> {
    let k = 2.0 * PI / grid.lx();
    let l = 2.0 * PI / grid.ly();
    // eta and its gradient
    let eta = |x: f64, y: f64| 2.0 + 0.5 * (k * x).cos() * (l * y).cos();
    let eta_x = |x: f64, y: f64| -0.5 * k * (k * x).sin() * (l * y).cos();
    let eta_y = |x: f64, y: f64| -0.5 * l * (k * x).cos() * (l * y).sin();
    // u = (a, b), first and second derivatives
    let a = |x: f64, y: f64| (k * x).sin() * (l * y).sin();
    let b = |x: f64, y: f64| 0.5 * (2.0 * k * x).sin() * (l * y).sin();
    let forcing = |x: f64, y: f64| -> (f64, f64) {
        let (sx, cx, sy, cy) = ((k * x).sin(), (k * x).cos(), (l * y).sin(), (l * y).cos());
        let (s2, c2) = ((2.0 * k * x).sin(), (2.0 * k * x).cos());
        let ax = k * cx * sy;
        let ay = l * sx * cy;
        let axx = -k * k * sx * sy;
        let ayy = -l * l * sx * sy;
        let axy = k * l * cx * cy;
        let bx = k * c2 * sy;
        let by = 0.5 * l * s2 * cy;
        let bxx = -2.0 * k * k * s2 * sy;
        let byy = -0.5 * l * l * s2 * sy;
        let bxy = k * l * c2 * cy;
        let (e, ex, ey) = (eta(x, y), eta_x(x, y), eta_y(x, y));
        // div(eta D u), D u = (grad u + grad u^T) / 2
        let div_u_x = axx + bxy;
        let div_u_y = axy + byy;
        let vx = 0.5 * (e * (axx + ayy) + e * div_u_x + ex * (2.0 * ax) + ey * (ay + bx));
        let vy = 0.5 * (e * (bxx + byy) + e * div_u_y + ex * (bx + ay) + ey * (2.0 * by));
        (a(x, y) / cfg.dt - vx, b(x, y) / cfg.dt - vy)
    };
    let f = VectorField::from_fn(grid, forcing);
    let eta_n = ScalarField::from_fn(grid, eta);
    let (u, _) = solver::solve_viscous(&grid, &eta_n.data, &f.x, &f.y, None, cfg)
        .map_err(|source| AppError::Solver { t: 0.0, source })?;
    let ex = l2_error(&grid, &u.x, a);
    let ey = l2_error(&grid, &u.y, b);
    Ok((ex * ex + ey * ey).sqrt())
}

/// Upwind transport of a smooth profile by a constant velocity on a
/// periodic grid, with the diffusion switched off in effect.
pub fn transport_error(n: usize, length: f64, t: &TransportSpec, krylov: KrylovConfig) -> Result<f64> {
    let grid = Grid::square(n, length, Boundary::Periodic).map_err(config)?;
    let k = 2.0 * PI / length;
    let profile = |x: f64, y: f64| 0.5 + 0.25 * (k * x).sin() * (k * y).sin();
    let speed = t.velocity[0].abs().max(t.velocity[1].abs());
    let steps = (t.t_end * speed / (t.cfl * grid.hx())).ceil();
    let cfg = SchemeConfig {
        dt: t.t_end / steps,
        krylov,
        ..SchemeConfig::default()
    };
    let mut set = CoefficientSet::experiment_one(cfg.delta);
    set.mobility.kind = MobilityKind::RegularConstant { value: 1e-14 };
    set.potential.kind = PotentialKind::GinzburgLandau;
    let phi = ScalarField::from_fn(grid, profile);
    let mut state = State::from_phase(phi, 0.5f64.sqrt(), &set).map_err(config)?;
    state.u = VectorField::from_fn(grid, |_, _| (t.velocity[0], t.velocity[1]));
    let mut stepper = Stepper::new(grid, set, cfg)
        .map_err(config)?
        .with_mask(BlockMask::PHASE_ONLY);
    for _ in 0..steps as usize {
        state = stepper
            .advance(&state)
            .map_err(|source| AppError::Solver { t: state.t, source })?
            .0;
    }
    let (vx, vy) = (t.velocity[0] * state.t, t.velocity[1] * state.t);
    Ok(l2_error(&grid, &state.phi.data, |x, y| profile(x - vx, y - vy)))
}

pub fn mms(spec: &MmsSpec, quiet: bool) -> Result<MmsReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut push = |block: &str, n: usize, h: f64, error: f64| {
        let order = rows
            .iter()
            .rev()
            .find(|r: &&MmsRow| r.block == block)
            .map(|p| (p.error / error).ln() / (p.h / h).ln());
        if !quiet {
            eprintln!("mms {block:<10} n = {n:>4}  error = {error:.6e}");
        }
        rows.push(MmsRow {
            block: block.to_string(),
            n,
            h,
            error,
            order,
        });
    };
    for &n in &spec.grids {
        let m = spec.manifest(n);
        let grid = m.grid.build()?;
        let h = grid.hx();
        let s = simulate(&m, &RunOptions { quiet: true, ..Default::default() })?;
        let mf = ManufacturedForcing::new(&m.coefficient_set(), spec.length, spec.length)?;
        let t = s.final_state.t;
        push("phase", n, h, l2_error(&grid, &s.final_state.phi.data, |x, y| mf.phi_exact(t, x, y)));
        push("bulk", n, h, l2_error(&grid, &s.final_state.q.data, |x, y| mf.q_exact(t, x, y)));
        push("poisson", n, h, poisson_error(grid));
        push("viscous", n, h, viscous_error(grid, &spec.scheme(1.0))?);
        if let Some(t) = &spec.transport {
            push("transport", n, h, transport_error(n, spec.length, t, spec.krylov)?);
        }
    }
    let mut fitted = Vec::new();
    let mut gates = VerifyReport::default();
    for block in ["phase", "bulk", "poisson", "viscous", "transport"] {
        let (h, e): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.block == block)
            .map(|r| (r.h, r.error))
            .unzip();
        if h.len() < 2 {
            continue;
        }
        let slope = fitted_slope(&h, &e);
        fitted.push((block.to_string(), slope));
        if block == "transport" {
            gates
                .notes
                .push(format!("transport order {slope:.3} (first-order upwind, not gated)"));
        } else {
            gates.gates.push(Gate {
                name: format!("{block} order"),
                value: slope,
                limit: spec.min_order,
                passed: slope >= spec.min_order,
            });
        }
    }
    Ok(MmsReport { rows, fitted, gates })
}

pub fn cli_mms(path: &Path, out: Option<&Path>, quiet: bool) -> Result<MmsReport> {
    let spec = MmsSpec::load(path)?;
    let report = mms(&spec, quiet)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(AppError::io(format!("creating {}", dir.display())))?;
        let mut w = csv::Writer::from_path(dir.join("mms.csv")).map_err(config)?;
        for r in &report.rows {
            w.serialize(r).map_err(csv_io)?;
        }
        w.flush().map_err(AppError::io("flushing mms.csv"))?;
        fs::write(dir.join("verify.txt"), format!("{}\n", report.gates))
            .map_err(AppError::io("writing verify.txt"))?;
    }
    println!("{report}");
    report.clone().gates.into_result()?;
    Ok(report)
}

pub fn cli_sweep(path: &Path, out: Option<PathBuf>, ov: &Overrides, quiet: bool) -> Result<SweepReport> {
    let (spec, mut base) = SweepSpec::load(path)?;
    ov.apply(&mut base);
    base.validate()?;
    let out = out.unwrap_or_else(|| default_out(path));
    let report = sweep_delta(&spec, &base, Some(&out), quiet)?;
    println!("{report}");
    report.gates.clone().into_result()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flagship_manifest_round_trips_through_toml() {
        let m = RunManifest::flagship();
        let text = m.to_toml();
        assert_eq!(RunManifest::from_toml(&text).unwrap(), m);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunManifest::flagship().to_toml();
        text = text.replacen("[grid]", "[grid]\nnz = 4", 1);
        assert!(matches!(RunManifest::from_toml(&text), Err(AppError::Config(_))));
    }

    #[test]
    fn delta_outside_half_interval_is_a_config_error() {
        let mut m = RunManifest::flagship();
        m.scheme.delta = 0.7;
        let err = RunManifest::from_toml(&m.to_toml()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let g = Grid::square(16, 1.0, Boundary::Neumann).unwrap();
        let a = uniform_noise(g, 0.4, 1e-3, 7);
        let b = uniform_noise(g, 0.4, 1e-3, 7);
        let c = uniform_noise(g, 0.4, 1e-3, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|v| (v - 0.4).abs() <= 1e-3));
        // the stream is xoshiro256++ after SplitMix64 seeding
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        assert_eq!(a.data[0], 0.4 + 1e-3 * (2.0 * u - 1.0));
    }

    #[test]
    fn manufactured_forcing_needs_constant_coefficients() {
        let set = CoefficientSet::experiment_one(1e-3);
        assert!(ManufacturedForcing::new(&set, 1.0, 1.0).is_err());
    }

    fn tiny_run() -> RunManifest {
        let mut m = RunManifest::flagship();
        m.grid.nx = 12;
        m.grid.ny = 12;
        m.t_end = 0.05;
        m.output.every = 1;
        m
    }

    #[test]
    fn single_cutoff_sweep_has_no_gates() {
        let spec = SweepSpec {
            deltas: vec![1e-3],
            base: BaseManifest::Inline(Box::new(tiny_run())),
        };
        let r = sweep_delta(&spec, &tiny_run(), None, true).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.gates.gates.is_empty());
        assert_eq!(r.gates.notes.len(), 1);
        assert_eq!(r.rows[0].terminal_l2_to_next, None);
    }

    #[test]
    fn regular_mobility_sweep_only_notes() {
        let mut base = tiny_run();
        base.coefficients.mobility = MobilityKind::RegularConstant { value: 0.05 };
        let spec = SweepSpec {
            deltas: vec![1e-2, 1e-3],
            base: BaseManifest::Inline(Box::new(base.clone())),
        };
        let r = sweep_delta(&spec, &base, None, true).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.gates.gates.is_empty());
        assert!(r.gates.notes[0].contains("non-degenerate"));
        assert!(r.rows[0].terminal_l2_to_next.is_some());
    }

    #[test]
    fn sweep_rejects_unordered_cutoffs() {
        let spec = SweepSpec {
            deltas: vec![1e-3, 1e-2],
            base: BaseManifest::Inline(Box::new(tiny_run())),
        };
        assert_eq!(spec.validate().unwrap_err().exit_code(), 2);
    }

    proptest::proptest! {
        #[test]
        fn manifests_round_trip(
            nx in 8usize..200,
            ny in 8usize..200,
            lx in 1.0f64..100.0,
            dt in 1e-4f64..0.1,
            delta in 1e-6f64..0.4,
            seed in proptest::prelude::any::<u64>(),
            every in 1usize..1000,
            periodic in proptest::prelude::any::<bool>(),
        ) {
            let mut m = RunManifest::flagship();
            m.grid.nx = nx;
            m.grid.ny = ny;
            m.grid.lx = lx;
            m.grid.bc = if periodic { Boundary::Periodic } else { Boundary::Neumann };
            m.scheme.dt = dt;
            m.scheme.delta = delta;
            m.output.every = every;
            m.initial.phase = PhaseInit::UniformNoise { mean: 0.4, amplitude: 1e-3, seed };
            proptest::prop_assert_eq!(RunManifest::from_toml(&m.to_toml()).unwrap(), m);
        }
    }

    #[test]
    fn fitted_slope_recovers_power_law() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|v| 3.0 * v * v).collect();
        assert!((fitted_slope(&h, &e) - 2.0).abs() < 1e-12);
    }
}
