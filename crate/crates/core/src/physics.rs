//! Pointwise coefficient functions of the polymer-solvent mixture model.
//!
//! Everything here is a pure function of a scalar phase value. Callers map
//! these over fields. The degenerate mobilities and the singular
//! Flory-Huggins potential come with their cutoff regularizations: below
//! `delta` and above `1 - delta` the mobility is frozen at its endpoint
//! value and the convex part of the potential continues as the quadratic
//! Taylor polynomial taken at the cutoff.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("non-finite argument {0}")]
    NonFinite(f64),
    #[error("invalid coefficient configuration: {0}")]
    Config(String),
    #[error(
        "entropy quadrature did not converge at x = {x}: {panels} panels, last correction {correction:e}"
    )]
    Quadrature {
        x: f64,
        panels: usize,
        correction: f64,
    },
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::NonFinite(x))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.5 {
        Ok(())
    } else {
        Err(PhysicsError::Config(format!(
            "regularization cutoff delta = {delta} must lie in (0, 1/2)"
        )))
    }
}

// ---------------------------------------------------------------------------
// Potential
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialKind {
    /// `x ln x / n_p + (1-x) ln(1-x) / n_s + chi x (1-x)`.
    FloryHuggins { n_p: f64, n_s: f64, chi: f64 },
    /// `x^2 (1-x)^2`, split as `F1 = F - x(1-x)`, `F2 = x(1-x)`.
    GinzburgLandau,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub delta: f64,
}

/// Regularized potential and the pieces the convex-concave splitting needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialEval {
    pub value: f64,
    pub slope: f64,
    /// Second derivative of the (regularized) convex part.
    pub convex_curvature: f64,
    /// Second derivative of the concave part.
    pub concave_curvature: f64,
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        match self.kind {
            PotentialKind::FloryHuggins { n_p, n_s, chi } => {
                if !(n_p > 0.0 && n_s > 0.0 && n_p.is_finite() && n_s.is_finite()) {
                    return Err(PhysicsError::Config(format!(
                        "molecular weights must be positive, got n_p = {n_p}, n_s = {n_s}"
                    )));
                }
                if !chi.is_finite() {
                    return Err(PhysicsError::Config("chi must be finite".into()));
                }
            }
            PotentialKind::GinzburgLandau => {}
        }
        Ok(())
    }

    /// Unregularized convex part `(F1, F1', F1'')`, only meaningful inside (0, 1)
    /// for the logarithmic potential.
    fn convex_raw(&self, x: f64) -> (f64, f64, f64) {
        match self.kind {
            PotentialKind::FloryHuggins { n_p, n_s, .. } => {
                let y = 1.0 - x;
                (
                    x * x.ln() / n_p + y * y.ln() / n_s,
                    (x.ln() + 1.0) / n_p - (y.ln() + 1.0) / n_s,
                    1.0 / (n_p * x) + 1.0 / (n_s * y),
                )
            }
            PotentialKind::GinzburgLandau => {
                let w = x * (1.0 - x);
                (
                    w * w - w,
                    2.0 * w * (1.0 - 2.0 * x) - (1.0 - 2.0 * x),
                    12.0 * x * x - 12.0 * x + 4.0,
                )
            }
        }
    }

    fn concave(&self, x: f64) -> (f64, f64, f64) {
        let weight = match self.kind {
            PotentialKind::FloryHuggins { chi, .. } => chi,
            PotentialKind::GinzburgLandau => 1.0,
        };
        (
            weight * x * (1.0 - x),
            weight * (1.0 - 2.0 * x),
            -2.0 * weight,
        )
    }

    fn is_singular(&self) -> bool {
        matches!(self.kind, PotentialKind::FloryHuggins { .. })
    }

    /// Third derivative of the regularized convex part. Used to build
    /// manufactured forcing terms.
    pub fn convex_third_derivative(&self, x: f64) -> Result<f64> {
        check_finite(x)?;
        self.validate()?;
        Ok(match self.kind {
            PotentialKind::FloryHuggins { n_p, n_s, .. } => {
                if x <= self.delta || x >= 1.0 - self.delta {
                    0.0
                } else {
                    -1.0 / (n_p * x * x) + 1.0 / (n_s * (1.0 - x) * (1.0 - x))
                }
            }
            PotentialKind::GinzburgLandau => 24.0 * x - 12.0,
        })
    }
}

/// Evaluates the regularized potential at `x`.
///
/// On `[delta, 1 - delta]` the result equals the unregularized potential.
/// Outside, the convex part is the quadratic continuation from the cutoff
/// and the concave part is used as is. The Ginzburg-Landau potential is
/// regular and is never modified.
pub fn eval_potential(spec: &PotentialSpec, x: f64) -> Result<PotentialEval> {
    check_finite(x)?;
    spec.validate()?;
    let (f1, df1, d2f1) = if spec.is_singular() && (x < spec.delta || x > 1.0 - spec.delta) {
        let a = if x < spec.delta {
            spec.delta
        } else {
            1.0 - spec.delta
        };
        let (fa, dfa, d2fa) = spec.convex_raw(a);
        let s = x - a;
        (fa + dfa * s + 0.5 * d2fa * s * s, dfa + d2fa * s, d2fa)
    } else {
        spec.convex_raw(x)
    };
    let (f2, df2, d2f2) = spec.concave(x);
    Ok(PotentialEval {
        value: f1 + f2,
        slope: df1 + df2,
        convex_curvature: d2f1,
        concave_curvature: d2f2,
    })
}

// ---------------------------------------------------------------------------
// Mobility
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MobilityKind {
    /// `m = n = value` everywhere.
    RegularConstant { value: f64 },
    /// `m = n = (x(1-x))^exponent` on [0, 1], zero outside.
    SingleDegenerate { exponent: f64 },
    /// `n = x(1-x)`, `m = n^2` on [0, 1], zero outside.
    DoubleDegenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobilitySpec {
    pub kind: MobilityKind,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobilityEval {
    pub m: f64,
    pub dm: f64,
    pub n: f64,
}

impl MobilitySpec {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        match self.kind {
            MobilityKind::RegularConstant { value } => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(PhysicsError::Config(format!(
                        "constant mobility must lie in (0, 1], got {value}"
                    )));
                }
            }
            MobilityKind::SingleDegenerate { exponent } => {
                if !(exponent >= 1.0 && exponent.is_finite()) {
                    return Err(PhysicsError::Config(format!(
                        "degenerate mobility exponent must be >= 1, got {exponent}"
                    )));
                }
            }
            MobilityKind::DoubleDegenerate => {}
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        !matches!(self.kind, MobilityKind::RegularConstant { .. })
    }

    /// Unregularized `(m, m', n)`, extended by zero outside [0, 1].
    pub fn raw(&self, x: f64) -> (f64, f64, f64) {
        match self.kind {
            MobilityKind::RegularConstant { value } => (value, 0.0, value),
            _ if !(0.0..=1.0).contains(&x) => (0.0, 0.0, 0.0),
            MobilityKind::SingleDegenerate { exponent } => {
                let w = x * (1.0 - x);
                let m = w.powf(exponent);
                let dm = if w > 0.0 {
                    exponent * w.powf(exponent - 1.0) * (1.0 - 2.0 * x)
                } else {
                    0.0
                };
                (m, dm, m)
            }
            MobilityKind::DoubleDegenerate => {
                let w = x * (1.0 - x);
                (w * w, 2.0 * w * (1.0 - 2.0 * x), w)
            }
        }
    }

    /// `m(delta)` for the lower end, `m(1 - delta)` for the upper end.
    pub fn endpoint_mobility(&self, upper: bool) -> f64 {
        let x = if upper { 1.0 - self.delta } else { self.delta };
        self.raw(x).0
    }
}

/// Regularized mobility pair: `m_delta(x) = m(clamp(x, delta, 1 - delta))`.
pub fn eval_mobility(spec: &MobilitySpec, x: f64) -> Result<MobilityEval> {
    check_finite(x)?;
    spec.validate()?;
    let inside = x > spec.delta && x < 1.0 - spec.delta;
    let (m, dm, n) = spec.raw(x.clamp(spec.delta, 1.0 - spec.delta));
    Ok(MobilityEval {
        m,
        dm: if inside { dm } else { 0.0 },
        n,
    })
}

// ---------------------------------------------------------------------------
// Bulk-stress coupling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingKind {
    Constant {
        value: f64,
    },
    /// `A = 1/2 (1 + tanh(s [cot(pi phi*) - cot(pi x)]))`, or without the
    /// shift when `shifted = false` (range [-1/2, 1/2]). The argument is
    /// clamped to `[clamp, 1 - clamp]` before evaluating the cotangent.
    TanhCot {
        phi_star: f64,
        steepness: f64,
        shifted: bool,
        clamp: f64,
    },
}

impl CouplingKind {
    /// The published parameters with the [0, 1] shift.
    pub fn default_tanh_cot() -> Self {
        CouplingKind::TanhCot {
            phi_star: 0.4,
            steepness: 1.0e3,
            shifted: true,
            clamp: 1.0e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CouplingKind::Constant { value } if !value.is_finite() => {
                Err(PhysicsError::Config("coupling constant must be finite".into()))
            }
            CouplingKind::TanhCot {
                phi_star,
                steepness,
                clamp,
                ..
            } => {
                if !(phi_star > 0.0 && phi_star < 1.0) {
                    return Err(PhysicsError::Config(format!(
                        "phi_star = {phi_star} must lie in (0, 1)"
                    )));
                }
                if !steepness.is_finite() {
                    return Err(PhysicsError::Config("steepness must be finite".into()));
                }
                if !(clamp > 0.0 && clamp < 0.5) {
                    return Err(PhysicsError::Config(format!(
                        "cotangent clamp = {clamp} must lie in (0, 1/2)"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Interval on which `A / n` is probed in double-degenerate mode.
    fn probe_interval(&self) -> (f64, f64) {
        match *self {
            CouplingKind::TanhCot { clamp, .. } => (clamp, 1.0 - clamp),
            CouplingKind::Constant { .. } => (1.0e-6, 1.0 - 1.0e-6),
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar coefficient families (tau, h, eta)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarCoefficient {
    Constant { value: f64 },
    /// `1 / (scale * clamp(x, phi_min, 1)^2)`.
    InverseSquare { scale: f64, phi_min: f64 },
    /// `a + b x^2`.
    Quadratic { a: f64, b: f64 },
}

impl ScalarCoefficient {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarCoefficient::Constant { value } => value,
            ScalarCoefficient::InverseSquare { scale, phi_min } => {
                let y = x.clamp(phi_min, 1.0);
                1.0 / (scale * y * y)
            }
            ScalarCoefficient::Quadratic { a, b } => a + b * x * x,
        }
    }
}

// ---------------------------------------------------------------------------
// Coefficient set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSet {
    pub tau: ScalarCoefficient,
    pub h: ScalarCoefficient,
    pub eta: ScalarCoefficient,
    pub coupling: CouplingKind,
    pub mobility: MobilitySpec,
    pub potential: PotentialSpec,
    pub c0: f64,
    pub eps1: f64,
    pub eps2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingEval {
    pub a: f64,
    pub da: f64,
}

/// Bulk-coupling function and its derivative.
pub fn eval_coupling_a(set: &CoefficientSet, x: f64) -> Result<CouplingEval> {
    check_finite(x)?;
    set.coupling.validate()?;
    Ok(match set.coupling {
        CouplingKind::Constant { value } => CouplingEval { a: value, da: 0.0 },
        CouplingKind::TanhCot {
            phi_star,
            steepness,
            shifted,
            clamp,
        } => {
            let inside = x > clamp && x < 1.0 - clamp;
            let y = x.clamp(clamp, 1.0 - clamp);
            let cot = |v: f64| (PI * v).cos() / (PI * v).sin();
            let t = (steepness * (cot(phi_star) - cot(y))).tanh();
            let a = if shifted { 0.5 * (1.0 + t) } else { 0.5 * t };
            let da = if inside {
                let s = (PI * y).sin();
                0.5 * (1.0 - t * t) * steepness * PI / (s * s)
            } else {
                0.0
            };
            CouplingEval { a, da }
        }
    })
}

impl CoefficientSet {
    /// The parameter set of the published spinodal experiment, reduced to 2D.
    pub fn experiment_one(delta: f64) -> Self {
        CoefficientSet {
            tau: ScalarCoefficient::InverseSquare {
                scale: 5.0,
                phi_min: 0.05,
            },
            h: ScalarCoefficient::InverseSquare {
                scale: 5.0,
                phi_min: 0.05,
            },
            eta: ScalarCoefficient::Quadratic { a: 2.0, b: 1.0 },
            coupling: CouplingKind::default_tanh_cot(),
            mobility: MobilitySpec {
                kind: MobilityKind::DoubleDegenerate,
                delta,
            },
            potential: PotentialSpec {
                kind: PotentialKind::FloryHuggins {
                    n_p: 1.0,
                    n_s: 1.0,
                    chi: 28.0 / 11.0,
                },
                delta,
            },
            c0: 1.0,
            eps1: 0.1,
            eps2: 0.1,
        }
    }

    /// Configuration errors that make evaluation impossible.
    pub fn check(&self) -> Result<()> {
        self.potential.validate()?;
        self.mobility.validate()?;
        self.coupling.validate()?;
        for (name, v) in [("c0", self.c0), ("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhysicsError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Validation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    /// Violates a standing assumption of the model; runs must not start.
    Hard,
    /// Violates an assumption only needed for the degenerate-limit theory.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
    pub passed: bool,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn hard_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Hard)
    }

    pub fn passed(&self) -> bool {
        self.hard_failures().next().is_none()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let status = match (c.passed, c.severity) {
                (true, _) => "ok",
                (false, Severity::Hard) => "FAIL",
                (false, Severity::Soft) => "warn",
            };
            writeln!(f, "{status:>4}  {:<24} [{:.6e}, {:.6e}]", c.name, c.min, c.max)?;
        }
        for n in &self.notes {
            writeln!(f, "note  {n}")?;
        }
        Ok(())
    }
}

const VALIDATION_SAMPLES: usize = 10_000;
/// Upper limit treated as "bounded" for sampled coefficients.
const COEFFICIENT_CAP: f64 = 1.0e8;
/// Upper limit for the sampled ratios `A / n` and `A' / n`.
const RATIO_CAP: f64 = 1.0e3;

fn sample(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    (0..VALIDATION_SAMPLES)
        .map(move |k| lo + (hi - lo) * k as f64 / (VALIDATION_SAMPLES - 1) as f64)
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        if v.is_nan() {
            (f64::NAN, f64::NAN)
        } else {
            (lo.min(v), hi.max(v))
        }
    })
}

/// Samples every coefficient and reports observed ranges and violated
/// assumptions. Never fails; callers decide what is fatal.
pub fn validate_coefficients(set: &CoefficientSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = set.check() {
        report.checks.push(Check {
            name: "configuration",
            min: f64::NAN,
            max: f64::NAN,
            passed: false,
            severity: Severity::Hard,
        });
        report.notes.push(e.to_string());
        return report;
    }

    let mut positive_bounded = |name: &'static str, c: &ScalarCoefficient| {
        let (lo, hi) = range_of(sample(-0.5, 1.5).map(|x| c.eval(x)));
        report.checks.push(Check {
            name,
            min: lo,
            max: hi,
            passed: lo > 0.0 && hi.is_finite() && hi <= COEFFICIENT_CAP,
            severity: Severity::Hard,
        });
    };
    positive_bounded("tau positive bounded", &set.tau);
    positive_bounded("h positive bounded", &set.h);
    positive_bounded("eta positive bounded", &set.eta);

    for (label, c) in [("tau", &set.tau), ("h", &set.h), ("eta", &set.eta)] {
        if let ScalarCoefficient::InverseSquare { phi_min, .. } = c {
            report.notes.push(format!(
                "{label} is unbounded as phi -> 0; evaluated with phi clamped to [{phi_min}, 1]"
            ));
        }
    }

    let a_of = |x: f64| eval_coupling_a(set, x).expect("validated coupling");
    let (a_lo, a_hi) = range_of(sample(-0.5, 1.5).map(|x| a_of(x).a));
    report.checks.push(Check {
        name: "A non-negative",
        min: a_lo,
        max: a_hi,
        passed: a_lo >= 0.0,
        severity: Severity::Soft,
    });
    report.checks.push(Check {
        name: "A bounded",
        min: a_lo,
        max: a_hi,
        passed: a_hi.is_finite() && a_lo.is_finite(),
        severity: Severity::Hard,
    });
    let (da_lo, da_hi) = range_of(sample(-0.5, 1.5).map(|x| a_of(x).da));
    report.checks.push(Check {
        name: "A' bounded",
        min: da_lo,
        max: da_hi,
        passed: da_lo.is_finite() && da_hi.is_finite() && da_hi.abs().max(da_lo.abs()) <= COEFFICIENT_CAP,
        severity: Severity::Hard,
    });

    let mob = |x: f64| set.mobility.raw(x);
    let (m_lo, m_hi) = range_of(sample(-0.5, 1.5).map(|x| mob(x).0));
    let m_cap = match set.mobility.kind {
        MobilityKind::DoubleDegenerate => 1.0 / 16.0,
        _ => 1.0,
    };
    report.checks.push(Check {
        name: "mobility in [0, m2]",
        min: m_lo,
        max: m_hi,
        passed: m_lo >= 0.0 && m_hi <= m_cap,
        severity: Severity::Hard,
    });

    if matches!(set.mobility.kind, MobilityKind::DoubleDegenerate) {
        let (lo, hi) = set.coupling.probe_interval();
        let ratio = |f: &dyn Fn(f64) -> f64| {
            range_of(sample(lo, hi).map(|x| {
                let n = mob(x).2;
                (f(x) / n).abs()
            }))
        };
        let (r_lo, r_hi) = ratio(&|x| a_of(x).a);
        report.checks.push(Check {
            name: "A/n bounded",
            min: r_lo,
            max: r_hi,
            passed: r_hi.is_finite() && r_hi <= RATIO_CAP,
            severity: Severity::Soft,
        });
        let (r_lo, r_hi) = ratio(&|x| a_of(x).da);
        report.checks.push(Check {
            name: "A'/n bounded",
            min: r_lo,
            max: r_hi,
            passed: r_hi.is_finite() && r_hi <= RATIO_CAP,
            severity: Severity::Soft,
        });
    }
    report
}

// ---------------------------------------------------------------------------
// Entropy function
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyEvaluation {
    ClosedForm,
    /// Adaptive composite Gauss-Legendre starting from `panels` panels.
    Quadrature { panels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySpec {
    pub mobility: MobilitySpec,
    pub evaluation: EntropyEvaluation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEval {
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
}

impl EntropySpec {
    /// Closed form when one exists for the mobility, quadrature otherwise.
    pub fn for_mobility(mobility: MobilitySpec) -> Self {
        let evaluation = if closed_form_kind(&mobility).is_some() {
            EntropyEvaluation::ClosedForm
        } else {
            EntropyEvaluation::Quadrature { panels: 4 }
        };
        EntropySpec {
            mobility,
            evaluation,
        }
    }
}

#[derive(Clone, Copy)]
enum ClosedForm {
    Quadratic(f64),
    LinearLog,
    SquareLog,
}

fn closed_form_kind(m: &MobilitySpec) -> Option<ClosedForm> {
    match m.kind {
        MobilityKind::RegularConstant { value } => Some(ClosedForm::Quadratic(value)),
        MobilityKind::SingleDegenerate { exponent } if exponent == 1.0 => {
            Some(ClosedForm::LinearLog)
        }
        MobilityKind::SingleDegenerate { exponent } if exponent == 2.0 => {
            Some(ClosedForm::SquareLog)
        }
        MobilityKind::DoubleDegenerate => Some(ClosedForm::SquareLog),
        MobilityKind::SingleDegenerate { .. } => None,
    }
}

fn closed_form_inside(kind: ClosedForm, x: f64) -> (f64, f64, f64) {
    match kind {
        ClosedForm::Quadratic(m0) => {
            let s = x - 0.5;
            (0.5 * s * s / m0, s / m0, 1.0 / m0)
        }
        ClosedForm::LinearLog => {
            let y = 1.0 - x;
            (
                x * x.ln() + y * y.ln() + LN_2,
                x.ln() - y.ln(),
                1.0 / x + 1.0 / y,
            )
        }
        ClosedForm::SquareLog => {
            let y = 1.0 - x;
            let w = x * y;
            let l = (x / y).ln();
            ((2.0 * x - 1.0) * l, 2.0 * l + (2.0 * x - 1.0) / w, 1.0 / (w * w))
        }
    }
}

/// Regularized entropy `G_delta` with `G(1/2) = G'(1/2) = 0`, `G'' = 1/m_delta`.
pub fn eval_entropy(spec: &EntropySpec, x: f64) -> Result<EntropyEval> {
    check_finite(x)?;
    spec.mobility.validate()?;
    let delta = spec.mobility.delta;
    let (lo, hi) = (delta, 1.0 - delta);
    let inside = |y: f64| -> Result<(f64, f64, f64)> {
        match spec.evaluation {
            EntropyEvaluation::ClosedForm => {
                let kind = closed_form_kind(&spec.mobility).ok_or_else(|| {
                    PhysicsError::Config(format!(
                        "no closed-form entropy for mobility {:?}",
                        spec.mobility.kind
                    ))
                })?;
                Ok(closed_form_inside(kind, y))
            }
            EntropyEvaluation::Quadrature { panels } => quadrature_entropy(spec, y, panels),
        }
    };
    if matches!(spec.mobility.kind, MobilityKind::RegularConstant { .. }) || (lo..=hi).contains(&x) {
        let (g, dg, d2g) = inside(x)?;
        return Ok(EntropyEval { g, dg, d2g });
    }
    let a = if x < lo { lo } else { hi };
    let (ga, dga, _) = inside(a)?;
    // Beyond the cutoff m_delta is frozen, so G_delta is exactly quadratic.
    let d2 = 1.0 / spec.mobility.endpoint_mobility(x > hi);
    let s = x - a;
    Ok(EntropyEval {
        g: ga + dga * s + 0.5 * d2 * s * s,
        dg: dga + d2 * s,
        d2g: d2,
    })
}

const GAUSS_POINTS: usize = 10;

fn gauss_legendre() -> &'static [(f64, f64); GAUSS_POINTS] {
    static RULE: OnceLock<[(f64, f64); GAUSS_POINTS]> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GAUSS_POINTS;
        let mut rule = [(0.0, 0.0); GAUSS_POINTS];
        for (i, slot) in rule.iter_mut().enumerate() {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            *slot = (z, 2.0 / ((1.0 - z * z) * dp * dp));
        }
        rule
    })
}

fn gauss_panel(f: &dyn Fn(f64) -> (f64, f64), a: f64, b: f64) -> (f64, f64) {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    gauss_legendre().iter().fold((0.0, 0.0), |(s0, s1), &(z, w)| {
        let (v0, v1) = f(c + r * z);
        (s0 + w * r * v0, s1 + w * r * v1)
    })
}

/// Panel cap for the adaptive entropy quadrature.
const MAX_PANELS: usize = 1 << 16;

fn quadrature_entropy(spec: &EntropySpec, x: f64, panels: usize) -> Result<(f64, f64, f64)> {
    let inv_m = |s: f64| 1.0 / eval_mobility(&spec.mobility, s).map(|e| e.m).unwrap_or(f64::NAN);
    // G'(x) = int_{1/2}^x 1/m, G(x) = int_{1/2}^x (x - s)/m(s) ds.
    let integrand = |s: f64| {
        let w = inv_m(s);
        (w, (x - s) * w)
    };
    let (a, b) = (0.5, x);
    if a == b {
        return Ok((0.0, 0.0, inv_m(x)));
    }
    let panels = panels.max(1);
    let mut stack: Vec<(f64, f64, (f64, f64))> = Vec::new();
    let width = (b - a) / panels as f64;
    for k in 0..panels {
        let (p, q) = (a + width * k as f64, a + width * (k + 1) as f64);
        stack.push((p, q, gauss_panel(&integrand, p, q)));
    }
    let (mut dg, mut g) = (0.0, 0.0);
    let mut used = panels;
    let mut worst = 0.0f64;
    while let Some((p, q, coarse)) = stack.pop() {
        let mid = 0.5 * (p + q);
        let left = gauss_panel(&integrand, p, mid);
        let right = gauss_panel(&integrand, mid, q);
        let fine = (left.0 + right.0, left.1 + right.1);
        let err = (fine.0 - coarse.0).abs().max((fine.1 - coarse.1).abs());
        let scale = fine.0.abs().max(fine.1.abs()).max(1.0);
        if err <= 1e-15 * scale || (q - p).abs() < 1e-14 {
            dg += fine.0;
            g += fine.1;
        } else {
            used += 1;
            if used > MAX_PANELS {
                return Err(PhysicsError::Quadrature {
                    x,
                    panels: used,
                    correction: err.max(worst),
                });
            }
            worst = worst.max(err);
            stack.push((p, mid, left));
            stack.push((mid, q, right));
        }
    }
    Ok((g, dg, inv_m(x)))
}
