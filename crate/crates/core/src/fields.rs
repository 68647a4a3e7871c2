//! Uniform cell-centred 2D grid, field containers and finite-difference
//! operators.
//!
//! Nodes sit at cell centres `x_i = (i + 1/2) hx`. Boundaries are handled
//! with implicit ghost nodes: periodic boxes wrap around, Neumann boxes
//! mirror the first interior node. Scalars and tensors mirror evenly
//! (zero normal derivative); velocity-like quantities mirror oddly so that
//! they vanish on the wall face. With that pairing the centred gradient and
//! divergence are exact negative adjoints of each other, and every
//! divergence-form update telescopes to zero total flux.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Neumann,
    Periodic,
}

/// Reflection symmetry used for the Neumann ghost node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    bc: Boundary,
}

/// Neighbour in one direction: storage index and whether it is a mirrored ghost.
#[derive(Clone, Copy)]
struct Nb {
    idx: usize,
    ghost: bool,
}

impl Nb {
    #[inline(always)]
    fn get(self, data: &[f64], parity: Parity) -> f64 {
        if self.ghost && parity == Parity::Odd {
            -data[self.idx]
        } else {
            data[self.idx]
        }
    }
}

pub const MIN_CELLS: usize = 8;

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, bc: Boundary) -> Result<Self, FieldError> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(FieldError::Grid(format!(
                "need at least {MIN_CELLS} cells per axis, got {nx} x {ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(FieldError::Grid(format!(
                "edge lengths must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Grid { nx, ny, lx, ly, bc })
    }

    pub fn square(n: usize, l: f64, bc: Boundary) -> Result<Self, FieldError> {
        Grid::new(n, n, l, l, bc)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn bc(&self) -> Boundary {
        self.bc
    }
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
    #[inline(always)]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    pub fn x(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hx()
    }
    pub fn y(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.hy()
    }

    #[inline(always)]
    fn fwd(&self, k: usize, n: usize) -> (usize, bool) {
        if k + 1 < n {
            (k + 1, false)
        } else if self.bc == Boundary::Periodic {
            (0, false)
        } else {
            (k, true)
        }
    }

    #[inline(always)]
    fn bwd(&self, k: usize, n: usize) -> (usize, bool) {
        if k > 0 {
            (k - 1, false)
        } else if self.bc == Boundary::Periodic {
            (n - 1, false)
        } else {
            (0, true)
        }
    }

    /// Visits every node with its four neighbours `[c, e, w, n, s]`,
    /// ghosts resolved according to `parity`.
    #[inline(always)]
    fn for_each_stencil(&self, data: &[f64], parity: Parity, mut f: impl FnMut(usize, [f64; 5])) {
        let nx = self.nx;
        for j in 0..self.ny {
            let (jn, gn) = self.fwd(j, self.ny);
            let (js, gs) = self.bwd(j, self.ny);
            for i in 0..nx {
                let (ie, ge) = self.fwd(i, nx);
                let (iw, gw) = self.bwd(i, nx);
                let k = j * nx + i;
                let e = Nb { idx: j * nx + ie, ghost: ge }.get(data, parity);
                let w = Nb { idx: j * nx + iw, ghost: gw }.get(data, parity);
                let n = Nb { idx: jn * nx + i, ghost: gn }.get(data, parity);
                let s = Nb { idx: js * nx + i, ghost: gs }.get(data, parity);
                f(k, [data[k], e, w, n, s]);
            }
        }
    }

    /// Value at a possibly out-of-range index pair, one ghost layer deep
    /// under Neumann, any distance under periodic.
    pub fn value_at(&self, data: &[f64], i: isize, j: isize, parity: Parity) -> f64 {
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let (ii, ri) = self.resolve(i, nx);
        let (jj, rj) = self.resolve(j, ny);
        let v = data[jj * self.nx + ii];
        if parity == Parity::Odd && (ri ^ rj) {
            -v
        } else {
            v
        }
    }

    fn resolve(&self, k: isize, n: isize) -> (usize, bool) {
        match self.bc {
            Boundary::Periodic => (k.rem_euclid(n) as usize, false),
            Boundary::Neumann => {
                // Mirror about the wall faces at -1/2 and n - 1/2.
                let period = 2 * n;
                let m = k.rem_euclid(period);
                if m < n {
                    (m as usize, false)
                } else {
                    ((period - 1 - m) as usize, true)
                }
            }
        }
    }

    /// Field extended by one ghost layer, `(nx + 2) x (ny + 2)`, row-major.
    pub fn padded(&self, data: &[f64], parity: Parity) -> Vec<f64> {
        let (px, py) = (self.nx + 2, self.ny + 2);
        let mut out = vec![0.0; px * py];
        for j in 0..py {
            for i in 0..px {
                out[j * px + i] = self.value_at(data, i as isize - 1, j as isize - 1, parity);
            }
        }
        out
    }

    /// Largest `|u|_inf dt / h` over both axes.
    pub fn cfl(&self, u: &VectorField, dt: f64) -> f64 {
        let ux = u.x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let uy = u.y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (ux * dt / self.hx()).max(uy * dt / self.hy())
    }
}

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Symmetric 2x2 tensor per node; only the three independent entries are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    pub grid: Grid,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }
    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField {
            grid,
            data: vec![value; grid.len()],
        }
    }
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                data.push(f(grid.x(i), grid.y(j)));
            }
        }
        ScalarField { grid, data }
    }
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self, FieldError> {
        if data.len() != grid.len() {
            return Err(FieldError::GridMismatch);
        }
        Ok(ScalarField { grid, data })
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn mean(&self) -> f64 {
        integrate(self) / self.grid.area()
    }
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        VectorField {
            grid,
            x: vec![0.0; grid.len()],
            y: vec![0.0; grid.len()],
        }
    }
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut v = Self::zeros(grid);
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let (a, b) = f(grid.x(i), grid.y(j));
                let k = grid.index(i, j);
                v.x[k] = a;
                v.y[k] = b;
            }
        }
        v
    }
    pub fn is_finite(&self) -> bool {
        all_finite(&self.x) && all_finite(&self.y)
    }
}

impl SymTensorField {
    pub fn zeros(grid: Grid) -> Self {
        Self::isotropic(grid, 0.0)
    }
    pub fn isotropic(grid: Grid, c: f64) -> Self {
        SymTensorField {
            grid,
            xx: vec![c; grid.len()],
            xy: vec![0.0; grid.len()],
            yy: vec![c; grid.len()],
        }
    }
    pub fn is_finite(&self) -> bool {
        all_finite(&self.xx) && all_finite(&self.xy) && all_finite(&self.yy)
    }
    pub fn trace(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            data: self.xx.iter().zip(&self.yy).map(|(a, b)| a + b).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Node-centred operators on raw component slices
// ---------------------------------------------------------------------------

/// Centred `d/dx` of one component.
pub fn ddx(grid: &Grid, f: &[f64], parity: Parity) -> Vec<f64> {
    let c = 0.5 / grid.hx();
    let mut out = vec![0.0; grid.len()];
    grid.for_each_stencil(f, parity, |k, [_, e, w, _, _]| out[k] = c * (e - w));
    out
}

/// Centred `d/dy` of one component.
pub fn ddy(grid: &Grid, f: &[f64], parity: Parity) -> Vec<f64> {
    let c = 0.5 / grid.hy();
    let mut out = vec![0.0; grid.len()];
    grid.for_each_stencil(f, parity, |k, [_, _, _, n, s]| out[k] = c * (n - s));
    out
}

/// Five-point Laplacian of one component.
pub fn laplacian_raw(grid: &Grid, f: &[f64], parity: Parity) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    laplacian_into(grid, f, parity, &mut out);
    out
}

pub fn laplacian_into(grid: &Grid, f: &[f64], parity: Parity, out: &mut [f64]) {
    let (ax, ay) = (1.0 / (grid.hx() * grid.hx()), 1.0 / (grid.hy() * grid.hy()));
    grid.for_each_stencil(f, parity, |k, [c, e, w, n, s]| {
        out[k] = ax * (e - 2.0 * c + w) + ay * (n - 2.0 * c + s);
    });
}

/// Centred divergence of `(vx, vy)` with the given ghost parity.
pub fn divergence_raw(grid: &Grid, vx: &[f64], vy: &[f64], parity: Parity) -> Vec<f64> {
    let (cx, cy) = (0.5 / grid.hx(), 0.5 / grid.hy());
    let mut out = vec![0.0; grid.len()];
    grid.for_each_stencil(vx, parity, |k, [_, e, w, _, _]| out[k] = cx * (e - w));
    grid.for_each_stencil(vy, parity, |k, [_, _, _, n, s]| out[k] += cy * (n - s));
    out
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    VectorField {
        grid: *g,
        x: ddx(g, &f.data, Parity::Even),
        y: ddy(g, &f.data, Parity::Even),
    }
}

pub fn divergence(v: &VectorField) -> ScalarField {
    ScalarField {
        grid: v.grid,
        data: divergence_raw(&v.grid, &v.x, &v.y, Parity::Odd),
    }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    ScalarField {
        grid: f.grid,
        data: laplacian_raw(&f.grid, &f.data, Parity::Even),
    }
}

/// Componentwise Laplacian of a velocity-like field (odd ghosts).
pub fn vector_laplacian(v: &VectorField) -> VectorField {
    VectorField {
        grid: v.grid,
        x: laplacian_raw(&v.grid, &v.x, Parity::Odd),
        y: laplacian_raw(&v.grid, &v.y, Parity::Odd),
    }
}

/// `div T` row by row, even ghosts (adjoint of the velocity gradient).
pub fn tensor_divergence(t: &SymTensorField) -> VectorField {
    let g = &t.grid;
    VectorField {
        grid: *g,
        x: divergence_raw(g, &t.xx, &t.xy, Parity::Even),
        y: divergence_raw(g, &t.xy, &t.yy, Parity::Even),
    }
}

pub fn laplacian_tensor(c: &SymTensorField) -> SymTensorField {
    let g = &c.grid;
    SymTensorField {
        grid: *g,
        xx: laplacian_raw(g, &c.xx, Parity::Even),
        xy: laplacian_raw(g, &c.xy, Parity::Even),
        yy: laplacian_raw(g, &c.yy, Parity::Even),
    }
}

/// Cell-weighted sum of one component.
pub fn integrate_raw(grid: &Grid, f: &[f64]) -> f64 {
    f.iter().sum::<f64>() * grid.cell_area()
}

pub fn inner_raw(grid: &Grid, f: &[f64], g: &[f64]) -> f64 {
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * grid.cell_area()
}

pub fn integrate(f: &ScalarField) -> f64 {
    integrate_raw(&f.grid, &f.data)
}

pub fn inner(f: &ScalarField, g: &ScalarField) -> f64 {
    inner_raw(&f.grid, &f.data, &g.data)
}

pub fn inner_vector(u: &VectorField, v: &VectorField) -> f64 {
    inner_raw(&u.grid, &u.x, &v.x) + inner_raw(&u.grid, &u.y, &v.y)
}

/// Frobenius inner product of symmetric tensors (off-diagonal counted twice).
pub fn inner_tensor(a: &SymTensorField, b: &SymTensorField) -> f64 {
    let g = &a.grid;
    inner_raw(g, &a.xx, &b.xx) + 2.0 * inner_raw(g, &a.xy, &b.xy) + inner_raw(g, &a.yy, &b.yy)
}

// ---------------------------------------------------------------------------
// Face-centred quantities
// ---------------------------------------------------------------------------

/// Values on cell faces. `x` holds the `(nx + 1) x ny` faces normal to x,
/// face `i` sitting between nodes `i - 1` and `i`; `y` likewise holds
/// `nx x (ny + 1)` faces. Under periodic boundaries faces `0` and `nx`
/// coincide and carry equal values.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: Grid) -> Self {
        FaceField {
            grid,
            x: vec![0.0; (grid.nx() + 1) * grid.ny()],
            y: vec![0.0; grid.nx() * (grid.ny() + 1)],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FaceField {
            grid: self.grid,
            x: self.x.iter().map(|&v| f(v)).collect(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &FaceField, f: impl Fn(f64, f64) -> f64) -> Self {
        FaceField {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(&a, &b)| f(a, b)).collect(),
            y: self.y.iter().zip(&other.y).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Quadrature over faces. Each interior face owns an `hx hy` dual
    /// cell; Neumann wall faces own half of one; the duplicated periodic
    /// seam is counted once. This is the weighting under which
    /// `-<f, face_div(k face_grad f)> = integrate(k |face_grad f|^2)`.
    pub fn integrate(&self) -> f64 {
        let g = &self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        // (first, last) face weights along each axis.
        let (w0, wn) = match g.bc() {
            Boundary::Periodic => (0.0, 1.0),
            Boundary::Neumann => (0.5, 0.5),
        };
        let mut sx = 0.0;
        for row in self.x.chunks_exact(nx + 1) {
            sx += w0 * row[0] + row[1..nx].iter().sum::<f64>() + wn * row[nx];
        }
        let mut sy = 0.0;
        for (j, row) in self.y.chunks_exact(nx).enumerate() {
            let w = match j {
                0 => w0,
                j if j == ny => wn,
                _ => 1.0,
            };
            sy += w * row.iter().sum::<f64>();
        }
        (sx + sy) * g.cell_area()
    }
}

/// Arithmetic mean of the two adjacent node values on every face (even ghosts).
pub fn face_mean(grid: &Grid, f: &[f64]) -> FaceField {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = FaceField::zeros(*grid);
    for j in 0..ny {
        for i in 0..=nx {
            let a = grid.value_at(f, i as isize - 1, j as isize, Parity::Even);
            let b = grid.value_at(f, i as isize, j as isize, Parity::Even);
            out.x[j * (nx + 1) + i] = 0.5 * (a + b);
        }
    }
    for j in 0..=ny {
        for i in 0..nx {
            let a = grid.value_at(f, i as isize, j as isize - 1, Parity::Even);
            let b = grid.value_at(f, i as isize, j as isize, Parity::Even);
            out.y[j * nx + i] = 0.5 * (a + b);
        }
    }
    out
}

/// Compact difference across every face.
pub fn face_gradient(grid: &Grid, f: &[f64], parity: Parity) -> FaceField {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut out = FaceField::zeros(*grid);
    for j in 0..ny {
        for i in 0..=nx {
            let a = grid.value_at(f, i as isize - 1, j as isize, parity);
            let b = grid.value_at(f, i as isize, j as isize, parity);
            out.x[j * (nx + 1) + i] = (b - a) / hx;
        }
    }
    for j in 0..=ny {
        for i in 0..nx {
            let a = grid.value_at(f, i as isize, j as isize - 1, parity);
            let b = grid.value_at(f, i as isize, j as isize, parity);
            out.y[j * nx + i] = (b - a) / hy;
        }
    }
    out
}

/// Net outflow per unit area of a face flux.
pub fn face_divergence(flux: &FaceField) -> Vec<f64> {
    let g = &flux.grid;
    let (nx, ny) = (g.nx(), g.ny());
    let (hx, hy) = (g.hx(), g.hy());
    let mut out = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            out[j * nx + i] = (flux.x[j * (nx + 1) + i + 1] - flux.x[j * (nx + 1) + i]) / hx
                + (flux.y[(j + 1) * nx + i] - flux.y[j * nx + i]) / hy;
        }
    }
    out
}

/// `face_div(k face_grad f)` without materializing the face gradient.
pub fn weighted_laplacian(grid: &Grid, f: &[f64], parity: Parity, k: &FaceField) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    weighted_laplacian_into(grid, f, parity, k, &mut out);
    out
}

pub fn weighted_laplacian_into(grid: &Grid, f: &[f64], parity: Parity, k: &FaceField, out: &mut [f64]) {
    let nx = grid.nx();
    let (ax, ay) = (1.0 / (grid.hx() * grid.hx()), 1.0 / (grid.hy() * grid.hy()));
    grid.for_each_stencil(f, parity, |idx, [c, e, w, n, s]| {
        let (i, j) = (idx % nx, idx / nx);
        let kw = k.x[j * (nx + 1) + i];
        let ke = k.x[j * (nx + 1) + i + 1];
        let ks = k.y[j * nx + i];
        let kn = k.y[(j + 1) * nx + i];
        out[idx] = ax * (ke * (e - c) - kw * (c - w)) + ay * (kn * (n - c) - ks * (c - s));
    });
}

/// Conservative first-order upwind approximation of `div(u f)`.
///
/// Face velocities are means of the adjacent nodal velocities (odd ghosts),
/// so they vanish on Neumann walls and the update conserves `integrate(f)`.
pub fn upwind_convection(u: &VectorField, f: &[f64], parity: Parity) -> Vec<f64> {
    let grid = &u.grid;
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut flux = FaceField::zeros(*grid);
    for j in 0..ny {
        for i in 0..=nx {
            let (il, ir, jj) = (i as isize - 1, i as isize, j as isize);
            let uf = 0.5
                * (grid.value_at(&u.x, il, jj, Parity::Odd) + grid.value_at(&u.x, ir, jj, Parity::Odd));
            let up = if uf > 0.0 {
                grid.value_at(f, il, jj, parity)
            } else {
                grid.value_at(f, ir, jj, parity)
            };
            flux.x[j * (nx + 1) + i] = uf * up;
        }
    }
    for j in 0..=ny {
        for i in 0..nx {
            let (ii, jl, jr) = (i as isize, j as isize - 1, j as isize);
            let vf = 0.5
                * (grid.value_at(&u.y, ii, jl, Parity::Odd) + grid.value_at(&u.y, ii, jr, Parity::Odd));
            let up = if vf > 0.0 {
                grid.value_at(f, ii, jl, parity)
            } else {
                grid.value_at(f, ii, jr, parity)
            };
            flux.y[j * nx + i] = vf * up;
        }
    }
    face_divergence(&flux)
}

/// Values of `f` at the departure points `x - dt u(x)` by bilinear
/// interpolation. Not conservative.
pub fn semi_lagrangian_departure(u: &VectorField, f: &[f64], parity: Parity, dt: f64) -> Vec<f64> {
    let grid = &u.grid;
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let k = grid.index(i, j);
            let sx = i as f64 - dt * u.x[k] / hx;
            let sy = j as f64 - dt * u.y[k] / hy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - fx, sy - fy);
            let (i0, j0) = (fx as isize, fy as isize);
            let v = |a: isize, b: isize| grid.value_at(f, a, b, parity);
            out[k] = (1.0 - ty) * ((1.0 - tx) * v(i0, j0) + tx * v(i0 + 1, j0))
                + ty * ((1.0 - tx) * v(i0, j0 + 1) + tx * v(i0 + 1, j0 + 1));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"VPSF1";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: Grid,
    pub name: String,
    pub components: Vec<Vec<f64>>,
}

/// Binary layout (little-endian): magic, nx u32, ny u32, hx f64, hy f64,
/// bc u8 (0 neumann, 1 periodic), name length u16, UTF-8 name,
/// component count u8, then per node (row-major, j outer) all components.
pub fn write_snapshot<W: Write>(
    mut w: W,
    grid: &Grid,
    name: &str,
    components: &[&[f64]],
) -> Result<(), FieldError> {
    if components.is_empty() || components.len() > u8::MAX as usize {
        return Err(FieldError::Format("component count must be 1..=255".into()));
    }
    if components.iter().any(|c| c.len() != grid.len()) {
        return Err(FieldError::GridMismatch);
    }
    let name_len = u16::try_from(name.len())
        .map_err(|_| FieldError::Format("field name too long".into()))?;
    let mut buf = Vec::with_capacity(40 + name.len() + 8 * grid.len() * components.len());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&(grid.nx() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.ny() as u32).to_le_bytes());
    buf.extend_from_slice(&grid.hx().to_le_bytes());
    buf.extend_from_slice(&grid.hy().to_le_bytes());
    buf.push(match grid.bc() {
        Boundary::Neumann => 0,
        Boundary::Periodic => 1,
    });
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(components.len() as u8);
    for k in 0..grid.len() {
        for c in components {
            buf.extend_from_slice(&c[k].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<Snapshot, FieldError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], FieldError> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| FieldError::Format("truncated snapshot".into()))?;
        pos += n;
        Ok(s)
    };
    if take(5)? != SNAPSHOT_MAGIC {
        return Err(FieldError::Format("bad magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    let nx = u32_at(take(4)?);
    let ny = u32_at(take(4)?);
    let hx = f64_at(take(8)?);
    let hy = f64_at(take(8)?);
    let bc = match take(1)?[0] {
        0 => Boundary::Neumann,
        1 => Boundary::Periodic,
        b => return Err(FieldError::Format(format!("unknown boundary code {b}"))),
    };
    let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(take(name_len)?.to_vec())
        .map_err(|_| FieldError::Format("field name is not UTF-8".into()))?;
    let ncomp = take(1)?[0] as usize;
    let grid = Grid::new(nx, ny, hx * nx as f64, hy * ny as f64, bc)?;
    let mut components = vec![Vec::with_capacity(grid.len()); ncomp];
    for _ in 0..grid.len() {
        for c in components.iter_mut() {
            c.push(f64_at(take(8)?));
        }
    }
    Ok(Snapshot {
        grid,
        name,
        components,
    })
}

/// Legacy ASCII VTK, STRUCTURED_POINTS. Two components are written as a
/// vector (zero z), anything else as one scalar array per component.
pub fn write_vtk<W: Write>(
    mut w: W,
    grid: &Grid,
    name: &str,
    components: &[&[f64]],
) -> Result<(), FieldError> {
    if components.iter().any(|c| c.len() != grid.len()) {
        return Err(FieldError::GridMismatch);
    }
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{name}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} 1", grid.nx(), grid.ny())?;
    writeln!(w, "ORIGIN {} {} 0", 0.5 * grid.hx(), 0.5 * grid.hy())?;
    writeln!(w, "SPACING {} {} 1", grid.hx(), grid.hy())?;
    writeln!(w, "POINT_DATA {}", grid.len())?;
    if components.len() == 2 {
        writeln!(w, "VECTORS {name} double")?;
        for k in 0..grid.len() {
            writeln!(w, "{} {} 0", components[0][k], components[1][k])?;
        }
    } else {
        for (c, data) in components.iter().enumerate() {
            let label = if components.len() == 1 {
                name.to_string()
            } else {
                format!("{name}_{c}")
            };
            writeln!(w, "SCALARS {label} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in data.iter() {
                writeln!(w, "{v}")?;
            }
        }
    }
    Ok(())
}
