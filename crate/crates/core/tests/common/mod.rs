//! Dense matrix versions of the grid operators, assembled from stencils
//! written out here from scratch. Used to check the matrix-free blocks
//! against direct LU / SVD solves on small grids.

use nalgebra::{DMatrix, DVector};
use vpsim::fields::{Boundary, Grid};

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub periodic: bool,
}

impl Dense {
    pub fn new(g: &Grid) -> Self {
        Dense {
            nx: g.nx(),
            ny: g.ny(),
            hx: g.hx(),
            hy: g.hy(),
            periodic: g.bc() == Boundary::Periodic,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    /// One coordinate index, wrapped or reflected about the wall half a cell
    /// outside the first/last node. Returns the index and whether it was
    /// reflected.
    fn axis(&self, k: isize, n: usize) -> (usize, bool) {
        let n = n as isize;
        if self.periodic {
            return (k.rem_euclid(n) as usize, false);
        }
        if k < 0 {
            ((-1 - k) as usize, true)
        } else if k >= n {
            ((2 * n - 1 - k) as usize, true)
        } else {
            (k as usize, false)
        }
    }

    /// Node behind `(i, j)` and the sign a field of the given parity picks up.
    pub fn node(&self, i: isize, j: isize, odd: bool) -> (usize, f64) {
        let (ii, rx) = self.axis(i, self.nx);
        let (jj, ry) = self.axis(j, self.ny);
        let sign = if odd && (rx != ry) { -1.0 } else { 1.0 };
        (jj * self.nx + ii, sign)
    }

    fn add(&self, m: &mut DMatrix<f64>, row: usize, i: isize, j: isize, odd: bool, w: f64) {
        let (col, s) = self.node(i, j, odd);
        m[(row, col)] += s * w;
    }

    fn nodes(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (j * self.nx + i, i as isize, j as isize)))
    }

    pub fn laplacian(&self, odd: bool) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        let (ax, ay) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        for (r, i, j) in self.nodes() {
            self.add(&mut m, r, i + 1, j, odd, ax);
            self.add(&mut m, r, i - 1, j, odd, ax);
            self.add(&mut m, r, i, j + 1, odd, ay);
            self.add(&mut m, r, i, j - 1, odd, ay);
            m[(r, r)] -= 2.0 * (ax + ay);
        }
        m
    }

    pub fn ddx(&self, odd: bool) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (r, i, j) in self.nodes() {
            self.add(&mut m, r, i + 1, j, odd, 0.5 / self.hx);
            self.add(&mut m, r, i - 1, j, odd, -0.5 / self.hx);
        }
        m
    }

    pub fn ddy(&self, odd: bool) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (r, i, j) in self.nodes() {
            self.add(&mut m, r, i, j + 1, odd, 0.5 / self.hy);
            self.add(&mut m, r, i, j - 1, odd, -0.5 / self.hy);
        }
        m
    }

    /// `div(w grad f)` with `w` on faces taken as the mean of the two
    /// adjacent node values (even mirror) and compact face differences.
    pub fn weighted_laplacian(&self, odd: bool, w: &[f64]) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        let wat = |i: isize, j: isize| {
            let (k, _) = self.node(i, j, false);
            w[k]
        };
        for (r, i, j) in self.nodes() {
            let c = w[r];
            let faces = [
                (i + 1, j, 0.5 * (c + wat(i + 1, j)) / (self.hx * self.hx)),
                (i - 1, j, 0.5 * (c + wat(i - 1, j)) / (self.hx * self.hx)),
                (i, j + 1, 0.5 * (c + wat(i, j + 1)) / (self.hy * self.hy)),
                (i, j - 1, 0.5 * (c + wat(i, j - 1)) / (self.hy * self.hy)),
            ];
            for (a, b, k) in faces {
                self.add(&mut m, r, a, b, odd, k);
                m[(r, r)] -= k;
            }
        }
        m
    }

    /// First-order upwind `div(u f)` with face velocities averaged from the
    /// nodes (velocity mirrored oddly).
    pub fn upwind(&self, ux: &[f64], uy: &[f64], f: &[f64], odd: bool) -> DVector<f64> {
        let val = |v: &[f64], i: isize, j: isize, odd: bool| {
            let (k, s) = self.node(i, j, odd);
            s * v[k]
        };
        let flux_x = |i: isize, j: isize| {
            // face between i - 1 and i
            let uf = 0.5 * (val(ux, i - 1, j, true) + val(ux, i, j, true));
            uf * if uf > 0.0 { val(f, i - 1, j, odd) } else { val(f, i, j, odd) }
        };
        let flux_y = |i: isize, j: isize| {
            let vf = 0.5 * (val(uy, i, j - 1, true) + val(uy, i, j, true));
            vf * if vf > 0.0 { val(f, i, j - 1, odd) } else { val(f, i, j, odd) }
        };
        let mut out = DVector::zeros(self.len());
        for (r, i, j) in self.nodes() {
            out[r] = (flux_x(i + 1, j) - flux_x(i, j)) / self.hx + (flux_y(i, j + 1) - flux_y(i, j)) / self.hy;
        }
        out
    }
}

pub fn vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

pub fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.lu().solve(b).expect("nonsingular oracle system")
}

/// Minimum-norm solution of a singular symmetric system (the pressure
/// problem), dropping eigenvalues below `1e-10` of the largest.
pub fn solve_pinv(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = a.symmetric_eigen();
    let cut = 1e-10 * eig.eigenvalues.amax();
    let mut x = DVector::zeros(b.len());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > cut {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(b) / l);
        }
    }
    x
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
