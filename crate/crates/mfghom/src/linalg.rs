//! Sparse assembly, a banded LU for periodic stencil matrices, and small dense helpers.
//!
//! Periodic stencils couple node `0` with node `n-1`. Storing the unknowns in the folded
//! order `0, n-1, 1, n-2, ...` puts every such wrap next to the diagonal, so a stencil of
//! half-width `s` has bandwidth at most `2s` in 1-D (and `2s` times the axis length in 2-D).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::torus::TorusGrid;

/// Row-wise sparse matrix used for assembly.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        SparseMatrix { n, rows: vec![Vec::new(); n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.add(i, i, 1.0);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        match row.iter_mut().find(|(c, _)| *c == j) {
            Some(e) => e.1 += v,
            None => row.push((j, v)),
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &SparseMatrix) -> SparseMatrix {
        let mut out = self.clone();
        for (i, row) in other.rows.iter().enumerate() {
            for &(j, v) in row {
                out.add(i, j, s * v);
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| (j, s * v)).collect())
            .collect();
        SparseMatrix { n: self.n, rows }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = Self::zeros(self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                t.add(j, i, v);
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                d[(i, j)] += v;
            }
        }
        d
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Position of each flat grid index in the folded ordering.
pub fn folded_positions(grid: &TorusGrid) -> Vec<usize> {
    let n = grid.n_axis();
    let fold = |i: usize| if i <= (n - 1) / 2 { 2 * i } else { 2 * (n - 1 - i) + 1 };
    (0..grid.len())
        .map(|idx| {
            let m = grid.multi(idx);
            if grid.dim() == 1 {
                fold(m[0])
            } else {
                fold(m[1]) * n + fold(m[0])
            }
        })
        .collect()
}

/// LU factorization with partial pivoting of a banded matrix.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    width: usize,
    pos: Vec<usize>,
    u: Vec<f64>,
    mult: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    /// Factor `a` after reordering its unknowns to positions `pos`.
    pub fn factor(a: &SparseMatrix, pos: Vec<usize>) -> Result<Self> {
        let n = a.n();
        let (mut kl, mut ku) = (0usize, 0usize);
        for i in 0..n {
            for &(j, _) in a.row(i) {
                let (pi, pj) = (pos[i], pos[j]);
                if pi > pj {
                    kl = kl.max(pi - pj);
                } else {
                    ku = ku.max(pj - pi);
                }
            }
        }
        let width = 2 * kl + ku + 1;
        let mut u = vec![0.0; n * width];
        // row r holds columns r-kl ..= r+kl+ku
        let at = |r: usize, c: usize| r * width + (c + kl - r);
        for i in 0..n {
            for &(j, v) in a.row(i) {
                u[at(pos[i], pos[j])] += v;
            }
        }
        let mut mult = vec![0.0; n * kl.max(1)];
        let mut piv = vec![0; n];
        let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let last = (i + kl).min(n - 1);
            let mut p = i;
            let mut best = u[at(i, i)].abs();
            for r in i + 1..=last {
                let v = u[at(r, i)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= scale * 1e-300 || best == 0.0 {
                return Err(Error::Singular(format!("zero pivot at row {i}")));
            }
            piv[i] = p;
            let cmax = (i + kl + ku).min(n - 1);
            if p != i {
                for c in i..=cmax {
                    u.swap(at(i, c), at(p, c));
                }
            }
            let d = u[at(i, i)];
            for r in i + 1..=last {
                let l = u[at(r, i)] / d;
                mult[i * kl + (r - i - 1)] = l;
                u[at(r, i)] = 0.0;
                if l != 0.0 {
                    for c in i + 1..=cmax {
                        let s = u[at(i, c)];
                        u[at(r, c)] -= l * s;
                    }
                }
            }
        }
        Ok(BandedLu { n, kl, width, pos, u, mult, piv })
    }

    /// Factor a matrix on a torus grid using the folded ordering.
    pub fn factor_on(a: &SparseMatrix, grid: &TorusGrid) -> Result<Self> {
        Self::factor(a, folded_positions(grid))
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, w) = (self.n, self.kl, self.width);
        let mut y = vec![0.0; n];
        for (i, &v) in b.iter().enumerate() {
            y[self.pos[i]] = v;
        }
        for i in 0..n {
            let p = self.piv[i];
            if p != i {
                y.swap(i, p);
            }
            let yi = y[i];
            for r in i + 1..=(i + kl).min(n - 1) {
                y[r] -= self.mult[i * kl + (r - i - 1)] * yi;
            }
        }
        let ku_all = w - kl - 1;
        for i in (0..n).rev() {
            let base = i * w + kl - i;
            let mut s = y[i];
            for c in i + 1..=(i + ku_all).min(n - 1) {
                s -= self.u[base + c] * y[c];
            }
            y[i] = s / self.u[base + i];
        }
        (0..n).map(|i| y[self.pos[i]]).collect()
    }
}

/// Dense LU wrapper returning a library error on singular systems.
pub struct DenseLu {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseLu {
    pub fn factor(a: DMatrix<f64>) -> Result<Self> {
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("dense LU".into()));
        }
        Ok(DenseLu { lu })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        self.lu
            .solve(&rhs)
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| Error::Singular("dense solve".into()))
    }

    /// Estimate of the smallest eigenvalue magnitude by a few steps of inverse iteration.
    pub fn smallest_eigen_estimate(&self, n: usize, steps: usize) -> f64 {
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i * 7 + 3) % 11) as f64).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let mut est = f64::INFINITY;
        for _ in 0..steps {
            let y = match self.solve(&x) {
                Ok(y) => y,
                Err(_) => return 0.0,
            };
            let ny = norm(&y);
            if !ny.is_finite() || ny == 0.0 {
                return 0.0;
            }
            est = 1.0 / ny;
            x = y.iter().map(|v| v / ny).collect();
        }
        est
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}
