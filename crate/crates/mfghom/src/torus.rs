//! Uniform periodic grids on the flat torus of side `L` in one or two dimensions,
//! fields on them, and the finite-difference operators shared by all solvers.
//!
//! Node `(i0, i1)` sits at `(i0 h, i1 h)` and is stored at `i1 * n + i0`
//! (axis 0 fastest), `n = L * N` points per axis, `h = 1 / N`.
//!
//! Centered stencils (per axis, times `1/h` or `1/h^2`):
//!
//! ```text
//! order 2:  D = (-1/2, 0, 1/2)              Lap = (1, -2, 1)
//! order 4:  D = (1, -8, 0, 8, -1)/12        Lap = (-1, 16, -30, 16, -1)/12
//! order 6:  D = (-1, 9, -45, 0, 45, -9, 1)/60
//!           Lap = (2, -27, 270, -490, 270, -27, 2)/180
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy order of a centered stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Second,
    Fourth,
    Sixth,
}

impl Order {
    /// Offsets and weights of the first-derivative stencil (weights times `1/h`).
    pub fn d1(self) -> &'static [(isize, f64)] {
        match self {
            Order::Second => &[(-1, -0.5), (1, 0.5)],
            Order::Fourth => &[
                (-2, 1.0 / 12.0),
                (-1, -8.0 / 12.0),
                (1, 8.0 / 12.0),
                (2, -1.0 / 12.0),
            ],
            Order::Sixth => &[
                (-3, -1.0 / 60.0),
                (-2, 9.0 / 60.0),
                (-1, -45.0 / 60.0),
                (1, 45.0 / 60.0),
                (2, -9.0 / 60.0),
                (3, 1.0 / 60.0),
            ],
        }
    }

    /// Offsets and weights of the second-derivative stencil (weights times `1/h^2`).
    pub fn d2(self) -> &'static [(isize, f64)] {
        match self {
            Order::Second => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
            Order::Fourth => &[
                (-2, -1.0 / 12.0),
                (-1, 16.0 / 12.0),
                (0, -30.0 / 12.0),
                (1, 16.0 / 12.0),
                (2, -1.0 / 12.0),
            ],
            Order::Sixth => &[
                (-3, 2.0 / 180.0),
                (-2, -27.0 / 180.0),
                (-1, 270.0 / 180.0),
                (0, -490.0 / 180.0),
                (1, 270.0 / 180.0),
                (2, -27.0 / 180.0),
                (3, 2.0 / 180.0),
            ],
        }
    }

    /// Half-width of both stencils.
    pub fn reach(self) -> usize {
        match self {
            Order::Second => 1,
            Order::Fourth => 2,
            Order::Sixth => 3,
        }
    }
}

/// A uniform periodic grid with `L` unit periods per axis and `N` points per unit length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    cells_per_dim: usize,
    points_per_cell: usize,
    spacing: f64,
}

impl TorusGrid {
    pub fn new(dim: usize, cells_per_dim: usize, points_per_cell: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {dim}")));
        }
        if cells_per_dim == 0 || points_per_cell == 0 {
            return Err(Error::InvalidGrid(
                "cells_per_dim and points_per_cell must be positive".into(),
            ));
        }
        Ok(TorusGrid {
            dim,
            cells_per_dim,
            points_per_cell,
            spacing: 1.0 / points_per_cell as f64,
        })
    }

    /// The unit cell `[0,1)^dim` with `n` points per axis.
    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, 1, n)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn cells_per_dim(&self) -> usize {
        self.cells_per_dim
    }
    pub fn points_per_cell(&self) -> usize {
        self.points_per_cell
    }
    pub fn h(&self) -> f64 {
        self.spacing
    }
    /// Side length `L` of the torus.
    pub fn side(&self) -> f64 {
        self.cells_per_dim as f64
    }
    /// Points per axis, `L * N`.
    pub fn n_axis(&self) -> usize {
        self.cells_per_dim * self.points_per_cell
    }
    pub fn len(&self) -> usize {
        self.n_axis().pow(self.dim as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Quadrature weight `h^dim`.
    pub fn weight(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Axis indices of a flat index.
    pub fn multi(&self, idx: usize) -> [usize; 2] {
        let n = self.n_axis();
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx % n, idx / n]
        }
    }

    pub fn flat(&self, i: [usize; 2]) -> usize {
        if self.dim == 1 {
            i[0]
        } else {
            i[1] * self.n_axis() + i[0]
        }
    }

    /// Neighbor of `idx` shifted by `off` along `axis`, wrapping periodically.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, off: isize) -> usize {
        let n = self.n_axis() as isize;
        let mut i = self.multi(idx);
        i[axis] = (i[axis] as isize + off).rem_euclid(n) as usize;
        self.flat(i)
    }

    /// Physical coordinates of a node (second component 0 when `dim == 1`).
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let i = self.multi(idx);
        let mut x = [i[0] as f64 * self.spacing, 0.0];
        if self.dim == 2 {
            x[1] = i[1] as f64 * self.spacing;
        }
        x
    }

    /// Coordinates `x / eps mod 1` of every node, where the grid resolves one period of
    /// length `eps` with `n_cell` points. Computed from integer indices so grid-aligned
    /// cell coordinates are exact.
    pub fn cell_coords(&self, n_cell: usize) -> Vec<[f64; 2]> {
        (0..self.len())
            .map(|idx| {
                let i = self.multi(idx);
                let mut y = [(i[0] % n_cell) as f64 / n_cell as f64, 0.0];
                if self.dim == 2 {
                    y[1] = (i[1] % n_cell) as f64 / n_cell as f64;
                }
                y
            })
            .collect()
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Real values on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        ScalarField { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// A `dim`-component vector field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    grid: TorusGrid,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: TorusGrid, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} components for a {}-d grid",
                components.len(),
                grid.dim()
            )));
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(Error::ShapeMismatch("component length".into()));
            }
            check_finite(c, "vector field")?;
        }
        Ok(VectorField { grid, components })
    }

    pub fn constant(grid: TorusGrid, c: [f64; 2]) -> Self {
        let components = (0..grid.dim()).map(|k| vec![c[k]; grid.len()]).collect();
        VectorField { grid, components }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }
    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k]
    }
    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }
    /// Value at node `idx` (second entry 0 when `dim == 1`).
    pub fn at(&self, idx: usize) -> [f64; 2] {
        let mut v = [0.0; 2];
        for (k, c) in self.components.iter().enumerate() {
            v[k] = c[idx];
        }
        v
    }
    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Sum with a fixed pairwise tree so the result does not depend on how callers chunk work.
pub fn tree_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if v.len() <= LEAF {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        tree_sum(&v[..mid]) + tree_sum(&v[mid..])
    }
}

/// Grid inner product `h^dim * sum a_i b_i`.
pub fn inner(grid: &TorusGrid, a: &[f64], b: &[f64]) -> f64 {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    grid.weight() * tree_sum(&prod)
}

/// Centered derivative along `axis` of raw nodal values.
pub fn d1(grid: &TorusGrid, f: &[f64], axis: usize, order: Order) -> Vec<f64> {
    let s = order.d1();
    let ih = 1.0 / grid.h();
    (0..f.len())
        .map(|i| ih * s.iter().map(|&(o, w)| w * f[grid.shift(i, axis, o)]).sum::<f64>())
        .collect()
}

/// Centered Laplacian of raw nodal values.
pub fn lap(grid: &TorusGrid, f: &[f64], order: Order) -> Vec<f64> {
    let s = order.d2();
    let ih2 = 1.0 / (grid.h() * grid.h());
    (0..f.len())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..grid.dim() {
                for &(o, w) in s {
                    acc += w * f[grid.shift(i, axis, o)];
                }
            }
            ih2 * acc
        })
        .collect()
}

/// Centered gradient of raw nodal values, one vector per axis.
pub fn grad(grid: &TorusGrid, f: &[f64], order: Order) -> Vec<Vec<f64>> {
    (0..grid.dim()).map(|k| d1(grid, f, k, order)).collect()
}

/// Centered divergence of raw component arrays.
pub fn div(grid: &TorusGrid, v: &[Vec<f64>], order: Order) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (k, c) in v.iter().enumerate() {
        for (o, d) in out.iter_mut().zip(d1(grid, c, k, order)) {
            *o += d;
        }
    }
    out
}

fn forward_diff(grid: &TorusGrid, f: &[f64], i: usize, axis: usize) -> f64 {
    (f[grid.shift(i, axis, 1)] - f[i]) / grid.h()
}

fn backward_diff(grid: &TorusGrid, f: &[f64], i: usize, axis: usize) -> f64 {
    (f[i] - f[grid.shift(i, axis, -1)]) / grid.h()
}

/// Gradient discretization.
#[derive(Clone, Copy, Debug)]
pub enum GradScheme<'a> {
    /// Second-order centered differences.
    Centered,
    /// First-order one-sided differences taken against the direction field: backward where
    /// the direction component is nonnegative, forward otherwise.
    Upwind(Option<&'a VectorField>),
}

/// Divergence discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivScheme {
    Centered,
    /// `D+ (V+) + D- (V-)` per component; for `V = b m` with `m >= 0` this is minus the
    /// transpose of the upwind advection `b . D_up`.
    UpwindAdjoint,
}

pub fn gradient(f: &ScalarField, scheme: GradScheme<'_>) -> Result<VectorField> {
    let grid = *f.grid();
    match scheme {
        GradScheme::Centered => Ok(VectorField {
            grid,
            components: grad(&grid, f.values(), Order::Second),
        }),
        GradScheme::Upwind(None) => Err(Error::SchemeMismatch),
        GradScheme::Upwind(Some(dir)) => {
            if dir.grid() != f.grid() {
                return Err(Error::ShapeMismatch("direction field on a different grid".into()));
            }
            let components = (0..grid.dim())
                .map(|k| {
                    let b = dir.component(k);
                    (0..grid.len())
                        .map(|i| {
                            if b[i] >= 0.0 {
                                backward_diff(&grid, f.values(), i, k)
                            } else {
                                forward_diff(&grid, f.values(), i, k)
                            }
                        })
                        .collect()
                })
                .collect();
            Ok(VectorField { grid, components })
        }
    }
}

/// Standard `(2 dim + 1)`-point Laplacian.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let grid = *f.grid();
    ScalarField { grid, values: lap(&grid, f.values(), Order::Second) }
}

pub fn divergence(v: &VectorField, scheme: DivScheme) -> ScalarField {
    let grid = *v.grid();
    let values = match scheme {
        DivScheme::Centered => div(&grid, v.components(), Order::Second),
        DivScheme::UpwindAdjoint => {
            let mut out = vec![0.0; grid.len()];
            for (k, c) in v.components().iter().enumerate() {
                let plus: Vec<f64> = c.iter().map(|x| x.max(0.0)).collect();
                let minus: Vec<f64> = c.iter().map(|x| x.min(0.0)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += forward_diff(&grid, &plus, i, k) + backward_diff(&grid, &minus, i, k);
                }
            }
            out
        }
    };
    ScalarField { grid, values }
}

/// Upwind advection `b . D_up f` (the convention of [`GradScheme::Upwind`]).
pub fn advect(b: &VectorField, f: &ScalarField) -> ScalarField {
    let grid = *f.grid();
    let mut out = vec![0.0; grid.len()];
    for k in 0..grid.dim() {
        let bk = b.component(k);
        for (i, o) in out.iter_mut().enumerate() {
            let d = if bk[i] >= 0.0 {
                backward_diff(&grid, f.values(), i, k)
            } else {
                forward_diff(&grid, f.values(), i, k)
            };
            *o += bk[i] * d;
        }
    }
    ScalarField { grid, values: out }
}

/// Exact transpose of [`advect`]: `<advect(b) f, g> = <f, advect_adjoint(b) g>`.
pub fn advect_adjoint(b: &VectorField, g: &ScalarField) -> ScalarField {
    let grid = *g.grid();
    let h = grid.h();
    let mut out = vec![0.0; grid.len()];
    let gv = g.values();
    for k in 0..grid.dim() {
        let bk = b.component(k);
        for (i, &gi) in gv.iter().enumerate() {
            // row i of advect touches i and one neighbor
            if bk[i] >= 0.0 {
                out[i] += bk[i] * gi / h;
                out[grid.shift(i, k, -1)] -= bk[i] * gi / h;
            } else {
                out[grid.shift(i, k, 1)] += bk[i] * gi / h;
                out[i] -= bk[i] * gi / h;
            }
        }
    }
    ScalarField { grid, values: out }
}

/// `h^dim * sum f_i`.
pub fn integrate(f: &ScalarField) -> f64 {
    f.grid().weight() * tree_sum(f.values())
}

/// Integral of raw nodal values.
pub fn integrate_values(grid: &TorusGrid, f: &[f64]) -> f64 {
    grid.weight() * tree_sum(f)
}
