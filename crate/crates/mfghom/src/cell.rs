//! Ergodic cell problems on the unit torus.
//!
//! With `J_v w = -Lap w + D_pH(p + Dv, y) . Dw` the linearization of the cell
//! Hamilton-Jacobi operator, the invariant density is the normalized null vector of
//! `J_vᵀ` and the differentiated corrector solves `J_v w = h_pi - H_pi`. Because the
//! density is built from the same stencils as the Jacobian, `h_pi = int H_pi mu`
//! holds to round-off on the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, DenseLu, SparseMatrix};
use crate::models::{CouplingModel, Hamiltonian, HamiltonianModel, Vec2};
use crate::torus::{integrate_values, tree_sum, Order, ScalarField, TorusGrid, VectorField};

/// Discretization of the stationary Fokker-Planck operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpScheme {
    /// Transpose of the centered HJ linearization (same order as the HJ stencils).
    Adjoint,
    /// Transpose of first-order upwind advection with the second-order Laplacian.
    Upwind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellOptions {
    /// Points per axis on the unit cell.
    pub n: usize,
    pub dim: usize,
    pub order: Order,
    pub fp_scheme: FpScheme,
    /// Sup-norm target for the HJ residual.
    pub tol: f64,
    pub max_newton: usize,
    /// Fixed-point relaxation for the coupled cell problem.
    pub relaxation: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max: usize,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            n: 64,
            dim: 1,
            order: Order::Fourth,
            fp_scheme: FpScheme::Adjoint,
            tol: 1e-10,
            max_newton: 50,
            relaxation: 0.5,
            fixed_point_tol: 1e-9,
            fixed_point_max: 200,
        }
    }
}

impl CellOptions {
    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::unit(self.dim, self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResiduals {
    pub hj: f64,
    pub fp: f64,
    pub fixed_point_iters: usize,
}

/// Corrector, invariant density and ergodic constant at one `(p, m, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSolution {
    pub p: Vec2,
    pub m_param: Option<f64>,
    pub x_param: Option<Vec2>,
    pub v: ScalarField,
    pub mu: ScalarField,
    pub h_bar: f64,
    pub residuals: CellResiduals,
    /// Hamiltonian the cell problem was solved for.
    pub model: HamiltonianModel,
    /// Whether the source depended on `mu` (local coupling).
    pub coupled: bool,
    pub order: Order,
}

/// Derivative of the corrector and of the ergodic constant in `p_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedCorrector {
    pub direction: usize,
    pub w_pi: ScalarField,
    pub h_bar_pi: f64,
    pub residual: f64,
}

/// First-derivative matrix along `axis`.
pub fn derivative_matrix(grid: &TorusGrid, axis: usize, order: Order) -> SparseMatrix {
    let mut m = SparseMatrix::zeros(grid.len());
    let ih = 1.0 / grid.h();
    for i in 0..grid.len() {
        for &(o, w) in order.d1() {
            m.add(i, grid.shift(i, axis, o), w * ih);
        }
    }
    m
}

pub fn laplacian_matrix(grid: &TorusGrid, order: Order) -> SparseMatrix {
    let mut m = SparseMatrix::zeros(grid.len());
    let ih2 = 1.0 / (grid.h() * grid.h());
    for i in 0..grid.len() {
        for axis in 0..grid.dim() {
            for &(o, w) in order.d2() {
                m.add(i, grid.shift(i, axis, o), w * ih2);
            }
        }
    }
    m
}

/// Upwind advection matrix `b . D_up` (backward differences where `b_k >= 0`).
pub fn upwind_matrix(grid: &TorusGrid, b: &[Vec<f64>]) -> SparseMatrix {
    let mut m = SparseMatrix::zeros(grid.len());
    let ih = 1.0 / grid.h();
    for (k, bk) in b.iter().enumerate() {
        for i in 0..grid.len() {
            if bk[i] >= 0.0 {
                m.add(i, i, bk[i] * ih);
                m.add(i, grid.shift(i, k, -1), -bk[i] * ih);
            } else {
                m.add(i, grid.shift(i, k, 1), bk[i] * ih);
                m.add(i, i, -bk[i] * ih);
            }
        }
    }
    m
}

/// Stencil operators of one cell grid, built once per solve.
pub(crate) struct CellOps {
    pub grid: TorusGrid,
    pub y: Vec<Vec2>,
    pub lap: SparseMatrix,
    pub d: Vec<SparseMatrix>,
}

impl CellOps {
    pub fn new(grid: TorusGrid, order: Order) -> Self {
        let y = (0..grid.len()).map(|i| grid.coords(i)).collect();
        let d = (0..grid.dim()).map(|k| derivative_matrix(&grid, k, order)).collect();
        CellOps { grid, y, lap: laplacian_matrix(&grid, order), d }
    }

    fn grad_at(&self, dv: &[Vec<f64>], i: usize) -> Vec2 {
        let mut g = [0.0; 2];
        for (k, c) in dv.iter().enumerate() {
            g[k] = c[i];
        }
        g
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<Vec<f64>> {
        self.d.iter().map(|d| d.matvec(v)).collect()
    }

    /// `-Lap v + H(p + Dv, y) - g - hbar`.
    pub fn hj_residual(&self, h: &HamiltonianModel, p: Vec2, g: &[f64], v: &[f64], hbar: f64) -> Vec<f64> {
        let lv = self.lap.matvec(v);
        let dv = self.gradient(v);
        (0..v.len())
            .map(|i| {
                let q = self.grad_at(&dv, i);
                let pq = [p[0] + q[0], p[1] + q[1]];
                -lv[i] + h.value(pq, self.y[i]) - g[i] - hbar
            })
            .collect()
    }

    /// Drift `D_pH(p + Dv, y)` per component.
    pub fn drift(&self, h: &HamiltonianModel, p: Vec2, v: &[f64]) -> Vec<Vec<f64>> {
        let dv = self.gradient(v);
        let dim = self.grid.dim();
        let mut b = vec![vec![0.0; v.len()]; dim];
        for i in 0..v.len() {
            let q = self.grad_at(&dv, i);
            let dp = h.dp([p[0] + q[0], p[1] + q[1]], self.y[i]);
            for k in 0..dim {
                b[k][i] = dp[k];
            }
        }
        b
    }

    /// `J = -Lap + sum_k diag(b_k) D_k`.
    pub fn jacobian(&self, b: &[Vec<f64>]) -> SparseMatrix {
        let mut j = self.lap.scaled(-1.0);
        for (k, bk) in b.iter().enumerate() {
            for i in 0..self.grid.len() {
                for &(c, w) in self.d[k].row(i) {
                    j.add(i, c, bk[i] * w);
                }
            }
        }
        j
    }
}

fn bordered(a: &SparseMatrix, col: f64, weight: f64) -> nalgebra::DMatrix<f64> {
    let n = a.n();
    let mut m = nalgebra::DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for &(j, v) in a.row(i) {
            m[(i, j)] += v;
        }
        m[(i, n)] = col;
        m[(n, i)] = weight;
    }
    m
}

fn max_norm(r: &[f64], extra: f64) -> f64 {
    norm_inf(r).max(extra.abs())
}

/// Newton solve of the cell HJ equation with the ergodic constant as an unknown.
pub(crate) fn newton_hj(
    ops: &CellOps,
    h: &HamiltonianModel,
    p: Vec2,
    g: &[f64],
    guess: Option<(&[f64], f64)>,
    opts: &CellOptions,
) -> Result<(Vec<f64>, f64, f64)> {
    let n = ops.grid.len();
    let w = ops.grid.weight();
    let (mut v, mut hbar) = match guess {
        Some((v0, hb)) => (v0.to_vec(), hb),
        None => {
            let s: Vec<f64> = (0..n).map(|i| h.value(p, ops.y[i]) - g[i]).collect();
            (vec![0.0; n], tree_sum(&s) / n as f64)
        }
    };
    let mut r = ops.hj_residual(h, p, g, &v, hbar);
    let mut c = w * tree_sum(&v);
    let mut norm = max_norm(&r, c);
    for it in 0..opts.max_newton {
        if norm <= opts.tol {
            return Ok((v, hbar, norm));
        }
        let jac = ops.jacobian(&ops.drift(h, p, &v));
        let lu = DenseLu::factor(bordered(&jac, -1.0, w))?;
        let mut rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        rhs.push(-c);
        let step = lu.solve(&rhs)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let vt: Vec<f64> = v.iter().zip(&step).map(|(a, s)| a + lambda * s).collect();
            let ht = hbar + lambda * step[n];
            let rt = ops.hj_residual(h, p, g, &vt, ht);
            let ct = w * tree_sum(&vt);
            let nt = max_norm(&rt, ct);
            if nt.is_finite() && nt < norm {
                v = vt;
                hbar = ht;
                r = rt;
                c = ct;
                norm = nt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            if norm <= opts.tol * 10.0 {
                // round-off floor just above the target
                return Ok((v, hbar, norm));
            }
            return Err(Error::NewtonDiverged { iterations: it + 1, residual: norm });
        }
    }
    if norm <= opts.tol {
        Ok((v, hbar, norm))
    } else {
        Err(Error::NewtonDiverged { iterations: opts.max_newton, residual: norm })
    }
}

fn check_grid(opts: &CellOptions, g: &TorusGrid) -> Result<()> {
    if g.cells_per_dim() != 1 || g.points_per_cell() != opts.n || g.dim() != opts.dim {
        return Err(Error::ShapeMismatch("field grid does not match cell options".into()));
    }
    Ok(())
}

/// Solve `-Lap v + H(p + Dv, y) - g = h_bar`, `int v = 0`.
pub fn solve_hj_ergodic(
    h: &HamiltonianModel,
    p: Vec2,
    g: &ScalarField,
    opts: &CellOptions,
) -> Result<(ScalarField, f64)> {
    solve_hj_ergodic_from(h, p, g, opts, None)
}

/// [`solve_hj_ergodic`] from an explicit initial guess `(v0, h_bar0)`.
pub fn solve_hj_ergodic_from(
    h: &HamiltonianModel,
    p: Vec2,
    g: &ScalarField,
    opts: &CellOptions,
    guess: Option<(&[f64], f64)>,
) -> Result<(ScalarField, f64)> {
    check_grid(opts, g.grid())?;
    if let Some((v0, _)) = guess {
        if v0.len() != g.grid().len() {
            return Err(Error::ShapeMismatch("initial guess length".into()));
        }
    }
    let ops = CellOps::new(*g.grid(), opts.order);
    let (v, hbar, _) = newton_hj(&ops, h, p, g.values(), guess, opts)?;
    Ok((ScalarField::new(*g.grid(), v)?, hbar))
}

/// Stationary Fokker-Planck operator `A` with `A mu = 0` defining the invariant density
/// (so `A = Jᵀ` for the adjoint scheme).
pub(crate) fn fp_operator(ops: &CellOps, b: &[Vec<f64>], scheme: FpScheme) -> SparseMatrix {
    match scheme {
        FpScheme::Adjoint => ops.jacobian(b).transpose(),
        FpScheme::Upwind => {
            let lap2 = laplacian_matrix(&ops.grid, Order::Second);
            lap2.scaled(-1.0).axpy(1.0, &upwind_matrix(&ops.grid, b)).transpose()
        }
    }
}

pub(crate) fn null_vector(a: &SparseMatrix, grid: &TorusGrid) -> Result<Vec<f64>> {
    let n = a.n();
    let w = grid.weight();
    let lu = DenseLu::factor(bordered(a, 1.0, w)).map_err(|_| Error::NullspaceDegenerate { sigma: 0.0 })?;
    let sigma = lu.smallest_eigen_estimate(n + 1, 4);
    let scale = a.norm_inf().max(1.0);
    if sigma < 1e-10 * scale {
        return Err(Error::NullspaceDegenerate { sigma });
    }
    let mut rhs = vec![0.0; n + 1];
    rhs[n] = 1.0;
    let mut x = lu.solve(&rhs)?;
    x.truncate(n);
    normalize_density(grid, x)
}

fn normalize_density(grid: &TorusGrid, mut mu: Vec<f64>) -> Result<Vec<f64>> {
    let mass = integrate_values(grid, &mu);
    mu.iter_mut().for_each(|m| *m /= mass);
    if let Some((index, &value)) = mu
        .iter()
        .enumerate()
        .filter(|(_, &m)| m < -1e-12)
        .min_by(|a, b| a.1.total_cmp(b.1))
    {
        return Err(Error::PositivityViolated { index, value });
    }
    if mu.iter().any(|&m| m < 0.0) {
        mu.iter_mut().for_each(|m| *m = m.max(0.0));
        let mass = integrate_values(grid, &mu);
        mu.iter_mut().for_each(|m| *m /= mass);
    }
    Ok(mu)
}

/// Invariant density of `drift`: `Lap mu + div(drift mu) = 0`, `mu > 0`, `int mu = 1`.
pub fn solve_invariant_density(drift: &VectorField, opts: &CellOptions) -> Result<ScalarField> {
    check_grid(opts, drift.grid())?;
    let ops = CellOps::new(*drift.grid(), opts.order);
    let a = fp_operator(&ops, drift.components(), opts.fp_scheme);
    let mu = null_vector(&a, drift.grid())?;
    ScalarField::new(*drift.grid(), mu)
}

/// Sup norm of `A mu` for the stationary operator of `drift`.
pub fn fp_residual(drift: &VectorField, mu: &ScalarField, opts: &CellOptions) -> f64 {
    let ops = CellOps::new(*drift.grid(), opts.order);
    norm_inf(&fp_operator(&ops, drift.components(), opts.fp_scheme).matvec(mu.values()))
}

fn l1_diff(grid: &TorusGrid, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    integrate_values(grid, &d)
}

/// Decoupled cell problem with source `g`, packaged as a full [`CellSolution`].
pub fn solve_cell(h: &HamiltonianModel, p: Vec2, g: &ScalarField, opts: &CellOptions) -> Result<CellSolution> {
    check_grid(opts, g.grid())?;
    let grid = *g.grid();
    let ops = CellOps::new(grid, opts.order);
    let (v, hbar, hj) = newton_hj(&ops, h, p, g.values(), None, opts)?;
    let b = ops.drift(h, p, &v);
    let a = fp_operator(&ops, &b, opts.fp_scheme);
    let mu = null_vector(&a, &grid)?;
    let fp = norm_inf(&a.matvec(&mu));
    Ok(CellSolution {
        p,
        m_param: None,
        x_param: None,
        v: ScalarField::new(grid, v)?,
        mu: ScalarField::new(grid, mu)?,
        h_bar: hbar,
        residuals: CellResiduals { hj, fp, fixed_point_iters: 0 },
        model: h.clone(),
        coupled: false,
        order: opts.order,
    })
}

/// Coupled cell problem for a local coupling: damped fixed point on `mu`.
pub fn solve_cell_coupled(
    h: &HamiltonianModel,
    f: &CouplingModel,
    p: Vec2,
    m_param: f64,
    x_param: Vec2,
    opts: &CellOptions,
) -> Result<CellSolution> {
    if !(m_param >= 0.0) {
        return Err(Error::InvalidArgument(format!("m_param must be >= 0, got {m_param}")));
    }
    if matches!(f, CouplingModel::Nonlocal { .. }) {
        return Err(Error::InvalidArgument("coupled cell problem needs a local coupling".into()));
    }
    let grid = opts.grid()?;
    let ops = CellOps::new(grid, opts.order);
    let n = grid.len();
    let source = |mu: &[f64]| -> Vec<f64> {
        (0..n).map(|i| f.local(ops.y[i], m_param * mu[i])).collect()
    };
    let lambda = opts.relaxation;
    let mut mu = vec![1.0; n];
    let mut warm: Option<(Vec<f64>, f64)> = None;
    let mut increment = f64::INFINITY;
    for k in 1..=opts.fixed_point_max {
        let g = source(&mu);
        let (v, hbar, _) = newton_hj(&ops, h, p, &g, warm.as_ref().map(|(v, hb)| (v.as_slice(), *hb)), opts)?;
        let b = ops.drift(h, p, &v);
        let mu_new = null_vector(&fp_operator(&ops, &b, opts.fp_scheme), &grid)?;
        let next: Vec<f64> = mu.iter().zip(&mu_new).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        increment = l1_diff(&grid, &next, &mu);
        mu = next;
        warm = Some((v, hbar));
        if increment <= opts.fixed_point_tol {
            let (v0, hb0) = warm.expect("set above");
            let g = source(&mu);
            let (v, hbar, hj) = newton_hj(&ops, h, p, &g, Some((&v0, hb0)), opts)?;
            let a = fp_operator(&ops, &ops.drift(h, p, &v), opts.fp_scheme);
            let fp = norm_inf(&a.matvec(&mu));
            return Ok(CellSolution {
                p,
                m_param: Some(m_param),
                x_param: Some(x_param),
                v: ScalarField::new(grid, v)?,
                mu: ScalarField::new(grid, mu)?,
                h_bar: hbar,
                residuals: CellResiduals { hj, fp, fixed_point_iters: k },
                model: h.clone(),
                coupled: !matches!(f, CouplingModel::None),
                order: opts.order,
            });
        }
    }
    Err(Error::FixedPointStalled { iterations: opts.fixed_point_max, increment })
}

/// Solve `J_v w + H_pi(p + Dv, y) = h_bar_pi`, `int w = 0`.
pub fn linearized_corrector(cs: &CellSolution, i: usize) -> Result<LinearizedCorrector> {
    if cs.coupled {
        return Err(Error::CoupledCellUnsupported);
    }
    let grid = *cs.v.grid();
    if i >= grid.dim() {
        return Err(Error::InvalidArgument(format!("axis {i} out of range")));
    }
    let ops = CellOps::new(grid, cs.order);
    let b = ops.drift(&cs.model, cs.p, cs.v.values());
    let jac = ops.jacobian(&b);
    let lu = DenseLu::factor(bordered(&jac, -1.0, grid.weight()))?;
    let mut rhs: Vec<f64> = b[i].iter().map(|x| -x).collect();
    rhs.push(0.0);
    let mut x = lu.solve(&rhs)?;
    let h_bar_pi = x[grid.len()];
    x.truncate(grid.len());
    let jw = jac.matvec(&x);
    let residual = norm_inf(&(0..x.len()).map(|k| jw[k] + b[i][k] - h_bar_pi).collect::<Vec<_>>());
    Ok(LinearizedCorrector { direction: i, w_pi: ScalarField::new(grid, x)?, h_bar_pi, residual })
}

/// Solve `Lap nu + div(drift nu) = rhs`, `int nu = 0`.
pub fn nu_corrector(rhs: &ScalarField, drift: &VectorField, opts: &CellOptions) -> Result<ScalarField> {
    let grid = *rhs.grid();
    let integral = integrate_values(&grid, rhs.values());
    if integral.abs() > 1e-8 {
        return Err(Error::CompatibilityViolated { integral });
    }
    if drift.grid() != rhs.grid() {
        return Err(Error::ShapeMismatch("drift and rhs grids differ".into()));
    }
    let ops = CellOps::new(grid, opts.order);
    let a = fp_operator(&ops, drift.components(), opts.fp_scheme).scaled(-1.0);
    let lu = DenseLu::factor(bordered(&a, 1.0, grid.weight()))?;
    let mut b = rhs.values().to_vec();
    b.push(0.0);
    let mut x = lu.solve(&b)?;
    x.truncate(grid.len());
    ScalarField::new(grid, x)
}
