//! The oscillatory forward-backward system on the macro torus,
//!
//! ```text
//! u_t - eps Lap u + H(Du, x/eps) = F[m],           u(., 0) = u0
//! m_t + eps Lap m + div(D_pH(Du, x/eps) m) = 0,    m(., T) = m_T
//! ```
//!
//! with `u = p_lin . x + u_tilde` and `u_tilde` periodic. `u` marches forward, `m`
//! backward, and the coupling is resolved by a Picard loop over the density trajectory.
//!
//! Two discretizations:
//!
//! - [`Scheme::Centered`]: the fourth-order cell stencils on the macro grid, backward
//!   Euler diffusion, explicit `H`, and the exact transpose of the linearized HJ operator
//!   for the density. Well-prepared data built from a discrete cell solution with the same
//!   stencils is reproduced by the scheme without spatial error.
//! - [`Scheme::Monotone`]: Lax-Friedrichs Hamiltonian on centered differences, three-point
//!   diffusion, upwind-transpose transport. Used for `eps = 0` and when the grid does not
//!   resolve the diffusion (cell Peclet number above 1).
//!
//! Every density update solves `A m^n = m^{n+1}` with `1ᵀA = 1ᵀ`, so mass is conserved to
//! round-off in both.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cell::{derivative_matrix, laplacian_matrix, upwind_matrix};
use crate::container::{self, Array};
use crate::error::{Error, Result};
use crate::linalg::{BandedLu, SparseMatrix};
use crate::models::{CouplingModel, Hamiltonian, HamiltonianModel, Vec2};
use crate::torus::{self, integrate_values, Order, ScalarField, TorusGrid};

/// Uniform time grid `t_n = n T / K`, `n = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs T > 0 and steps >= 1, got T={t_final}, steps={steps}"
            )));
        }
        Ok(TimeGrid { t_final, steps })
    }

    /// Smallest step count with `dt <= dt_max`.
    pub fn with_max_step(t_final: f64, dt_max: f64) -> Result<Self> {
        Self::new(t_final, (t_final / dt_max).ceil().max(1.0) as usize)
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_final * n as f64 / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    FixedDamping,
    /// Weight `1/(k+1)` on the `k`-th sweep (zero based), so the first sweep is taken whole.
    FictitiousPlay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub damping: f64,
    /// Threshold on `sup |Phi(m) - m|` over the whole trajectory.
    pub tol: f64,
    pub max_iters: usize,
    pub averaging: Averaging,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { damping: 0.5, tol: 1e-6, max_iters: 200, averaging: Averaging::FictitiousPlay }
    }
}

impl PicardOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn weight(&self, k: usize) -> f64 {
        match self.averaging {
            Averaging::FixedDamping => self.damping,
            Averaging::FictitiousPlay => 1.0 / (k as f64 + 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Centered,
    Monotone,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    /// Centered when `eps > 0` and the initial cell Peclet number is at most 1.
    #[default]
    Auto,
    Centered,
    Monotone,
}

/// Input of [`solve_mfg_eps`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpsProblem {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub p_lin: Vec2,
    /// Periodic part of the initial value; its grid is the macro grid.
    pub u0: ScalarField,
    pub m_t: ScalarField,
    pub epsilon: f64,
    pub times: TimeGrid,
    pub scheme: SchemeChoice,
    /// Fixed Lax-Friedrichs coefficient for the monotone scheme. By default it is the
    /// largest `|D_pH|` over one-sided and centered gradients at each step.
    pub dissipation: Option<f64>,
}

/// Density and value trajectories of a forward-backward solve.
#[derive(Clone, Debug, PartialEq)]
pub struct MFGSolution {
    pub grid: TorusGrid,
    pub times: TimeGrid,
    pub p_lin: Vec2,
    /// `u_tilde[n]` at `t_n`.
    pub u_tilde: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// Grid points per period `eps` (0 when `eps = 0`).
    pub n_cell: usize,
    pub scheme: Scheme,
    pub iterations: usize,
    pub converged: bool,
    /// `sup |Phi(m^k) - m^k|` per sweep.
    pub history: Vec<f64>,
}

impl MFGSolution {
    pub fn cell_coords(&self) -> Vec<Vec2> {
        cell_coords(&self.grid, self.n_cell)
    }

    pub fn u_field(&self, n: usize) -> Result<ScalarField> {
        ScalarField::new(self.grid, self.u_tilde[n].clone())
    }

    pub fn m_field(&self, n: usize) -> Result<ScalarField> {
        ScalarField::new(self.grid, self.m[n].clone())
    }

    /// Whether the sweep residual never increased after the first five sweeps.
    pub fn history_monotone_tail(&self) -> bool {
        self.history.windows(2).skip(4).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    }

    pub fn last_change(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::INFINITY)
    }
}

pub(crate) fn cell_coords(grid: &TorusGrid, n_cell: usize) -> Vec<Vec2> {
    if n_cell == 0 {
        vec![[0.0, 0.0]; grid.len()]
    } else {
        grid.cell_coords(n_cell)
    }
}

/// Points per period for `eps = 1/q` with `q` dividing the points per unit length.
pub fn cell_resolution(grid: &TorusGrid, epsilon: f64) -> Result<usize> {
    if epsilon == 0.0 {
        return Ok(0);
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in [0, 1], got {epsilon}")));
    }
    let q = (1.0 / epsilon).round();
    if (q * epsilon - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("eps must be the reciprocal of an integer, got {epsilon}")));
    }
    let q = q as usize;
    let n = grid.points_per_cell();
    if n % q != 0 {
        return Err(Error::InvalidArgument(format!(
            "eps = 1/{q} does not divide the {n} grid points per unit length"
        )));
    }
    Ok(n / q)
}

/// Macro grid resolving each period `eps = 1/q` with `n_cell` points.
pub fn aligned_grid(dim: usize, side: usize, n_cell: usize, epsilon: f64) -> Result<TorusGrid> {
    let q = (1.0 / epsilon).round();
    if !(epsilon > 0.0) || (q * epsilon - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("eps must be the reciprocal of an integer, got {epsilon}")));
    }
    TorusGrid::new(dim, side, n_cell * q as usize)
}

/// Outcome of a Picard loop on trajectories.
pub(crate) struct PicardOutcome {
    pub u: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// One forward-backward sweep split into its two halves.
pub(crate) trait Sweep {
    fn forward(&self, m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    fn backward(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Iterate `m <- (1-w) m + w Phi(m)` until `sup |Phi(m) - m| <= tol`. Returns the last
/// `u` with the density it transports, so the pair is consistent to the final residual.
pub(crate) fn picard(s: &impl Sweep, mut m: Vec<Vec<f64>>, opts: &PicardOptions) -> Result<PicardOutcome> {
    opts.validate()?;
    let mut history = Vec::new();
    for k in 0..opts.max_iters {
        let u = s.forward(&m)?;
        let m_new = s.backward(&u)?;
        let change = m
            .iter()
            .zip(&m_new)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        history.push(change);
        if change <= opts.tol || k + 1 == opts.max_iters {
            return Ok(PicardOutcome {
                u,
                m: m_new,
                iterations: k + 1,
                converged: change <= opts.tol,
                history,
            });
        }
        let w = opts.weight(k);
        for (a, b) in m.iter_mut().zip(&m_new) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = (1.0 - w) * *x + w * y;
            }
        }
    }
    unreachable!("max_iters >= 1")
}

fn full_momentum(p: Vec2, du: &[Vec<f64>], i: usize) -> Vec2 {
    let mut q = p;
    for (k, c) in du.iter().enumerate() {
        q[k] += c[i];
    }
    q
}

fn apply_all(d: &[SparseMatrix], u: &[f64]) -> Vec<Vec<f64>> {
    d.iter().map(|dk| dk.matvec(u)).collect()
}

/// One-sided differences `(D^-, D^+)` along every axis.
pub(crate) fn one_sided(grid: &TorusGrid, u: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ih = 1.0 / grid.h();
    let mut dm = vec![vec![0.0; u.len()]; grid.dim()];
    let mut dp = dm.clone();
    for k in 0..grid.dim() {
        for i in 0..u.len() {
            dm[k][i] = (u[i] - u[grid.shift(i, k, -1)]) * ih;
            dp[k][i] = (u[grid.shift(i, k, 1)] - u[i]) * ih;
        }
    }
    (dm, dp)
}

/// Largest `|D_pH|` component over the centered, backward and forward gradients.
pub(crate) fn lf_speed(
    h: &HamiltonianModel,
    p: Vec2,
    y: &[Vec2],
    dc: &[Vec<f64>],
    dm: &[Vec<f64>],
    dp: &[Vec<f64>],
) -> f64 {
    let dim = dc.len();
    let mut a: f64 = 0.0;
    for i in 0..y.len() {
        // every combination of {-, c, +} per axis
        for combo in 0..3usize.pow(dim as u32) {
            let mut q = p;
            let mut c = combo;
            for k in 0..dim {
                q[k] += match c % 3 {
                    0 => dm[k][i],
                    1 => dc[k][i],
                    _ => dp[k][i],
                };
                c /= 3;
            }
            let g = h.dp(q, y[i]);
            for gk in &g[..dim] {
                a = a.max(gk.abs());
            }
        }
    }
    a
}

/// `sum_k (D^+_k - D^-_k) u` at node `i`.
pub(crate) fn lf_spread(dm: &[Vec<f64>], dp: &[Vec<f64>], i: usize) -> f64 {
    dm.iter().zip(dp).map(|(a, b)| b[i] - a[i]).sum()
}

pub(crate) fn check_cfl(dt: f64, h: f64, speed: f64) -> Result<()> {
    let limit = 0.5 * h / speed;
    if speed > 0.0 && dt > limit * (1.0 + 1e-12) {
        return Err(Error::CflViolated { dt, limit });
    }
    Ok(())
}

pub(crate) fn check_density(m: &[f64], step: usize) -> Result<()> {
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for (index, &value) in m.iter().enumerate() {
        if !value.is_finite() || value < -1e-12 * scale {
            return Err(Error::NegativeDensity { index, step, value });
        }
    }
    Ok(())
}

/// Backward transport step `(I - dt eps Lap + dt sum_k D_kᵀ diag(b_k)) m^n = m^{n+1}`,
/// with `diffusion = eps Lap`.
pub(crate) fn centered_backward_step(
    grid: &TorusGrid,
    d: &[SparseMatrix],
    diffusion: &SparseMatrix,
    dt: f64,
    b: &[Vec<f64>],
    m_next: &[f64],
) -> Result<Vec<f64>> {
    let mut a = SparseMatrix::identity(grid.len()).axpy(-dt, diffusion);
    for (k, bk) in b.iter().enumerate() {
        for j in 0..grid.len() {
            for &(i, w) in d[k].row(j) {
                a.add(i, j, dt * w * bk[j]);
            }
        }
    }
    Ok(BandedLu::factor_on(&a, grid)?.solve(m_next))
}

/// Backward transport step `(I - dt eps Lap + dt Upᵀ(b)) m^n = m^{n+1}`.
pub(crate) fn upwind_backward_step(
    grid: &TorusGrid,
    diffusion: Option<&SparseMatrix>,
    dt: f64,
    b: &[Vec<f64>],
    m_next: &[f64],
) -> Result<Vec<f64>> {
    let id = SparseMatrix::identity(grid.len());
    let mut a = id.axpy(dt, &upwind_matrix(grid, b).transpose());
    if let Some(lap) = diffusion {
        a = a.axpy(-dt, lap);
    }
    Ok(BandedLu::factor_on(&a, grid)?.solve(m_next))
}

struct EpsSweep<'a> {
    prob: &'a EpsProblem,
    grid: TorusGrid,
    y: Vec<Vec2>,
    scheme: Scheme,
    dt: f64,
    /// Gradient stencils of the scheme.
    d: Vec<SparseMatrix>,
    /// `eps Lap` of the scheme.
    diffusion: SparseMatrix,
    lu_u: BandedLu,
}

impl<'a> EpsSweep<'a> {
    fn new(prob: &'a EpsProblem, n_cell: usize) -> Result<Self> {
        let grid = *prob.u0.grid();
        let y = cell_coords(&grid, n_cell);
        let dt = prob.times.dt();
        let scheme = match prob.scheme {
            SchemeChoice::Centered if prob.epsilon == 0.0 => {
                return Err(Error::InvalidArgument("the centered scheme needs eps > 0".into()))
            }
            SchemeChoice::Centered => Scheme::Centered,
            SchemeChoice::Monotone => Scheme::Monotone,
            SchemeChoice::Auto if prob.epsilon == 0.0 => Scheme::Monotone,
            SchemeChoice::Auto => {
                let d4: Vec<SparseMatrix> =
                    (0..grid.dim()).map(|k| derivative_matrix(&grid, k, Order::Fourth)).collect();
                let du = apply_all(&d4, prob.u0.values());
                let mut speed: f64 = 0.0;
                for i in 0..grid.len() {
                    let g = prob.hamiltonian.dp(full_momentum(prob.p_lin, &du, i), y[i]);
                    speed = speed.max(g[0].abs()).max(g[1].abs());
                }
                if speed * grid.h() / (2.0 * prob.epsilon) <= 1.0 {
                    Scheme::Centered
                } else {
                    Scheme::Monotone
                }
            }
        };
        let order = match scheme {
            Scheme::Centered => Order::Fourth,
            Scheme::Monotone => Order::Second,
        };
        let d = (0..grid.dim()).map(|k| derivative_matrix(&grid, k, order)).collect();
        let diffusion = laplacian_matrix(&grid, order).scaled(prob.epsilon);
        let a_u = SparseMatrix::identity(grid.len()).axpy(-dt, &diffusion);
        let lu_u = BandedLu::factor_on(&a_u, &grid)?;
        Ok(EpsSweep { prob, grid, y, scheme, dt, d, diffusion, lu_u })
    }

    fn drift(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let du = apply_all(&self.d, u);
        let dim = self.grid.dim();
        let mut b = vec![vec![0.0; u.len()]; dim];
        for i in 0..u.len() {
            let g = self.prob.hamiltonian.dp(full_momentum(self.prob.p_lin, &du, i), self.y[i]);
            for k in 0..dim {
                b[k][i] = g[k];
            }
        }
        b
    }
}

impl Sweep for EpsSweep<'_> {
    fn forward(&self, m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let p = self.prob.p_lin;
        let h = &self.prob.hamiltonian;
        let mut out = Vec::with_capacity(m.len());
        out.push(self.prob.u0.values().to_vec());
        for n in 0..self.prob.times.steps {
            let u = &out[n];
            let f = self.prob.coupling.evaluate(&self.grid, &self.y, &m[n]);
            let du = apply_all(&self.d, u);
            let rhs: Vec<f64> = match self.scheme {
                Scheme::Centered => (0..u.len())
                    .map(|i| u[i] - self.dt * (h.value(full_momentum(p, &du, i), self.y[i]) - f[i]))
                    .collect(),
                Scheme::Monotone => {
                    let (dm, dp) = one_sided(&self.grid, u);
                    let alpha = match self.prob.dissipation {
                        Some(a) => a,
                        None => lf_speed(h, p, &self.y, &du, &dm, &dp),
                    };
                    check_cfl(self.dt, self.grid.h(), alpha)?;
                    let half = 0.5 * alpha;
                    (0..u.len())
                        .map(|i| {
                            let hh = h.value(full_momentum(p, &du, i), self.y[i]) - half * lf_spread(&dm, &dp, i);
                            u[i] - self.dt * (hh - f[i])
                        })
                        .collect()
                }
            };
            out.push(self.lu_u.solve(&rhs));
        }
        Ok(out)
    }

    fn backward(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k_steps = self.prob.times.steps;
        let mut out = vec![Vec::new(); k_steps + 1];
        out[k_steps] = self.prob.m_t.values().to_vec();
        for n in (0..k_steps).rev() {
            let b = self.drift(&u[n + 1]);
            let speed = b.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            check_cfl(self.dt, self.grid.h(), speed)?;
            let next = match self.scheme {
                Scheme::Centered => {
                    centered_backward_step(&self.grid, &self.d, &self.diffusion, self.dt, &b, &out[n + 1])?
                }
                Scheme::Monotone => {
                    upwind_backward_step(&self.grid, Some(&self.diffusion), self.dt, &b, &out[n + 1])?
                }
            };
            check_density(&next, n)?;
            out[n] = next;
        }
        Ok(out)
    }
}

fn validate_problem(prob: &EpsProblem) -> Result<()> {
    prob.hamiltonian.validate()?;
    prob.coupling.validate()?;
    if prob.m_t.grid() != prob.u0.grid() {
        return Err(Error::ShapeMismatch("u0 and m_T live on different grids".into()));
    }
    if let Some(i) = prob.m_t.values().iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeDensity { index: i, step: prob.times.steps, value: prob.m_t.values()[i] });
    }
    if integrate_values(prob.m_t.grid(), prob.m_t.values()) <= 0.0 {
        return Err(Error::InvalidArgument("m_T must have positive mass".into()));
    }
    if let Some(a) = prob.dissipation {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!("dissipation must be finite and >= 0, got {a}")));
        }
    }
    Ok(())
}

/// Picard solve of the `eps` system.
///
/// On budget exhaustion the last iterate is returned with `converged = false`; callers
/// that need a fixed point turn that into [`Error::PicardStalled`].
pub fn solve_mfg_eps(prob: &EpsProblem, opts: &PicardOptions) -> Result<MFGSolution> {
    validate_problem(prob)?;
    let grid = *prob.u0.grid();
    let n_cell = cell_resolution(&grid, prob.epsilon)?;
    let sweep = EpsSweep::new(prob, n_cell)?;
    let init = vec![prob.m_t.values().to_vec(); prob.times.len()];
    let out = picard(&sweep, init, opts)?;
    Ok(MFGSolution {
        grid,
        times: prob.times,
        p_lin: prob.p_lin,
        u_tilde: out.u,
        m: out.m,
        epsilon: prob.epsilon,
        n_cell,
        scheme: sweep.scheme,
        iterations: out.iterations,
        converged: out.converged,
        history: out.history,
    })
}

/// Error out on a solution that did not reach its tolerance.
pub fn require_converged(sol: MFGSolution) -> Result<MFGSolution> {
    if sol.converged {
        Ok(sol)
    } else {
        Err(Error::PicardStalled { iterations: sol.iterations, change: sol.last_change() })
    }
}

/// `t -> int m(., t)`.
pub fn mass_trajectory(sol: &MFGSolution) -> Vec<f64> {
    sol.m.iter().map(|m| integrate_values(&sol.grid, m)).collect()
}

/// Largest deviation of the mass trajectory from its terminal value.
pub fn mass_defect(sol: &MFGSolution) -> f64 {
    let mass = mass_trajectory(sol);
    let last = mass[mass.len() - 1];
    mass.iter().fold(0.0, |a, v| a.max((v - last).abs()))
}

struct Sixth {
    grid: TorusGrid,
    y: Vec<Vec2>,
}

impl Sixth {
    fn new(sol: &MFGSolution) -> Self {
        Sixth { grid: sol.grid, y: sol.cell_coords() }
    }

    fn grad(&self, u: &[f64]) -> Vec<Vec<f64>> {
        torus::grad(&self.grid, u, Order::Sixth)
    }

    fn drift(&self, h: &HamiltonianModel, p: Vec2, du: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dim = self.grid.dim();
        let mut b = vec![vec![0.0; self.grid.len()]; dim];
        for i in 0..self.grid.len() {
            let g = h.dp(full_momentum(p, du, i), self.y[i]);
            for k in 0..dim {
                b[k][i] = g[k];
            }
        }
        b
    }
}

/// Per-step residual of the discrete energy identity
/// `d/dt int u m + int [H - F - Du . D_pH] m = 0`, written for the periodic part of `u`.
///
/// The time pairing follows the scheme (`u^{n+1}` against `m^{n+1} - m^n`, `H` at `u^n`);
/// the spatial derivatives use the sixth-order stencils independently of the scheme.
pub fn energy_identity_residual(sol: &MFGSolution, h: &HamiltonianModel, f: &CouplingModel) -> Vec<f64> {
    let ops = Sixth::new(sol);
    let grid = sol.grid;
    let dt = sol.times.dt();
    let p = sol.p_lin;
    (0..sol.times.steps)
        .map(|n| {
            let (u0, u1) = (&sol.u_tilde[n], &sol.u_tilde[n + 1]);
            let (m0, m1) = (&sol.m[n], &sol.m[n + 1]);
            let du0 = ops.grad(u0);
            let du1 = ops.grad(u1);
            let b1 = ops.drift(h, p, &du1);
            let fv = f.evaluate(&grid, &ops.y, m0);
            let integrand: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let hv = h.value(full_momentum(p, &du0, i), ops.y[i]);
                    let work: f64 = (0..grid.dim()).map(|k| du1[k][i] * b1[k][i]).sum();
                    (hv - fv[i] - work) * m0[i]
                })
                .collect();
            let pair1: Vec<f64> = u1.iter().zip(m1).map(|(a, b)| a * b).collect();
            let pair0: Vec<f64> = u0.iter().zip(m0).map(|(a, b)| a * b).collect();
            (integrate_values(&grid, &pair1) - integrate_values(&grid, &pair0)) / dt
                + integrate_values(&grid, &integrand)
        })
        .collect()
}

/// Sup-norm residuals of the two continuous equations on the stored fields, with the
/// scheme's time pairing and sixth-order spatial stencils.
pub fn pde_residuals(sol: &MFGSolution, h: &HamiltonianModel, f: &CouplingModel) -> (f64, f64) {
    let ops = Sixth::new(sol);
    let grid = sol.grid;
    let dt = sol.times.dt();
    let eps = sol.epsilon;
    let p = sol.p_lin;
    let (mut r_u, mut r_m): (f64, f64) = (0.0, 0.0);
    for n in 0..sol.times.steps {
        let (u0, u1) = (&sol.u_tilde[n], &sol.u_tilde[n + 1]);
        let (m0, m1) = (&sol.m[n], &sol.m[n + 1]);
        let du0 = ops.grad(u0);
        let lu1 = torus::lap(&grid, u1, Order::Sixth);
        let fv = f.evaluate(&grid, &ops.y, m0);
        for i in 0..grid.len() {
            let hv = h.value(full_momentum(p, &du0, i), ops.y[i]);
            r_u = r_u.max(((u1[i] - u0[i]) / dt - eps * lu1[i] + hv - fv[i]).abs());
        }
        let b1 = ops.drift(h, p, &ops.grad(u1));
        let flux: Vec<Vec<f64>> = b1.iter().map(|bk| bk.iter().zip(m0).map(|(b, m)| b * m).collect()).collect();
        let dv = torus::div(&grid, &flux, Order::Sixth);
        let lm0 = torus::lap(&grid, m0, Order::Sixth);
        for i in 0..grid.len() {
            r_m = r_m.max(((m0[i] - m1[i]) / dt - eps * lm0[i] - dv[i]).abs());
        }
    }
    (r_u, r_m)
}

const SOLUTION_FORMAT: &str = "mfgsol";

/// Dump the trajectories to a `.mfgsol` container.
pub fn write_solution(sol: &MFGSolution, path: &Path) -> Result<()> {
    let mut shape = vec![sol.times.len()];
    shape.extend(std::iter::repeat_n(sol.grid.n_axis(), sol.grid.dim()));
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let arrays = vec![
        Array::new("u_tilde", shape.clone(), flat(&sol.u_tilde)),
        Array::new("m", shape, flat(&sol.m)),
    ];
    let header = json!({
        "format": SOLUTION_FORMAT,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "grid": sol.grid,
        "times": sol.times,
        "p_lin": sol.p_lin,
        "epsilon": sol.epsilon,
        "n_cell": sol.n_cell,
        "scheme": sol.scheme,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "history": sol.history,
    });
    container::write(path, &header, &arrays)
}

pub fn read_solution(path: &Path) -> Result<MFGSolution> {
    let (header, arrays) = container::read(path)?;
    if header.get("format").and_then(|v| v.as_str()) != Some(SOLUTION_FORMAT) {
        return Err(Error::Format("not a solution container".into()));
    }
    fn de<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))
    }
    let parse = |key: &str| header.get(key).cloned().ok_or_else(|| Error::Format(format!("missing {key}")));
    let grid: TorusGrid = de(parse("grid")?)?;
    let times: TimeGrid = de(parse("times")?)?;
    let split = |name: &str| -> Result<Vec<Vec<f64>>> {
        let a = container::take(&arrays, name)?;
        Ok(a.data.chunks(grid.len()).map(<[f64]>::to_vec).collect())
    };
    Ok(MFGSolution {
        grid,
        times,
        p_lin: de(parse("p_lin")?)?,
        u_tilde: split("u_tilde")?,
        m: split("m")?,
        epsilon: de(parse("epsilon")?)?,
        n_cell: de(parse("n_cell")?)?,
        scheme: de(parse("scheme")?)?,
        iterations: de(parse("iterations")?)?,
        converged: de(parse("converged")?)?,
        history: de(parse("history")?)?,
    })
}
