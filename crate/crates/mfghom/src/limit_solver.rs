//! The homogenized first-order system
//!
//! ```text
//! u_t + H̄(Du, m) = 0,           u(., 0) = u0
//! m_t + div(b̄(Du, m) m) = 0,    m(., T) = m_T
//! ```
//!
//! with `H̄` and `b̄` interpolated from an [`EffectiveTable`]. For nonlocal couplings the
//! table carries `h̄(p) - strength * m` at frozen levels `m`; the solver uses its first
//! density node to recover `h̄(p)` and subtracts `strength * (rho * m)(x)` itself.

use serde::{Deserialize, Serialize};

use crate::effective::{interpolate, interpolate_clamped, EffectiveTable};
use crate::eps_solver::{
    check_cfl, check_density, one_sided, picard, upwind_backward_step, MFGSolution, PicardOptions, Scheme,
    Sweep, TimeGrid,
};
use crate::error::{Error, Result};
use crate::models::{CouplingKind, CouplingModel, Vec2};
use crate::torus::{self, integrate_values, Order, ScalarField, TorusGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct LimitProblem {
    pub table: EffectiveTable,
    /// Needed for the macro convolution of nonlocal couplings; must match the table's kind.
    pub coupling: CouplingModel,
    pub p_lin: Vec2,
    pub u0: ScalarField,
    pub m_t: ScalarField,
    pub times: TimeGrid,
}

/// Sup-norm residuals of the two discrete limit equations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitResiduals {
    pub hj_residual: f64,
    pub transport_residual: f64,
}

struct LimitOps<'a> {
    prob: &'a LimitProblem,
    grid: TorusGrid,
    dt: f64,
    alpha: f64,
}

impl LimitOps<'_> {
    fn gradient(&self, u: &[f64]) -> Vec<Vec<f64>> {
        torus::grad(&self.grid, u, Order::Second)
    }

    fn momentum(&self, du: &[Vec<f64>], i: usize) -> Vec2 {
        let mut q = self.prob.p_lin;
        for (k, c) in du.iter().enumerate() {
            q[k] += c[i];
        }
        q
    }

    /// `(H̄, b̄)` at one node; `local_m` is the density seen by a local table.
    fn effective(&self, q: Vec2, local_m: f64) -> Result<(f64, Vec2)> {
        let t = &self.prob.table;
        match t.coupling_kind {
            CouplingKind::Local => interpolate_clamped(t, q, local_m),
            CouplingKind::None => interpolate(t, q, t.m_grid[0]),
            CouplingKind::Nonlocal => {
                let m0 = t.m_grid[0];
                let (hv, b) = interpolate(t, q, m0)?;
                let strength = match self.prob.coupling {
                    CouplingModel::Nonlocal { strength, .. } => strength,
                    _ => 0.0,
                };
                Ok((hv + strength * m0, b))
            }
        }
    }

    /// Nonlocal source `strength * (rho * m)`, zero otherwise.
    fn macro_source(&self, m: &[f64]) -> Vec<f64> {
        match self.prob.coupling {
            CouplingModel::Nonlocal { .. } => {
                let y = vec![[0.0, 0.0]; m.len()];
                self.prob.coupling.evaluate(&self.grid, &y, m)
            }
            _ => vec![0.0; m.len()],
        }
    }

    /// Lax-Friedrichs numerical Hamiltonian at every node.
    fn numerical_hamiltonian(&self, u: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        let du = self.gradient(u);
        let (dm, dp) = one_sided(&self.grid, u);
        let f = self.macro_source(m);
        let half = 0.5 * self.alpha;
        (0..u.len())
            .map(|i| {
                let (hv, _) = self.effective(self.momentum(&du, i), m[i])?;
                let spread: f64 = (0..self.grid.dim()).map(|k| dp[k][i] - dm[k][i]).sum();
                Ok(hv - f[i] - half * spread)
            })
            .collect()
    }

    fn drift(&self, u: &[f64], m: &[f64]) -> Result<Vec<Vec<f64>>> {
        let du = self.gradient(u);
        let dim = self.grid.dim();
        let mut b = vec![vec![0.0; u.len()]; dim];
        for i in 0..u.len() {
            let (_, bi) = self.effective(self.momentum(&du, i), m[i])?;
            for k in 0..dim {
                b[k][i] = bi[k];
            }
        }
        Ok(b)
    }
}

impl Sweep for LimitOps<'_> {
    fn forward(&self, m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(m.len());
        out.push(self.prob.u0.values().to_vec());
        for n in 0..self.prob.times.steps {
            let hh = self.numerical_hamiltonian(&out[n], &m[n])?;
            let next = out[n].iter().zip(&hh).map(|(u, h)| u - self.dt * h).collect();
            out.push(next);
        }
        Ok(out)
    }

    fn backward(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k_steps = self.prob.times.steps;
        let mut out = vec![Vec::new(); k_steps + 1];
        out[k_steps] = self.prob.m_t.values().to_vec();
        for n in (0..k_steps).rev() {
            let b = self.drift(&u[n + 1], &out[n + 1])?;
            let speed = b.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            check_cfl(self.dt, self.grid.h(), speed)?;
            let next = upwind_backward_step(&self.grid, None, self.dt, &b, &out[n + 1])?;
            check_density(&next, n)?;
            out[n] = next;
        }
        Ok(out)
    }
}

fn ops(prob: &LimitProblem) -> Result<LimitOps<'_>> {
    if prob.coupling.kind() != prob.table.coupling_kind {
        return Err(Error::InvalidArgument(format!(
            "coupling kind {:?} does not match the table ({:?})",
            prob.coupling.kind(),
            prob.table.coupling_kind
        )));
    }
    let grid = *prob.u0.grid();
    if prob.m_t.grid() != &grid {
        return Err(Error::ShapeMismatch("u0 and m_T live on different grids".into()));
    }
    if grid.dim() != prob.table.dim {
        return Err(Error::ShapeMismatch("table and grid dimensions differ".into()));
    }
    if let Some(i) = prob.m_t.values().iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeDensity { index: i, step: prob.times.steps, value: prob.m_t.values()[i] });
    }
    if integrate_values(&grid, prob.m_t.values()) <= 0.0 {
        return Err(Error::InvalidArgument("m_T must have positive mass".into()));
    }
    let dt = prob.times.dt();
    let alpha = prob.table.lipschitz_p();
    check_cfl(dt, grid.h(), alpha)?;
    check_cfl(dt, grid.h(), prob.table.max_drift())?;
    Ok(LimitOps { prob, grid, dt, alpha })
}

/// Largest stable step for a table on a grid, `0.5 h / max(L_H̄, max |b̄|)`.
pub fn stable_step(table: &EffectiveTable, grid: &TorusGrid) -> f64 {
    let speed = table.lipschitz_p().max(table.max_drift());
    if speed > 0.0 {
        0.5 * grid.h() / speed
    } else {
        f64::INFINITY
    }
}

/// Picard solve of the limit system. The result has `epsilon = 0` and the monotone scheme.
pub fn solve_limit(prob: &LimitProblem, opts: &PicardOptions) -> Result<MFGSolution> {
    let ops = ops(prob)?;
    let init = vec![prob.m_t.values().to_vec(); prob.times.len()];
    let out = picard(&ops, init, opts)?;
    Ok(MFGSolution {
        grid: ops.grid,
        times: prob.times,
        p_lin: prob.p_lin,
        u_tilde: out.u,
        m: out.m,
        epsilon: 0.0,
        n_cell: 0,
        scheme: Scheme::Monotone,
        iterations: out.iterations,
        converged: out.converged,
        history: out.history,
    })
}

/// Re-evaluate both discrete equations on stored fields.
pub fn residual_check(sol: &MFGSolution, prob: &LimitProblem) -> Result<LimitResiduals> {
    let ops = ops(prob)?;
    let dt = sol.times.dt();
    let (mut hj, mut tr): (f64, f64) = (0.0, 0.0);
    for n in 0..sol.times.steps {
        let hh = ops.numerical_hamiltonian(&sol.u_tilde[n], &sol.m[n])?;
        for i in 0..sol.grid.len() {
            hj = hj.max(((sol.u_tilde[n + 1][i] - sol.u_tilde[n][i]) / dt + hh[i]).abs());
        }
        let b = ops.drift(&sol.u_tilde[n + 1], &sol.m[n + 1])?;
        let up = crate::cell::upwind_matrix(&sol.grid, &b).transpose();
        let flux = up.matvec(&sol.m[n]);
        for i in 0..sol.grid.len() {
            tr = tr.max(((sol.m[n][i] - sol.m[n + 1][i]) / dt + flux[i]).abs());
        }
    }
    Ok(LimitResiduals { hj_residual: hj, transport_residual: tr })
}
