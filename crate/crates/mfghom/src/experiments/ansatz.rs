//! Residuals of the two-scale approximate solution
//!
//! ```text
//! û = ū(x, t) + eps v(x/eps; P, m̄),     m̂ = m̄ (μ(x/eps; P, m̄) + eps ν(x/eps; x, t))
//! ```
//!
//! in the discrete eps system, with `P = Dū` and `ν` solving the cell equation
//! `Lap ν + div(b0 ν) = B2` whose source collects every order-one term of the
//! transport residual. Macro derivatives of cell quantities are taken through the cell
//! parameters, `∂x v = v_P ∂x P + v_m ∂x m̄`, with central differences in `(P, m)`.
//!
//! One-dimensional, uncoupled or locally coupled models only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::well_prepared::{Reference, WellPreparedConfig};
use super::{CellBank, MacroSlice};
use crate::cell::{derivative_matrix, laplacian_matrix, nu_corrector, CellOps, CellSolution};
use crate::eps_solver::aligned_grid;
use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::models::{CouplingKind, CouplingModel, Hamiltonian, HamiltonianModel};
use crate::torus::{integrate_values, Order, ScalarField, TorusGrid, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnsatzResiduals {
    pub eps: f64,
    /// Sup over nodes and checkpoints of the HJB residual.
    pub hjb_residual_sup: f64,
    /// Max over checkpoints of the L1 norm of the Fokker-Planck residual.
    #[serde(rename = "fp_residual_L1")]
    pub fp_residual_l1: f64,
    /// Largest `|int B2|` met while building `ν`.
    pub fredholm_defect: f64,
}

/// Relative step of the parameter differences.
const PARAM_STEP: f64 = 1e-4;

/// Cell quantities at one macro node, with their parameter derivatives.
struct NodeCell {
    h_bar: f64,
    v: Vec<f64>,
    mu: Vec<f64>,
    /// `b0 = H_p(P + Dv, y)`.
    b0: Vec<f64>,
    /// `H_pp(y)` of the (quadratic) Hamiltonian.
    hpp: Vec<f64>,
    /// `(d/dP, d/dm)` of `v`, `mu`, `b0` and `h_bar`.
    dv: [Vec<f64>; 2],
    dmu: [Vec<f64>; 2],
    db0: [Vec<f64>; 2],
    dh: [f64; 2],
}

/// `(A g)_j = sum_s w_s s g_{j+s}` for the fourth-order first-derivative weights `w`.
fn stencil_moment(grid: &TorusGrid, g: &[f64]) -> Vec<f64> {
    let w = Order::Fourth.d1();
    (0..g.len()).map(|i| w.iter().map(|&(o, c)| c * o as f64 * g[grid.shift(i, 0, o)]).sum()).collect()
}

fn central(plus: &[f64], minus: &[f64], step: f64) -> Vec<f64> {
    plus.iter().zip(minus).map(|(a, b)| (a - b) / (2.0 * step)).collect()
}

fn node_cell(
    h: &HamiltonianModel,
    ops: &CellOps,
    cells: &[std::sync::Arc<CellSolution>],
    steps: [f64; 2],
) -> NodeCell {
    let drift = |cs: &CellSolution| ops.drift(h, cs.p, cs.v.values()).swap_remove(0);
    let (c0, cp, cm) = (&cells[0], &cells[1], &cells[2]);
    let b0 = drift(c0);
    let hpp: Vec<f64> = ops.y.iter().map(|&y| h.dpp(c0.p, y)[0]).collect();
    let diff = |a: &CellSolution, b: &CellSolution, s: f64| {
        (
            central(a.v.values(), b.v.values(), s),
            central(a.mu.values(), b.mu.values(), s),
            central(&drift(a), &drift(b), s),
            (a.h_bar - b.h_bar) / (2.0 * s),
        )
    };
    let (vp, mup, bp, hp) = diff(cp, cm, steps[0]);
    let zero = vec![0.0; b0.len()];
    let (vm, mum, bm, hm) = if cells.len() == 5 {
        diff(&cells[3], &cells[4], steps[1])
    } else {
        (zero.clone(), zero.clone(), zero.clone(), 0.0)
    };
    NodeCell {
        h_bar: c0.h_bar,
        v: c0.v.values().to_vec(),
        mu: c0.mu.values().to_vec(),
        b0,
        hpp,
        dv: [vp, vm],
        dmu: [mup, mum],
        db0: [bp, bm],
        dh: [hp, hm],
    }
}

/// Order-one fields of the ansatz at one node: time rates of the cell parameters,
/// `b0`, and the `ν` source before the `1/m̄` factor is divided out.
struct NodeTerms {
    /// `(∂t P, ∂t m̄)`.
    rates: [f64; 2],
    nu: Vec<f64>,
    defect: f64,
}

fn node_terms(cell_grid: &TorusGrid, d: &SparseMatrix, nc: &NodeCell, s: &MacroSlice, i: usize, opts: &crate::cell::CellOptions) -> Result<NodeTerms> {
    let n = nc.mu.len();
    let (m, dm) = (s.m[i], s.dm[i]);
    let x_rate = [s.q[i], dm];
    let mix = |f: &[Vec<f64>; 2], j: usize| x_rate[0] * f[0][j] + x_rate[1] * f[1][j];
    let mu_x: Vec<f64> = (0..n).map(|j| mix(&nc.dmu, j)).collect();
    let b0_x: Vec<f64> = (0..n).map(|j| mix(&nc.db0, j)).collect();
    let v_x: Vec<f64> = (0..n).map(|j| mix(&nc.dv, j)).collect();
    let b_bar = integrate_values(cell_grid, &nc.b0.iter().zip(&nc.mu).map(|(b, u)| b * u).collect::<Vec<_>>());
    let b_bar_x = integrate_values(
        cell_grid,
        &(0..n).map(|j| b0_x[j] * nc.mu[j] + nc.b0[j] * mu_x[j]).collect::<Vec<_>>(),
    );
    let t_p = -(nc.dh[0] * x_rate[0] + nc.dh[1] * x_rate[1]);
    let t_m = -(dm * b_bar + m * b_bar_x);
    let rates = [t_p, t_m];

    let g1: Vec<f64> = (0..n).map(|j| dm * nc.mu[j] + m * mu_x[j]).collect();
    let flux_x: Vec<f64> = (0..n).map(|j| dm * nc.b0[j] * nc.mu[j] + m * (b0_x[j] * nc.mu[j] + nc.b0[j] * mu_x[j])).collect();
    let b1: Vec<f64> = stencil_moment(cell_grid, &v_x).iter().zip(&nc.hpp).map(|(a, h)| a * h).collect();
    let b1mu: Vec<f64> = b1.iter().zip(&nc.mu).map(|(a, b)| a * b).collect();
    let cross = d.matvec(&g1);
    let moment = stencil_moment(cell_grid, &flux_x);
    let drift1 = d.matvec(&b1mu);
    let rhs: Vec<f64> = (0..n)
        .map(|j| {
            let time = t_m * nc.mu[j] + m * (nc.dmu[0][j] * t_p + nc.dmu[1][j] * t_m);
            -(time + 2.0 * cross[j] + moment[j] + m * drift1[j]) / m
        })
        .collect();
    let defect = integrate_values(cell_grid, &rhs).abs();
    let drift = VectorField::new(*cell_grid, vec![nc.b0.clone()])?;
    let nu = nu_corrector(&ScalarField::new(*cell_grid, rhs)?, &drift, opts)?;
    Ok(NodeTerms { rates, nu: nu.into_values(), defect })
}

/// Residuals of the ansatz built on `reference` at one `eps`.
pub fn run_ansatz_residuals(
    h: &HamiltonianModel,
    f: &CouplingModel,
    reference: &Reference,
    eps: f64,
    bank: &CellBank,
) -> Result<AnsatzResiduals> {
    let opts = bank.options().clone();
    if opts.dim != 1 || reference.sol.grid.dim() != 1 {
        return Err(Error::InvalidArgument("ansatz residuals are implemented in one dimension".into()));
    }
    if f.kind() == CouplingKind::Nonlocal {
        return Err(Error::InvalidArgument("ansatz residuals need an uncoupled or locally coupled model".into()));
    }
    if opts.order != Order::Fourth {
        return Err(Error::InvalidArgument("ansatz residuals need fourth-order cell stencils".into()));
    }
    let n_cell = opts.n;
    let side = reference.sol.grid.cells_per_dim();
    let grid = aligned_grid(1, side, n_cell, eps)?;
    let cell_grid = opts.grid()?;
    let cell_ops = CellOps::new(cell_grid, Order::Fourth);
    let d_cell = derivative_matrix(&cell_grid, 0, Order::Fourth);
    let d = derivative_matrix(&grid, 0, Order::Fourth);
    let dt_ = d.transpose();
    let lap = laplacian_matrix(&grid, Order::Fourth);
    let y = grid.cell_coords(n_cell);
    let p_lin = reference.sol.p_lin;
    let coupled = bank.coupled();

    let nodes_at = |n: usize| -> Result<(MacroSlice, Vec<(NodeCell, NodeTerms)>)> {
        let s = reference.slice_at_step(n, &grid)?;
        let len = s.p.len();
        let steps: Vec<[f64; 2]> =
            (0..len).map(|i| [PARAM_STEP * s.p[i].abs().max(1.0), PARAM_STEP * s.m[i].abs().max(1.0)]).collect();
        let per = if coupled { 5 } else { 3 };
        let mut pts = Vec::with_capacity(per * len);
        for i in 0..len {
            let (p, m, [sp, sm]) = (s.p[i], s.m[i], steps[i]);
            pts.extend([([p, 0.0], m), ([p + sp, 0.0], m), ([p - sp, 0.0], m)]);
            if coupled {
                pts.extend([([p, 0.0], m + sm), ([p, 0.0], m - sm)]);
            }
        }
        let cells = bank.get(&pts)?;
        let nodes = (0..len)
            .into_par_iter()
            .map(|i| {
                let nc = node_cell(h, &cell_ops, &cells[per * i..per * (i + 1)], steps[i]);
                let nt = node_terms(&cell_grid, &d_cell, &nc, &s, i, &opts)?;
                Ok((nc, nt))
            })
            .collect::<Result<_>>()?;
        Ok((s, nodes))
    };
    // m̄ ν on the eps grid, for the time derivative of the density correction
    let m_nu = |s: &MacroSlice, nodes: &[(NodeCell, NodeTerms)]| -> Vec<f64> {
        nodes.iter().enumerate().map(|(i, (_, nt))| s.m[i] * nt.nu[i % n_cell]).collect()
    };
    let k_ref = reference.sol.times.steps;
    let dt_ref = reference.sol.times.dt();

    let mut out = AnsatzResiduals { eps, hjb_residual_sup: 0.0, fp_residual_l1: 0.0, fredholm_defect: 0.0 };
    for j in 0..=reference.checkpoints {
        let n = j * reference.stride;
        let (s, nodes) = nodes_at(n)?;
        let len = s.p.len();
        let (lo, hi) = (n.saturating_sub(1), (n + 1).min(k_ref));
        let (s_lo, n_lo) = nodes_at(lo)?;
        let (s_hi, n_hi) = nodes_at(hi)?;
        let nu_rate: Vec<f64> = m_nu(&s_hi, &n_hi)
            .iter()
            .zip(m_nu(&s_lo, &n_lo))
            .map(|(a, b)| (a - b) / ((hi - lo) as f64 * dt_ref))
            .collect();
        let mut u_hat = vec![0.0; len];
        let mut m_hat = vec![0.0; len];
        let mut u_dot = vec![0.0; len];
        let mut m_dot = vec![0.0; len];
        for (i, (nc, nt)) in nodes.iter().enumerate() {
            let c = i % n_cell;
            let [t_p, t_m] = nt.rates;
            u_hat[i] = s.u_tilde[i] + eps * nc.v[c];
            m_hat[i] = s.m[i] * (nc.mu[c] + eps * nt.nu[c]);
            u_dot[i] = -nc.h_bar + eps * (nc.dv[0][c] * t_p + nc.dv[1][c] * t_m);
            m_dot[i] = t_m * nc.mu[c] + s.m[i] * (nc.dmu[0][c] * t_p + nc.dmu[1][c] * t_m) + eps * nu_rate[i];
            out.fredholm_defect = out.fredholm_defect.max(nt.defect);
        }
        let du = d.matvec(&u_hat);
        let lu = lap.matvec(&u_hat);
        let lm = lap.matvec(&m_hat);
        let mut flux = vec![0.0; len];
        for i in 0..len {
            let q = [p_lin[0] + du[i], 0.0];
            let r = u_dot[i] - eps * lu[i] + h.value(q, y[i]) - f.local(y[i], m_hat[i]);
            out.hjb_residual_sup = out.hjb_residual_sup.max(r.abs());
            flux[i] = h.dp(q, y[i])[0] * m_hat[i];
        }
        let div = dt_.matvec(&flux);
        let r: Vec<f64> = (0..len).map(|i| (m_dot[i] + eps * lm[i] - div[i]).abs()).collect();
        out.fp_residual_l1 = out.fp_residual_l1.max(integrate_values(&grid, &r));
    }
    Ok(out)
}

/// Ansatz residuals for every eps of a well-prepared configuration.
pub fn run_ansatz_family(cfg: &WellPreparedConfig, reference: &Reference, bank: &CellBank) -> Result<Vec<AnsatzResiduals>> {
    cfg.eps_list.iter().map(|&eps| run_ansatz_residuals(&cfg.hamiltonian, &cfg.coupling, reference, eps, bank)).collect()
}
