//! Variational check for couplings with a primitive `𝓕` (`∂m 𝓕 = F`).
//!
//! In reversed time `s = T - t` the eps solver runs `u` forward from the terminal
//! cost `u_T` and `m` backward from the initial density `m_0`. With drift controls
//! `b^n` and the densities `m^n` they transport,
//!
//! ```text
//! J(b, m) = sum_n dt ∫ [H*(b^n, x/eps) m^n + 𝓕(x/eps, m^n)] + ∫ u_T m^0
//! ```
//!
//! is minimized at `b^n = D_pH(Du^{n+1}, x/eps)`. Summation by parts against the
//! discrete equations gives
//!
//! ```text
//! J = <u^K, m_0> + sum_n dt ∫ (𝓕(m^n) - F(m^n) m^n) + sum_n dt <H(Du^n) - H(Du^{n+1}), m^n>
//! ```
//!
//! The last sum comes from the explicit Hamiltonian step and is the reported defect.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::well_prepared::{cell_speed, ModulatedData};
use super::{fit_rate, CellBank, Runtime};
use crate::cell::{derivative_matrix, laplacian_matrix, CellOptions};
use crate::eps_solver::{
    aligned_grid, centered_backward_step, check_density, require_converged, solve_mfg_eps, Averaging, EpsProblem,
    MFGSolution, PicardOptions, SchemeChoice, TimeGrid,
};
use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::models::{CouplingModel, Hamiltonian, HamiltonianModel, LocalLaw, Vec2};
use crate::torus::{inner, integrate_values, Order, ScalarField, TorusGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialConfig {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub eps: f64,
    pub n_cell: usize,
    pub side: usize,
    pub t_final: f64,
    /// `u_T = a sin(2 pi x / L)`, `m_0 = 1 + b cos(2 pi x / L)`.
    pub data: ModulatedData,
    /// `dt = cfl * h / speed`.
    pub cfl: f64,
    pub perturbations: usize,
    /// Sup norm of each control perturbation.
    pub amplitude: f64,
    pub seed: u64,
    /// Cell resolutions of the refinement study for the duality defect.
    pub refinement: Vec<usize>,
    pub picard: PicardOptions,
    pub cell: CellOptions,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig {
            hamiltonian: HamiltonianModel::WeightedQuadratic { amplitude: 1.0 },
            coupling: CouplingModel::Local(LocalLaw::Linear { strength: 1.0, amplitude: 0.5 }),
            eps: 0.25,
            n_cell: 16,
            side: 1,
            t_final: 0.25,
            data: ModulatedData { u_amplitude: 0.1, m_amplitude: 0.2 },
            cfl: 0.4,
            perturbations: 20,
            amplitude: 1e-2,
            seed: 7,
            refinement: vec![8, 16, 32, 64],
            picard: PicardOptions { tol: 1e-12, max_iters: 500, averaging: Averaging::FixedDamping, ..PicardOptions::default() },
            cell: CellOptions::default(),
        }
    }
}

impl PotentialConfig {
    pub fn validate(&self) -> Result<()> {
        self.hamiltonian.validate()?;
        self.coupling.validate()?;
        self.data.validate()?;
        self.picard.validate()?;
        if !self.coupling.has_primitive() {
            return Err(Error::PrimitiveMissing);
        }
        if self.perturbations == 0 || !(self.amplitude > 0.0) {
            return Err(Error::InvalidArgument("need at least one perturbation of positive amplitude".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.5) || !(self.t_final > 0.0) || self.side == 0 {
            return Err(Error::InvalidArgument("cfl in (0, 0.5], t_final > 0 and side > 0 are required".into()));
        }
        if self.refinement.iter().any(|&n| n < 4) {
            return Err(Error::InvalidArgument("refinement resolutions must be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityPoint {
    pub n_cell: usize,
    pub h: f64,
    pub dt: f64,
    pub duality_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    #[serde(rename = "J_opt")]
    pub j_opt: f64,
    #[serde(rename = "J_perturbed")]
    pub j_perturbed: Vec<f64>,
    pub duality_defect: f64,
    /// `min(J_perturbed) - J_opt`.
    pub min_gap: f64,
    pub refinement: Vec<DualityPoint>,
    /// Least-squares slope of the defect against `dt`.
    pub duality_rate: f64,
}

/// Discrete operators of the reversed eps system on one grid.
pub struct PotentialProblem {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub grid: TorusGrid,
    pub y: Vec<Vec2>,
    pub times: TimeGrid,
    pub eps: f64,
    pub u_terminal: Vec<f64>,
    pub m_initial: Vec<f64>,
    d: SparseMatrix,
    diffusion: SparseMatrix,
}

impl PotentialProblem {
    pub fn new(
        hamiltonian: &HamiltonianModel,
        coupling: &CouplingModel,
        grid: TorusGrid,
        n_cell: usize,
        eps: f64,
        times: TimeGrid,
        u_terminal: Vec<f64>,
        m_initial: Vec<f64>,
    ) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(Error::InvalidArgument("the potential check is implemented in one dimension".into()));
        }
        if !coupling.has_primitive() {
            return Err(Error::PrimitiveMissing);
        }
        if u_terminal.len() != grid.len() || m_initial.len() != grid.len() {
            return Err(Error::ShapeMismatch("terminal cost or initial density has the wrong length".into()));
        }
        Ok(PotentialProblem {
            hamiltonian: hamiltonian.clone(),
            coupling: coupling.clone(),
            y: grid.cell_coords(n_cell),
            d: derivative_matrix(&grid, 0, Order::Fourth),
            diffusion: laplacian_matrix(&grid, Order::Fourth).scaled(eps),
            grid,
            times,
            eps,
            u_terminal,
            m_initial,
        })
    }

    /// Solve the reversed system with the centered scheme.
    pub fn solve(&self, picard: &PicardOptions) -> Result<MFGSolution> {
        let prob = EpsProblem {
            hamiltonian: self.hamiltonian.clone(),
            coupling: self.coupling.clone(),
            p_lin: [0.0, 0.0],
            u0: ScalarField::new(self.grid, self.u_terminal.clone())?,
            m_t: ScalarField::new(self.grid, self.m_initial.clone())?,
            epsilon: self.eps,
            times: self.times,
            scheme: SchemeChoice::Centered,
            dissipation: None,
        };
        require_converged(solve_mfg_eps(&prob, picard)?)
    }

    fn momentum(&self, u: &[f64]) -> Vec<f64> {
        self.d.matvec(u)
    }

    /// Controls `b^n = D_pH(Du^{n+1})` for `n = 0..K`.
    pub fn optimal_controls(&self, sol: &MFGSolution) -> Vec<Vec<f64>> {
        (0..self.times.steps)
            .map(|n| {
                let du = self.momentum(&sol.u_tilde[n + 1]);
                du.iter().zip(&self.y).map(|(&q, &y)| self.hamiltonian.dp([q, 0.0], y)[0]).collect()
            })
            .collect()
    }

    /// Densities transported by `controls` from `m_0`.
    pub fn transport(&self, controls: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k = self.times.steps;
        if controls.len() != k {
            return Err(Error::ShapeMismatch(format!("need {k} controls, got {}", controls.len())));
        }
        let mut m = vec![Vec::new(); k + 1];
        m[k] = self.m_initial.clone();
        for n in (0..k).rev() {
            let next = centered_backward_step(
                &self.grid,
                std::slice::from_ref(&self.d),
                &self.diffusion,
                self.times.dt(),
                std::slice::from_ref(&controls[n]),
                &m[n + 1],
            )?;
            check_density(&next, n)?;
            m[n] = next;
        }
        Ok(m)
    }

    fn primitive(&self, m: &[f64]) -> Vec<f64> {
        m.iter().zip(&self.y).map(|(&v, &y)| self.coupling.primitive(y, v).unwrap_or(0.0)).collect()
    }

    /// `J(b, m)`.
    pub fn objective(&self, controls: &[Vec<f64>], m: &[Vec<f64>]) -> f64 {
        let dt = self.times.dt();
        let mut j = inner(&self.grid, &self.u_terminal, &m[0]);
        for n in 0..self.times.steps {
            let big_f = self.primitive(&m[n]);
            let run: Vec<f64> = (0..self.grid.len())
                .map(|i| self.hamiltonian.conjugate([controls[n][i], 0.0], self.y[i]) * m[n][i] + big_f[i])
                .collect();
            j += dt * integrate_values(&self.grid, &run);
        }
        j
    }

    /// `<u^K, m_0> + sum_n dt ∫ (𝓕(m^n) - F(m^n) m^n)`.
    pub fn dual_value(&self, sol: &MFGSolution) -> f64 {
        let dt = self.times.dt();
        let k = self.times.steps;
        let mut v = inner(&self.grid, &sol.u_tilde[k], &self.m_initial);
        for n in 0..k {
            let m = &sol.m[n];
            let big_f = self.primitive(m);
            let f = self.coupling.evaluate(&self.grid, &self.y, m);
            let g: Vec<f64> = (0..m.len()).map(|i| big_f[i] - f[i] * m[i]).collect();
            v += dt * integrate_values(&self.grid, &g);
        }
        v
    }

    /// Smooth seeded perturbation with sup norm `amplitude`, one field per control step.
    pub fn perturbation(&self, seed: u64, amplitude: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.grid.side();
        let mut coef = [[0.0; 4]; 2];
        for c in coef.iter_mut().flatten() {
            *c = rng.random_range(-1.0..1.0);
        }
        let t_final = self.times.t_final;
        let raw: Vec<Vec<f64>> = (0..self.times.steps)
            .map(|n| {
                let tau = [1.0, (PI * self.times.t(n) / t_final).cos()];
                (0..self.grid.len())
                    .map(|i| {
                        let x = self.grid.coords(i)[0];
                        let modes = [
                            (2.0 * PI * x / side).cos(),
                            (2.0 * PI * x / side).sin(),
                            (4.0 * PI * x / side).cos(),
                            (4.0 * PI * x / side).sin(),
                        ];
                        (0..2).map(|a| tau[a] * (0..4).map(|b| coef[a][b] * modes[b]).sum::<f64>()).sum()
                    })
                    .collect()
            })
            .collect();
        let sup = raw.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let s = if sup > 0.0 { amplitude / sup } else { 0.0 };
        raw.into_iter().map(|r| r.into_iter().map(|v| v * s).collect()).collect()
    }
}

fn problem_at(cfg: &PotentialConfig, n_cell: usize, speed: f64) -> Result<PotentialProblem> {
    let grid = aligned_grid(1, cfg.side, n_cell, cfg.eps)?;
    let side = cfg.side as f64;
    let steps = ((cfg.t_final * speed) / (cfg.cfl * grid.h())).ceil().max(1.0) as usize;
    let times = TimeGrid::new(cfg.t_final, steps)?;
    let x: Vec<f64> = (0..grid.len()).map(|i| grid.coords(i)[0]).collect();
    let u_t = x.iter().map(|&x| cfg.data.u0(x, side)).collect();
    let m0 = x.iter().map(|&x| cfg.data.m_t(x, side)).collect();
    PotentialProblem::new(&cfg.hamiltonian, &cfg.coupling, grid, n_cell, cfg.eps, times, u_t, m0)
}

fn drift_bound(cfg: &PotentialConfig) -> Result<f64> {
    let opts = CellOptions { n: cfg.n_cell, dim: 1, ..cfg.cell.clone() };
    let bank = CellBank::new(&cfg.hamiltonian, &CouplingModel::None, &opts);
    let pmax = cfg.data.u_amplitude.abs() * 2.0 * PI / cfg.side as f64;
    Ok(1.5 * cell_speed(&bank, &[([-pmax, 0.0], 1.0), ([0.0, 0.0], 1.0), ([pmax, 0.0], 1.0)])?.max(pmax).max(1e-3))
}

/// `(J_opt, duality defect)` on one grid, with the problem and solution.
fn duality_at(cfg: &PotentialConfig, n_cell: usize, speed: f64) -> Result<(PotentialProblem, MFGSolution, f64, f64)> {
    let prob = problem_at(cfg, n_cell, speed)?;
    let sol = prob.solve(&cfg.picard)?;
    let j_opt = prob.objective(&prob.optimal_controls(&sol), &sol.m);
    let defect = (j_opt - prob.dual_value(&sol)).abs();
    Ok((prob, sol, j_opt, defect))
}

pub fn potential_check(cfg: &PotentialConfig, rt: &Runtime) -> Result<PotentialReport> {
    cfg.validate()?;
    rt.install(|| {
        let speed = drift_bound(cfg)?;
        let (prob, sol, j_opt, duality_defect) = duality_at(cfg, cfg.n_cell, speed)?;
        let b = prob.optimal_controls(&sol);
        let j_perturbed = (0..cfg.perturbations)
            .map(|k| {
                let delta = prob.perturbation(cfg.seed.wrapping_add(k as u64), cfg.amplitude);
                let bp: Vec<Vec<f64>> =
                    b.iter().zip(&delta).map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + y).collect()).collect();
                let m = prob.transport(&bp)?;
                Ok(prob.objective(&bp, &m))
            })
            .collect::<Result<Vec<f64>>>()?;
        let min_gap = j_perturbed.iter().fold(f64::INFINITY, |a, &v| a.min(v)) - j_opt;
        let mut refinement = Vec::new();
        for &n in &cfg.refinement {
            let (p, _, _, d) = duality_at(cfg, n, speed)?;
            refinement.push(DualityPoint { n_cell: n, h: p.grid.h(), dt: p.times.dt(), duality_defect: d });
        }
        let dts: Vec<f64> = refinement.iter().map(|r| r.dt).collect();
        let defects: Vec<f64> = refinement.iter().map(|r| r.duality_defect).collect();
        let duality_rate = fit_rate(&dts, &defects)?;
        Ok(PotentialReport { j_opt, j_perturbed, duality_defect, min_gap, refinement, duality_rate })
    })
}
