//! Convergence from general data: nonlocal couplings against the limit solver, and
//! constant data against the exact limit `p x - t h̄(p, 1)`, `m ≡ 1`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::two_scale::{two_scale_diagnostic, MacroMode, TestFunction};
use super::well_prepared::{
    assemble_report, cell_speed, converged_errors, table_probe, EpsRun, ModulatedData, Reference, ReferenceSpec,
    WellPreparedConfig,
};
use super::{check_eps_list, CellBank, ConvergenceReport, Runtime};
use crate::cell::CellOptions;
use crate::effective::solve_node;
use crate::eps_solver::{Averaging, MFGSolution, PicardOptions};
use crate::error::{Error, Result};
use crate::limit_solver::{residual_check, LimitProblem, LimitResiduals};
use crate::models::{CouplingKind, CouplingModel, HamiltonianModel};
use crate::torus::{ScalarField, TorusGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlocalConfig {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub p: f64,
    pub eps_list: Vec<f64>,
    pub n_cell: usize,
    pub side: usize,
    pub t_final: f64,
    pub data: ModulatedData,
    pub reference: ReferenceSpec,
    pub checkpoints: usize,
    pub cfl: f64,
    pub picard: PicardOptions,
    pub cell: CellOptions,
}

impl Default for NonlocalConfig {
    fn default() -> Self {
        let wp = WellPreparedConfig::default();
        NonlocalConfig {
            hamiltonian: wp.hamiltonian,
            coupling: CouplingModel::Nonlocal { sigma: 0.2, strength: 0.5 },
            p: wp.p,
            eps_list: wp.eps_list,
            n_cell: wp.n_cell,
            side: wp.side,
            t_final: wp.t_final,
            data: wp.data,
            reference: wp.reference,
            checkpoints: wp.checkpoints,
            cfl: wp.cfl,
            picard: PicardOptions { averaging: Averaging::FixedDamping, ..wp.picard },
            cell: wp.cell,
        }
    }
}

impl NonlocalConfig {
    /// The same grids and models as a well-prepared configuration, without the corrector.
    pub fn as_well_prepared(&self) -> WellPreparedConfig {
        WellPreparedConfig {
            hamiltonian: self.hamiltonian.clone(),
            coupling: self.coupling.clone(),
            p: self.p,
            eps_list: self.eps_list.clone(),
            n_cell: self.n_cell,
            side: self.side,
            t_final: self.t_final,
            data: self.data,
            reference: self.reference.clone(),
            checkpoints: self.checkpoints,
            cfl: self.cfl,
            picard: self.picard.clone(),
            cell: self.cell.clone(),
            subtract_corrector: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coupling.kind() != CouplingKind::Nonlocal {
            return Err(Error::InvalidArgument("the nonlocal experiment needs a nonlocal coupling".into()));
        }
        self.as_well_prepared().validate()
    }
}

/// Macro test functions of the weak density error.
pub fn macro_catalog() -> Vec<TestFunction> {
    [MacroMode::One, MacroMode::Cos, MacroMode::Sin]
        .into_iter()
        .map(|macro_mode| TestFunction { macro_mode, cell_cos: false })
        .collect()
}

/// `max_φ int_0^T |∫ (m^eps - m̄) φ|` over [`macro_catalog`].
pub fn weak_density_error(sol: &MFGSolution, reference: &Reference, bank: &CellBank) -> Result<f64> {
    let d = two_scale_diagnostic(sol, reference, bank, &macro_catalog())?;
    Ok(d.into_iter().fold(0.0, f64::max))
}

/// Sup over checkpoints of `|ũ^eps - ũ|`, no corrector removed.
fn value_error(run: &EpsRun, reference: &Reference) -> Result<f64> {
    let stride = run.sol.times.steps / reference.checkpoints;
    let mut e: f64 = 0.0;
    for j in 0..=reference.checkpoints {
        let s = reference.slice(j, &run.grid)?;
        for (a, b) in run.sol.u_tilde[j * stride].iter().zip(&s.u_tilde) {
            e = e.max((a - b).abs());
        }
    }
    Ok(e)
}

pub struct NonlocalRun {
    pub report: ConvergenceReport,
    pub reference: Reference,
    pub limit_residuals: LimitResiduals,
}

pub fn run_nonlocal_convergence(cfg: &NonlocalConfig, rt: &Runtime) -> Result<NonlocalRun> {
    cfg.validate()?;
    let wp = cfg.as_well_prepared();
    rt.install(|| {
        let reference = wp.reference(rt)?;
        let bank = CellBank::new(&cfg.hamiltonian, &cfg.coupling, &wp.cell_options());
        let speed = 1.5 * cell_speed(&bank, &table_probe(&reference.table))?;
        let side = cfg.side as f64;
        let runs = wp.family(speed).solve(|_, grid| {
            Ok((
                ScalarField::from_fn(grid, |x| cfg.data.u0(x[0], side))?,
                ScalarField::from_fn(grid, |x| cfg.data.m_t(x[0], side))?,
            ))
        })?;
        let errors = converged_errors(&runs, |r| Ok((value_error(r, &reference)?, weak_density_error(&r.sol, &reference, &bank)?)))?;
        let prob = LimitProblem {
            table: reference.table.clone(),
            coupling: cfg.coupling.clone(),
            p_lin: reference.sol.p_lin,
            u0: ScalarField::new(reference.sol.grid, reference.sol.u_tilde[0].clone())?,
            m_t: ScalarField::new(reference.sol.grid, reference.sol.m.last().expect("nonempty").clone())?,
            times: reference.sol.times,
        };
        let limit_residuals = residual_check(&reference.sol, &prob)?;
        let metadata = json!({
            "experiment": "nonlocal",
            "hamiltonian": cfg.hamiltonian,
            "coupling": cfg.coupling,
            "p": cfg.p,
            "n_cell": cfg.n_cell,
            "side": cfg.side,
            "t_final": cfg.t_final,
            "data": cfg.data,
            "reference": {
                "spec": cfg.reference,
                "steps": reference.sol.times.steps,
                "table_hash": reference.table.model_hash,
                "residuals": limit_residuals,
            },
            "checkpoints": cfg.checkpoints,
            "cfl": cfg.cfl,
            "picard": cfg.picard,
            "cell_tol": cfg.cell.tol,
            "u_error": "sup over checkpoints, no corrector removed",
            "m_error": "max over macro test functions of the time-L1 weak discrepancy",
        });
        let report = assemble_report(&runs, errors, metadata)?;
        Ok(NonlocalRun { report, reference, limit_residuals })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstantDataConfig {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub p: f64,
    pub eps_list: Vec<f64>,
    pub n_cell: usize,
    pub t_final: f64,
    pub checkpoints: usize,
    pub cfl: f64,
    pub picard: PicardOptions,
    pub cell: CellOptions,
}

impl Default for ConstantDataConfig {
    fn default() -> Self {
        let wp = WellPreparedConfig::default();
        ConstantDataConfig {
            hamiltonian: wp.hamiltonian,
            coupling: CouplingModel::None,
            p: wp.p,
            eps_list: wp.eps_list,
            n_cell: wp.n_cell,
            t_final: wp.t_final,
            checkpoints: wp.checkpoints,
            cfl: wp.cfl,
            picard: wp.picard,
            cell: wp.cell,
        }
    }
}

impl ConstantDataConfig {
    pub fn validate(&self) -> Result<()> {
        self.hamiltonian.validate()?;
        self.coupling.validate()?;
        self.picard.validate()?;
        check_eps_list(&self.eps_list)?;
        if self.n_cell < 4 || !(self.t_final > 0.0) || self.checkpoints == 0 {
            return Err(Error::InvalidArgument("n_cell >= 4, t_final > 0 and checkpoints > 0 are required".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return Err(Error::InvalidArgument(format!("cfl must lie in (0, 0.5], got {}", self.cfl)));
        }
        Ok(())
    }
}

/// `||g||_{H^-1}` of a mean-zero periodic function on a 1-D grid:
/// `(L sum_{k != 0} |ĝ_k|^2 / (2 pi k / L)^2)^{1/2}`.
pub fn h_minus_one(grid: &TorusGrid, g: &[f64]) -> f64 {
    let n = g.len();
    let side = grid.side();
    let mut data: Vec<Complex<f64>> = g.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut data);
    let mut s = 0.0;
    for (i, c) in data.iter().enumerate().skip(1) {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        let w = 2.0 * std::f64::consts::PI * k / side;
        s += (c / n as f64).norm_sqr() / (w * w);
    }
    (side * s).sqrt()
}

/// Constant data `u0 = p x`, `m_T = 1`: errors against `ũ = -t h̄(p, 1)` in sup norm
/// and against `m ≡ 1` in `H^-1`, max over checkpoints.
pub fn run_constant_data(cfg: &ConstantDataConfig, rt: &Runtime) -> Result<ConvergenceReport> {
    cfg.validate()?;
    rt.install(|| {
        let opts = CellOptions { n: cfg.n_cell, dim: 1, ..cfg.cell.clone() };
        let cs = solve_node(&cfg.hamiltonian, &cfg.coupling, [cfg.p, 0.0], 1.0, &opts)?;
        let h_bar = cs.h_bar;
        let bank = CellBank::new(&cfg.hamiltonian, &cfg.coupling, &opts);
        let speed = 1.5 * cell_speed(&bank, &[([cfg.p, 0.0], 1.0)])?.max(cfg.p.abs());
        let wp = WellPreparedConfig {
            hamiltonian: cfg.hamiltonian.clone(),
            coupling: cfg.coupling.clone(),
            p: cfg.p,
            eps_list: cfg.eps_list.clone(),
            n_cell: cfg.n_cell,
            side: 1,
            t_final: cfg.t_final,
            checkpoints: cfg.checkpoints,
            cfl: cfg.cfl,
            picard: cfg.picard.clone(),
            ..WellPreparedConfig::default()
        };
        let runs = wp
            .family(speed)
            .solve(|_, grid| Ok((ScalarField::constant(grid, 0.0), ScalarField::constant(grid, 1.0))))?;
        let errors = converged_errors(&runs, |r| {
            let stride = r.sol.times.steps / cfg.checkpoints;
            let (mut eu, mut em): (f64, f64) = (0.0, 0.0);
            for j in 0..=cfg.checkpoints {
                let n = j * stride;
                let exact = -r.sol.times.t(n) * h_bar;
                eu = r.sol.u_tilde[n].iter().fold(eu, |a, u| a.max((u - exact).abs()));
                let g: Vec<f64> = r.sol.m[n].iter().map(|m| m - 1.0).collect();
                em = em.max(h_minus_one(&r.grid, &g));
            }
            Ok((eu, em))
        })?;
        let metadata = json!({
            "experiment": "constant-data",
            "hamiltonian": cfg.hamiltonian,
            "coupling": cfg.coupling,
            "p": cfg.p,
            "h_bar": h_bar,
            "n_cell": cfg.n_cell,
            "t_final": cfg.t_final,
            "checkpoints": cfg.checkpoints,
            "cfl": cfg.cfl,
            "picard": cfg.picard,
            "cell_tol": cfg.cell.tol,
            "u_error": "sup over checkpoints of |u - (p x - t h_bar(p, 1))|",
            "m_error": "max over checkpoints of the H^-1 norm of m - 1",
        });
        assemble_report(&runs, errors, metadata)
    })
}
