//! Two-scale weak limits of the density: `m^eps(x, t) φ(x, x/eps)` against
//! `m̄(x, t) μ(y; Dū, m̄) φ(x, y)` integrated in `(x, y)`, then in time.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::well_prepared::{run_well_prepared, Reference, WellPreparedConfig};
use super::{CellBank, Runtime};
use crate::eps_solver::MFGSolution;
use crate::error::{Error, Result};
use crate::torus::integrate_values;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroMode {
    One,
    /// `cos(2 pi x / L)`
    Cos,
    /// `sin(2 pi x / L)`
    Sin,
}

/// `φ(x, y) = a(x) b(y)` with `b = 1` or `cos(2 pi y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestFunction {
    pub macro_mode: MacroMode,
    pub cell_cos: bool,
}

impl TestFunction {
    pub fn name(&self) -> String {
        let a = match self.macro_mode {
            MacroMode::One => "1",
            MacroMode::Cos => "cos(2πx/L)",
            MacroMode::Sin => "sin(2πx/L)",
        };
        if self.cell_cos {
            format!("{a}·cos(2πy)")
        } else {
            a.to_string()
        }
    }

    pub fn macro_value(&self, x: f64, side: f64) -> f64 {
        match self.macro_mode {
            MacroMode::One => 1.0,
            MacroMode::Cos => (2.0 * PI * x / side).cos(),
            MacroMode::Sin => (2.0 * PI * x / side).sin(),
        }
    }

    pub fn cell_value(&self, y: f64) -> f64 {
        if self.cell_cos {
            (2.0 * PI * y).cos()
        } else {
            1.0
        }
    }
}

/// `{1, cos, sin}(x) × {1, cos(2 pi y)}`.
pub fn default_catalog() -> Vec<TestFunction> {
    let mut out = Vec::new();
    for cell_cos in [false, true] {
        for macro_mode in [MacroMode::One, MacroMode::Cos, MacroMode::Sin] {
            out.push(TestFunction { macro_mode, cell_cos });
        }
    }
    out
}

/// Trapezoid weights on `checkpoints + 1` equispaced times over `[0, T]`.
pub(crate) fn trapezoid(t_final: f64, checkpoints: usize) -> Vec<f64> {
    let w = t_final / checkpoints as f64;
    (0..=checkpoints).map(|j| if j == 0 || j == checkpoints { 0.5 * w } else { w }).collect()
}

/// `int_0^T |∫∫ m^eps φ(x, x/eps) - ∫∫ m̄ μ φ|` for every test function, trapezoid in
/// time over the reference checkpoints.
///
/// Test functions without a cell factor use `∫ μ = 1` and need no cell solves.
pub fn two_scale_diagnostic(
    sol: &MFGSolution,
    reference: &Reference,
    bank: &CellBank,
    catalog: &[TestFunction],
) -> Result<Vec<f64>> {
    let c = reference.checkpoints;
    if sol.times.steps % c != 0 || (sol.times.t_final - reference.sol.times.t_final).abs() > 1e-12 {
        return Err(Error::ShapeMismatch("solution steps do not align with the reference checkpoints".into()));
    }
    let grid = sol.grid;
    if grid.dim() != 1 {
        return Err(Error::InvalidArgument("two-scale diagnostics are implemented in one dimension".into()));
    }
    let stride = sol.times.steps / c;
    let side = grid.side();
    let x: Vec<f64> = (0..grid.len()).map(|i| grid.coords(i)[0]).collect();
    let y: Vec<f64> = sol.cell_coords().iter().map(|y| y[0]).collect();
    let weights = trapezoid(sol.times.t_final, c);
    let need_cells = catalog.iter().any(|t| t.cell_cos);
    let mut out = vec![0.0; catalog.len()];
    for j in 0..=c {
        let s = reference.slice(j, &grid)?;
        let m = &sol.m[j * stride];
        let cells = if need_cells {
            let pts: Vec<_> = s.p.iter().zip(&s.m).map(|(&p, &mm)| ([p, 0.0], mm)).collect();
            Some(bank.get(&pts)?)
        } else {
            None
        };
        for (k, tf) in catalog.iter().enumerate() {
            let eps_term: Vec<f64> = (0..grid.len()).map(|i| m[i] * tf.macro_value(x[i], side) * tf.cell_value(y[i])).collect();
            let lim_term: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let cell = match (&cells, tf.cell_cos) {
                        (Some(cs), true) => {
                            let mu = cs[i].mu.values();
                            let cg = cs[i].mu.grid();
                            let vals: Vec<f64> =
                                (0..mu.len()).map(|l| mu[l] * tf.cell_value(cg.coords(l)[0])).collect();
                            integrate_values(cg, &vals)
                        }
                        _ => 1.0,
                    };
                    s.m[i] * tf.macro_value(x[i], side) * cell
                })
                .collect();
            let d = integrate_values(&grid, &eps_term) - integrate_values(&grid, &lim_term);
            out[k] += weights[j] * d.abs();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleReport {
    pub eps_list: Vec<f64>,
    pub tests: Vec<String>,
    /// `discrepancies[e][k]`: eps `e`, test function `k`.
    pub discrepancies: Vec<Vec<f64>>,
    /// Whether every test function's discrepancy decreases along `eps_list`.
    pub monotone: Vec<bool>,
}

/// Two-scale diagnostics on the well-prepared family.
pub fn run_two_scale(cfg: &WellPreparedConfig, rt: &Runtime) -> Result<TwoScaleReport> {
    let run = run_well_prepared(cfg, rt)?;
    let catalog = default_catalog();
    rt.install(|| {
        let mut discrepancies = Vec::new();
        let mut eps_list = Vec::new();
        for (eps, sol) in &run.solutions {
            discrepancies.push(two_scale_diagnostic(sol, &run.reference, &run.bank, &catalog)?);
            eps_list.push(*eps);
        }
        let monotone = (0..catalog.len())
            .map(|k| discrepancies.windows(2).all(|w| w[1][k] < w[0][k]))
            .collect();
        Ok(TwoScaleReport { eps_list, tests: catalog.iter().map(TestFunction::name).collect(), discrepancies, monotone })
    })
}
