//! Convergence and structure experiments built on the solvers.
//!
//! Errors against the limit are measured against a limit solve on a fine macro grid
//! (`reference`), except for constant data, where the limit is known exactly. Every
//! `eps = 1/q` grid is nested in the reference grid, so comparisons are pointwise.

pub mod ansatz;
pub mod nonlocal;
pub mod potential;
pub mod report;
pub mod two_scale;
pub mod well_prepared;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{solve_cell, solve_cell_coupled, CellOptions, CellSolution};
use crate::error::{Error, Result};
use crate::models::{CouplingKind, CouplingModel, HamiltonianModel, Vec2};
use crate::torus::ScalarField;

/// Worker pool and cache location shared by experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct Runtime {
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime { workers: 1, cache_dir: None }
    }
}

impl Runtime {
    pub fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(f)
    }
}

/// Errors at one `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsError {
    pub eps: f64,
    pub u_sup: f64,
    #[serde(rename = "m_L1")]
    pub m_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub eps_list: Vec<f64>,
    pub errors: Vec<EpsError>,
    pub fitted_rate_u: f64,
    pub fitted_rate_m: f64,
    pub metadata: serde_json::Value,
}

/// Errors below this are treated as solver floor.
pub const ERROR_FLOOR: f64 = 1e-9;

/// Least-squares slope of `ln err` against `ln eps`.
pub fn fit_rate(eps: &[f64], err: &[f64]) -> Result<f64> {
    let n = eps.len().min(err.len());
    if n < 3 {
        return Err(Error::RateUnreliable(n));
    }
    let xs: Vec<f64> = eps[..n].iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err[..n].iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Whether `v` never grows by more than `slack` (relative) from one entry to the next.
pub fn nonincreasing(v: &[f64], slack: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

pub(crate) fn check_eps_list(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::InvalidArgument("eps_list is empty".into()));
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("eps_list must be strictly decreasing".into()));
    }
    for &e in eps {
        let q = (1.0 / e).round();
        if !(e > 0.0) || (q * e - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("eps = {e} is not the reciprocal of an integer")));
        }
    }
    Ok(())
}

/// `steps` as a multiple of `checkpoints` with `dt <= dt_max`.
pub(crate) fn aligned_steps(t_final: f64, dt_max: f64, checkpoints: usize) -> usize {
    let per = (t_final / (checkpoints as f64 * dt_max)).ceil().max(1.0) as usize;
    per * checkpoints
}

/// Memoized cell solutions keyed by the exact bits of `(p, m)`.
///
/// Uncoupled models (no coupling, or a nonlocal one whose cell source is constant)
/// ignore `m`, since a constant source shifts `h_bar` but not `v` or `mu`.
pub struct CellBank {
    hamiltonian: HamiltonianModel,
    coupling: CouplingModel,
    opts: CellOptions,
    store: Mutex<HashMap<[u64; 3], Arc<CellSolution>>>,
}

impl CellBank {
    pub fn new(hamiltonian: &HamiltonianModel, coupling: &CouplingModel, opts: &CellOptions) -> Self {
        let coupling = match coupling.kind() {
            CouplingKind::Local => coupling.clone(),
            _ => CouplingModel::None,
        };
        CellBank { hamiltonian: hamiltonian.clone(), coupling, opts: opts.clone(), store: Mutex::new(HashMap::new()) }
    }

    pub fn coupled(&self) -> bool {
        self.coupling.kind() == CouplingKind::Local
    }

    pub fn options(&self) -> &CellOptions {
        &self.opts
    }

    pub fn hamiltonian(&self) -> &HamiltonianModel {
        &self.hamiltonian
    }

    fn key(&self, p: Vec2, m: f64) -> [u64; 3] {
        let m = if self.coupled() { m } else { 0.0 };
        [p[0].to_bits(), p[1].to_bits(), m.to_bits()]
    }

    fn solve(&self, key: [u64; 3]) -> Result<CellSolution> {
        let p = [f64::from_bits(key[0]), f64::from_bits(key[1])];
        let m = f64::from_bits(key[2]);
        let tag = |e: Error| Error::TableNode { node: format!("p={:?}, m={m}", &p[..self.opts.dim]), source: Box::new(e) };
        if self.coupled() {
            solve_cell_coupled(&self.hamiltonian, &self.coupling, p, m, [0.0, 0.0], &self.opts).map_err(tag)
        } else {
            let grid = self.opts.grid()?;
            solve_cell(&self.hamiltonian, p, &ScalarField::constant(grid, 0.0), &self.opts).map_err(tag)
        }
    }

    /// Cell solutions for every `(p, m)`, solving the missing ones in parallel.
    pub fn get(&self, points: &[(Vec2, f64)]) -> Result<Vec<Arc<CellSolution>>> {
        let keys: Vec<[u64; 3]> = points.iter().map(|&(p, m)| self.key(p, m)).collect();
        let missing: Vec<[u64; 3]> = {
            let store = self.store.lock().expect("cell bank lock");
            keys.iter().filter(|k| !store.contains_key(*k)).copied().collect::<BTreeSet<_>>().into_iter().collect()
        };
        let solved: Vec<Result<CellSolution>> = missing.par_iter().map(|&k| self.solve(k)).collect();
        let mut store = self.store.lock().expect("cell bank lock");
        for (k, r) in missing.into_iter().zip(solved) {
            store.insert(k, Arc::new(r?));
        }
        Ok(keys.iter().map(|k| Arc::clone(&store[k])).collect())
    }

    pub fn len(&self) -> usize {
        self.store.lock().expect("cell bank lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Limit fields and their macro derivatives at one checkpoint, sampled on a coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroSlice {
    pub t: f64,
    /// Periodic part of the limit value.
    pub u_tilde: Vec<f64>,
    /// `Du` including the affine part.
    pub p: Vec<f64>,
    /// `D^2 u`.
    pub q: Vec<f64>,
    pub m: Vec<f64>,
    pub dm: Vec<f64>,
}
