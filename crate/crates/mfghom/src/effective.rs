//! Tables of the effective Hamiltonian `h_bar(p, m)` and drift `b_bar(p, m)`,
//! their structure defects, interpolation and on-disk caching.
//!
//! Storage is row-major with the momentum axes first (axis 0 slowest) and the density
//! axis last. For nonlocal couplings the density axis carries the frozen value of the
//! smoothed density, so a node solves the decoupled cell problem with constant source
//! `strength * m`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::cell::{solve_cell, solve_cell_coupled, CellOps, CellOptions, CellSolution};
use crate::container::{self, Array};
use crate::error::{Error, Result};
use crate::models::{CouplingKind, CouplingModel, Hamiltonian, HamiltonianModel, Vec2};
use crate::torus::{integrate_values, ScalarField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTable {
    pub dim: usize,
    /// Sorted momentum nodes, one vector per axis.
    pub p_grid: Vec<Vec<f64>>,
    pub m_grid: Vec<f64>,
    pub h_bar: Vec<f64>,
    /// `dim` components per node.
    pub b_bar: Vec<f64>,
    pub model_hash: String,
    pub coupling_kind: CouplingKind,
}

/// Everything a table depends on; hashed for the cache key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub p_grid: Vec<Vec<f64>>,
    pub m_grid: Vec<f64>,
    pub cell: CellOptions,
}

impl TableSpec {
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("table spec serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `int D_pH(p + Dv, y) mu(y) dy`.
pub fn effective_drift(cs: &CellSolution) -> Vec2 {
    let grid = *cs.v.grid();
    let ops = CellOps::new(grid, cs.order);
    let b = ops.drift(&cs.model, cs.p, cs.v.values());
    let mut out = [0.0; 2];
    for (k, bk) in b.iter().enumerate() {
        let w: Vec<f64> = bk.iter().zip(cs.mu.values()).map(|(a, m)| a * m).collect();
        out[k] = integrate_values(&grid, &w);
    }
    out
}

impl EffectiveTable {
    pub fn n_p(&self) -> usize {
        self.p_grid.iter().map(Vec::len).product()
    }

    pub fn n_m(&self) -> usize {
        self.m_grid.len()
    }

    pub fn index(&self, p_flat: usize, im: usize) -> usize {
        p_flat * self.n_m() + im
    }

    /// Flat momentum index of per-axis indices.
    pub fn p_flat(&self, ip: [usize; 2]) -> usize {
        if self.dim == 1 {
            ip[0]
        } else {
            ip[0] * self.p_grid[1].len() + ip[1]
        }
    }

    pub fn p_multi(&self, flat: usize) -> [usize; 2] {
        if self.dim == 1 {
            [flat, 0]
        } else {
            let n1 = self.p_grid[1].len();
            [flat / n1, flat % n1]
        }
    }

    pub fn p_at(&self, flat: usize) -> Vec2 {
        let ip = self.p_multi(flat);
        let mut p = [self.p_grid[0][ip[0]], 0.0];
        if self.dim == 2 {
            p[1] = self.p_grid[1][ip[1]];
        }
        p
    }

    pub fn h_at(&self, p_flat: usize, im: usize) -> f64 {
        self.h_bar[self.index(p_flat, im)]
    }

    pub fn b_at(&self, p_flat: usize, im: usize) -> Vec2 {
        let base = self.index(p_flat, im) * self.dim;
        let mut b = [0.0; 2];
        b[..self.dim].copy_from_slice(&self.b_bar[base..base + self.dim]);
        b
    }

    /// Largest `|b_bar|` component over the table.
    pub fn max_drift(&self) -> f64 {
        self.b_bar.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest difference quotient of `h_bar` along any momentum axis.
    pub fn lipschitz_p(&self) -> f64 {
        let mut lip: f64 = 0.0;
        for flat in 0..self.n_p() {
            let ip = self.p_multi(flat);
            for axis in 0..self.dim {
                if ip[axis] + 1 >= self.p_grid[axis].len() {
                    continue;
                }
                let mut jp = ip;
                jp[axis] += 1;
                let nb = self.p_flat(jp);
                let dp = self.p_grid[axis][jp[axis]] - self.p_grid[axis][ip[axis]];
                for im in 0..self.n_m() {
                    lip = lip.max(((self.h_at(nb, im) - self.h_at(flat, im)) / dp).abs());
                }
            }
        }
        lip
    }
}

fn check_sorted(v: &[f64], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if v.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

/// Solve one table node.
pub fn solve_node(
    h: &HamiltonianModel,
    f: &CouplingModel,
    p: Vec2,
    m: f64,
    opts: &CellOptions,
) -> Result<CellSolution> {
    let grid = opts.grid()?;
    match f {
        CouplingModel::None => solve_cell(h, p, &ScalarField::constant(grid, 0.0), opts),
        CouplingModel::Nonlocal { strength, .. } => {
            let mut cs = solve_cell(h, p, &ScalarField::constant(grid, strength * m), opts)?;
            cs.m_param = Some(m);
            Ok(cs)
        }
        CouplingModel::Local(_) => solve_cell_coupled(h, f, p, m, [0.0, 0.0], opts),
    }
}

/// One cell solve per `(p, m)` node on a pool of `workers` threads.
pub fn build_table(
    h: &HamiltonianModel,
    f: &CouplingModel,
    p_grid: &[Vec<f64>],
    m_grid: &[f64],
    opts: &CellOptions,
    workers: usize,
) -> Result<EffectiveTable> {
    let dim = opts.dim;
    if p_grid.len() != dim {
        return Err(Error::InvalidArgument(format!("need {dim} momentum axes")));
    }
    for (k, axis) in p_grid.iter().enumerate() {
        check_sorted(axis, &format!("p_grid[{k}]"))?;
    }
    check_sorted(m_grid, "m_grid")?;
    let spec = TableSpec {
        hamiltonian: h.clone(),
        coupling: f.clone(),
        p_grid: p_grid.to_vec(),
        m_grid: m_grid.to_vec(),
        cell: opts.clone(),
    };
    let mut table = EffectiveTable {
        dim,
        p_grid: p_grid.to_vec(),
        m_grid: m_grid.to_vec(),
        h_bar: Vec::new(),
        b_bar: Vec::new(),
        model_hash: spec.hash(),
        coupling_kind: f.kind(),
    };
    let nodes: Vec<(usize, usize)> = (0..table.n_p())
        .flat_map(|ip| (0..m_grid.len()).map(move |im| (ip, im)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<(f64, Vec2)>> = pool.install(|| {
        nodes
            .par_iter()
            .map(|&(ip, im)| {
                let p = table.p_at(ip);
                let m = m_grid[im];
                let cs = solve_node(h, f, p, m, opts).map_err(|e| Error::TableNode {
                    node: format!("p={:?}, m={}", &p[..dim], m),
                    source: Box::new(e),
                })?;
                Ok((cs.h_bar, effective_drift(&cs)))
            })
            .collect()
    });
    for r in results {
        let (hb, b) = r?;
        table.h_bar.push(hb);
        table.b_bar.extend_from_slice(&b[..dim]);
    }
    Ok(table)
}

/// Defect `|b_bar - D_p h_bar|_inf` at interior momentum nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectMap {
    /// Flat momentum indices of the interior nodes.
    pub p_nodes: Vec<usize>,
    /// `[p_nodes.len() x n_m]`, m fastest.
    pub values: Vec<f64>,
    /// Largest momentum spacing of the table.
    pub delta_p: f64,
}

impl DefectMap {
    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(*v))
    }
}

pub fn mfg_type_defect(table: &EffectiveTable) -> Result<DefectMap> {
    if table.p_grid.iter().any(|a| a.len() < 3) {
        return Err(Error::GridTooCoarse("mfg-type defect needs >= 3 momentum nodes per axis".into()));
    }
    let mut p_nodes = Vec::new();
    let mut values = Vec::new();
    for flat in 0..table.n_p() {
        let ip = table.p_multi(flat);
        let interior = (0..table.dim).all(|k| ip[k] > 0 && ip[k] + 1 < table.p_grid[k].len());
        if !interior {
            continue;
        }
        p_nodes.push(flat);
        for im in 0..table.n_m() {
            let b = table.b_at(flat, im);
            let mut worst: f64 = 0.0;
            for k in 0..table.dim {
                let (mut lo, mut hi) = (ip, ip);
                lo[k] -= 1;
                hi[k] += 1;
                let dp = table.p_grid[k][hi[k]] - table.p_grid[k][lo[k]];
                let diff = (table.h_at(table.p_flat(hi), im) - table.h_at(table.p_flat(lo), im)) / dp;
                worst = worst.max((b[k] - diff).abs());
            }
            values.push(worst);
        }
    }
    let delta_p = table
        .p_grid
        .iter()
        .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
        .fold(0.0, f64::max);
    Ok(DefectMap { p_nodes, values, delta_p })
}

/// `max |h(p,m) - h(p,m0) - h(p0,m) + h(p0,m0)|` over all node quadruples.
pub fn separability_defect(table: &EffectiveTable) -> Result<f64> {
    if table.n_p() < 2 || table.n_m() < 2 {
        return Err(Error::GridTooCoarse("separability defect needs >= 2 nodes in p and m".into()));
    }
    let mut worst: f64 = 0.0;
    for p in 0..table.n_p() {
        for p0 in 0..table.n_p() {
            for m in 0..table.n_m() {
                for m0 in 0..table.n_m() {
                    let d = table.h_at(p, m) - table.h_at(p, m0) - table.h_at(p0, m) + table.h_at(p0, m0);
                    worst = worst.max(d.abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Largest violation of midpoint convexity along momentum grid lines (0 when convex).
pub fn convexity_violation(table: &EffectiveTable) -> f64 {
    let mut worst: f64 = 0.0;
    for flat in 0..table.n_p() {
        let ip = table.p_multi(flat);
        for k in 0..table.dim {
            if ip[k] == 0 || ip[k] + 1 >= table.p_grid[k].len() {
                continue;
            }
            let (mut lo, mut hi) = (ip, ip);
            lo[k] -= 1;
            hi[k] += 1;
            let a = table.p_grid[k][lo[k]];
            let c = table.p_grid[k][hi[k]];
            let t = (table.p_grid[k][ip[k]] - a) / (c - a);
            for im in 0..table.n_m() {
                let chord = (1.0 - t) * table.h_at(table.p_flat(lo), im) + t * table.h_at(table.p_flat(hi), im);
                worst = worst.max(table.h_at(flat, im) - chord);
            }
        }
    }
    worst
}

fn bracket(axis: &[f64], x: f64, name: &str) -> Result<(usize, f64)> {
    let (lo, hi) = (axis[0], axis[axis.len() - 1]);
    if !(x >= lo && x <= hi) {
        return Err(Error::OutOfRange { coordinate: name.to_string(), value: x, lo, hi });
    }
    if axis.len() == 1 {
        return Ok((0, 0.0));
    }
    let mut i = axis.partition_point(|&a| a <= x).saturating_sub(1);
    if i + 1 >= axis.len() {
        i = axis.len() - 2;
    }
    let t = (x - axis[i]) / (axis[i + 1] - axis[i]);
    Ok((i, t))
}

/// Multilinear interpolation of `(h_bar, b_bar)`. A single-node density axis means the
/// table does not depend on `m`.
pub fn interpolate(table: &EffectiveTable, p: Vec2, m: f64) -> Result<(f64, Vec2)> {
    let mut brackets = Vec::with_capacity(3);
    for k in 0..table.dim {
        brackets.push(bracket(&table.p_grid[k], p[k], &format!("p[{k}]"))?);
    }
    let (im, tm) = if table.n_m() == 1 { (0, 0.0) } else { bracket(&table.m_grid, m, "m")? };
    let mut hv = 0.0;
    let mut bv = [0.0; 2];
    let corners = 1usize << table.dim;
    let m_corners = if table.n_m() == 1 { 1 } else { 2 };
    for c in 0..corners {
        let mut ip = [0usize; 2];
        let mut wp = 1.0;
        for k in 0..table.dim {
            let (i, t) = brackets[k];
            if (c >> k) & 1 == 1 {
                if t == 0.0 {
                    wp = 0.0;
                }
                ip[k] = (i + 1).min(table.p_grid[k].len() - 1);
                wp *= t;
            } else {
                ip[k] = i;
                wp *= 1.0 - t;
            }
        }
        if wp == 0.0 {
            continue;
        }
        let flat = table.p_flat(ip);
        for mc in 0..m_corners {
            let (jm, w) = if mc == 0 { (im, 1.0 - tm) } else { (im + 1, tm) };
            let weight = wp * w;
            if weight == 0.0 {
                continue;
            }
            hv += weight * table.h_at(flat, jm);
            let b = table.b_at(flat, jm);
            bv[0] += weight * b[0];
            bv[1] += weight * b[1];
        }
    }
    Ok((hv, bv))
}

/// [`interpolate`] with `m` clamped to the table hull, rejecting overshoots beyond 5% of
/// the density range.
pub fn interpolate_clamped(table: &EffectiveTable, p: Vec2, m: f64) -> Result<(f64, Vec2)> {
    if table.n_m() == 1 {
        return interpolate(table, p, m);
    }
    let (lo, hi) = (table.m_grid[0], table.m_grid[table.n_m() - 1]);
    let slack = 0.05 * (hi - lo);
    if m < lo - slack || m > hi + slack {
        return Err(Error::OutOfRange { coordinate: "m".into(), value: m, lo, hi });
    }
    interpolate(table, p, m.clamp(lo, hi))
}

const TABLE_FORMAT: &str = "mfgtab";

pub fn write_table(table: &EffectiveTable, spec: Option<&TableSpec>, path: &Path) -> Result<()> {
    let mut shape: Vec<usize> = table.p_grid.iter().map(Vec::len).collect();
    shape.push(table.n_m());
    let mut bshape = shape.clone();
    bshape.push(table.dim);
    let mut arrays = Vec::new();
    for (k, axis) in table.p_grid.iter().enumerate() {
        arrays.push(Array::new(&format!("p_grid_{k}"), vec![axis.len()], axis.clone()));
    }
    arrays.push(Array::new("m_grid", vec![table.n_m()], table.m_grid.clone()));
    arrays.push(Array::new("h_bar", shape, table.h_bar.clone()));
    arrays.push(Array::new("b_bar", bshape, table.b_bar.clone()));
    let header = json!({
        "format": TABLE_FORMAT,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "model_hash": table.model_hash,
        "coupling_kind": table.coupling_kind,
        "dim": table.dim,
        "model": spec,
    });
    container::write(path, &header, &arrays)
}

pub fn read_table(path: &Path) -> Result<EffectiveTable> {
    let (header, arrays) = container::read(path)?;
    if header.get("format").and_then(|v| v.as_str()) != Some(TABLE_FORMAT) {
        return Err(Error::Format("not an effective table".into()));
    }
    let dim = header.get("dim").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("dim".into()))? as usize;
    let model_hash = header
        .get("model_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("model_hash".into()))?
        .to_string();
    let coupling_kind: CouplingKind = serde_json::from_value(header["coupling_kind"].clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let p_grid = (0..dim)
        .map(|k| container::take(&arrays, &format!("p_grid_{k}")).map(|a| a.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectiveTable {
        dim,
        p_grid,
        m_grid: container::take(&arrays, "m_grid")?.data.clone(),
        h_bar: container::take(&arrays, "h_bar")?.data.clone(),
        b_bar: container::take(&arrays, "b_bar")?.data.clone(),
        model_hash,
        coupling_kind,
    })
}

/// Path of the cache entry for a spec.
pub fn cache_path(dir: &Path, spec: &TableSpec) -> PathBuf {
    dir.join(format!("{}.mfgtab", spec.hash()))
}

/// Outcome of a cached build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
    Disabled,
}

/// Load the table for `spec` from `cache_dir` or build and store it.
pub fn build_table_cached(spec: &TableSpec, workers: usize, cache_dir: Option<&Path>) -> Result<(EffectiveTable, CacheStatus)> {
    let Some(dir) = cache_dir else {
        let t = build_table(&spec.hamiltonian, &spec.coupling, &spec.p_grid, &spec.m_grid, &spec.cell, workers)?;
        return Ok((t, CacheStatus::Disabled));
    };
    let path = cache_path(dir, spec);
    if path.exists() {
        if let Ok(t) = read_table(&path) {
            if t.model_hash == spec.hash() {
                return Ok((t, CacheStatus::Hit));
            }
        }
    }
    let t = build_table(&spec.hamiltonian, &spec.coupling, &spec.p_grid, &spec.m_grid, &spec.cell, workers)?;
    write_table(&t, Some(spec), &path)?;
    Ok((t, CacheStatus::Built))
}

/// Evaluate `H` along a momentum line for reports.
pub fn hamiltonian_mean(h: &HamiltonianModel, p: Vec2, opts: &CellOptions) -> Result<f64> {
    let grid = opts.grid()?;
    let vals: Vec<f64> = (0..grid.len()).map(|i| h.value(p, grid.coords(i))).collect();
    Ok(integrate_values(&grid, &vals))
}
