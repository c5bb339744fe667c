//! Configuration, dispatch and report output for the `mfghom` binary.
//!
//! A run is described by one TOML document. Values are resolved in this order, later
//! sources winning: built-in defaults, the config file, `MFGHOM_CACHE_DIR` (for
//! `io.cache_dir` only), `--set key=value` overrides, dedicated flags (`--workers`,
//! `--cache-dir`, `--report`, `--csv`, `--fields`), and finally the subcommand, which
//! always sets `command`.
//!
//! Exit codes: 0 success, 2 solver non-convergence, 1 configuration or runtime error.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::cell::CellOptions;
use crate::effective::{build_table_cached, effective_drift, solve_node, write_table, CacheStatus, TableSpec};
use crate::eps_solver::{
    aligned_grid, mass_defect, solve_mfg_eps, write_solution, EpsProblem, MFGSolution, PicardOptions, SchemeChoice,
    TimeGrid,
};
use crate::error::{Error, Result};
use crate::experiments::ansatz::{run_ansatz_family, AnsatzResiduals};
use crate::experiments::nonlocal::{run_constant_data, run_nonlocal_convergence, ConstantDataConfig, NonlocalConfig};
use crate::experiments::potential::{potential_check, PotentialConfig};
use crate::experiments::report::{ansatz_csv, convergence_csv, write_json, write_text};
use crate::experiments::two_scale::run_two_scale;
use crate::experiments::well_prepared::{
    cell_speed, linspace, run_well_prepared, table_axes, ModulatedData, ReferenceSpec, WellPreparedConfig,
};
use crate::experiments::{CellBank, ConvergenceReport, Runtime};
use crate::limit_solver::{residual_check, solve_limit, stable_step, LimitProblem, LimitResiduals};
use crate::models::{
    check_convexity, check_lip_condition, check_monotonicity, AssumptionReport, CouplingKind, CouplingModel,
    HamiltonianModel,
};
use crate::torus::{ScalarField, TorusGrid};

/// Environment variable overriding `io.cache_dir`.
pub const CACHE_ENV: &str = "MFGHOM_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Cell,
    Table,
    SolveEps,
    SolveLimit,
    Converge,
    Ansatz,
    TwoScale,
    Potential,
    CheckAssumptions,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Cell => "cell",
            Command::Table => "table",
            Command::SolveEps => "solve-eps",
            Command::SolveLimit => "solve-limit",
            Command::Converge => "converge",
            Command::Ansatz => "ansatz",
            Command::TwoScale => "two-scale",
            Command::Potential => "potential",
            Command::CheckAssumptions => "check-assumptions",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    #[default]
    WellPrepared,
    Nonlocal,
    ConstantData,
}

/// `[cell_problem]`: one cell solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellProblemSection {
    /// One entry per dimension.
    pub p: Vec<f64>,
    pub m: f64,
}

impl Default for CellProblemSection {
    fn default() -> Self {
        CellProblemSection { p: vec![1.0], m: 1.0 }
    }
}

/// `[table]`: a standalone effective table on a rectangular momentum lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSection {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Nodes per momentum axis.
    pub p_nodes: usize,
    /// Density axis for local couplings; other couplings use a single node.
    pub m_min: f64,
    pub m_max: f64,
    pub m_nodes: usize,
}

impl Default for TableSection {
    fn default() -> Self {
        TableSection { p_min: vec![0.5], p_max: vec![1.5], p_nodes: 21, m_min: 0.5, m_max: 2.0, m_nodes: 9 }
    }
}

/// `[solve]`: one eps solve or one limit solve in 1-D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveSection {
    pub eps: f64,
    pub p: f64,
    pub side: usize,
    /// Points per period for `solve-eps`.
    pub n_cell: usize,
    /// Points per unit length for `solve-limit`.
    pub points: usize,
    pub t_final: f64,
    /// Time steps; derived from `cfl` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub cfl: f64,
    pub data: ModulatedData,
    pub scheme: SchemeChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dissipation: Option<f64>,
    /// Limit table around `p`.
    pub table_half_width: f64,
    pub table_step: f64,
    pub m_nodes: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection {
            eps: 0.125,
            p: 1.0,
            side: 1,
            n_cell: 16,
            points: 256,
            t_final: 0.5,
            steps: None,
            cfl: 0.4,
            data: ModulatedData::default(),
            scheme: SchemeChoice::Auto,
            dissipation: None,
            table_half_width: 0.2,
            table_step: 0.01,
            m_nodes: 9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergeSection {
    pub experiment: Experiment,
}

/// `[assumptions]`: sampling of the assumption checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssumptionsSection {
    pub dim: usize,
    /// Momentum box half width of the convexity check.
    pub radius: f64,
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
    pub theta: f64,
    pub p_radius: f64,
    pub eps: f64,
}

impl Default for AssumptionsSection {
    fn default() -> Self {
        AssumptionsSection { dim: 1, radius: 2.0, samples: 16, trials: 20, seed: 1, theta: 0.5, p_radius: 2.0, eps: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// JSON report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// CSV table (`converge`, `ansatz`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// `.mfgtab` (`table`) or `.mfgsol` (`solve-eps`, `solve-limit`) container.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fields: Option<PathBuf>,
    /// Defaults to the available parallelism.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Replaces the experiment's Hamiltonian; `quadratic` for the single-solve commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<HamiltonianModel>,
    /// Replaces the experiment's coupling; `none` for the single-solve commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingModel>,
    #[serde(default)]
    pub cell: CellOptions,
    #[serde(default)]
    pub picard: PicardOptions,
    #[serde(default)]
    pub cell_problem: CellProblemSection,
    #[serde(default)]
    pub table: TableSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub converge: ConvergeSection,
    #[serde(default)]
    pub well_prepared: WellPreparedConfig,
    #[serde(default)]
    pub nonlocal: NonlocalConfig,
    #[serde(default)]
    pub constant_data: ConstantDataConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub assumptions: AssumptionsSection,
    #[serde(default)]
    pub io: IoSection,
}

/// One offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationError {
    /// Dotted path, e.g. `cell.n`.
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConfigError {
    Parse { line: usize, column: usize, message: String },
    Invalid(Vec<ValidationError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, column, message } => write!(f, "parse error at line {line}, column {column}: {message}"),
            ConfigError::Invalid(errs) => {
                write!(f, "{} invalid field(s)", errs.len())?;
                for e in errs {
                    write!(f, "\n  {}: {}", e.field, e.message)?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug)]
enum Rule {
    Int(i64, i64),
    /// `(lo, hi, lo_open, hi_open)`
    Float(f64, f64, bool, bool),
    FloatList(f64, f64, bool, bool),
    IntList(i64, i64),
}

impl Rule {
    fn range(&self) -> String {
        match *self {
            Rule::Int(lo, hi) | Rule::IntList(lo, hi) => format!("integer in [{lo}, {hi}]"),
            Rule::Float(lo, hi, lo_open, hi_open) | Rule::FloatList(lo, hi, lo_open, hi_open) => format!(
                "number in {}{lo}, {hi}{}",
                if lo_open { "(" } else { "[" },
                if hi_open { ")" } else { "]" }
            ),
        }
    }

    fn accepts(&self, v: &Value) -> bool {
        let float_ok = |x: f64, lo: f64, hi: f64, lo_open: bool, hi_open: bool| {
            x.is_finite() && (if lo_open { x > lo } else { x >= lo }) && (if hi_open { x < hi } else { x <= hi })
        };
        let as_f64 = |v: &Value| match v {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        };
        match *self {
            Rule::Int(lo, hi) => matches!(v, Value::Integer(i) if (lo..=hi).contains(i)),
            Rule::Float(lo, hi, a, b) => as_f64(v).is_some_and(|x| float_ok(x, lo, hi, a, b)),
            Rule::IntList(lo, hi) => match v {
                Value::Array(a) => a.iter().all(|x| Rule::Int(lo, hi).accepts(x)),
                _ => false,
            },
            Rule::FloatList(lo, hi, a, b) => match v {
                Value::Array(xs) => xs.iter().all(|x| as_f64(x).is_some_and(|x| float_ok(x, lo, hi, a, b))),
                _ => false,
            },
        }
    }

    fn describe(&self) -> String {
        match self {
            Rule::IntList(..) | Rule::FloatList(..) => format!("expected a list with every entry an {}", self.range()),
            _ => format!("expected {}", self.range()),
        }
    }
}

const MAX_SEED: i64 = i64::MAX;

/// Ranges of every numeric key, as documented in `docs/config.md`.
fn schema() -> Vec<(String, Rule)> {
    use Rule::*;
    let unit_open = Float(0.0, 1.0, true, false);
    let cfl = Float(0.0, 0.5, true, false);
    let t_final = Float(0.0, 100.0, true, false);
    let p = Float(-100.0, 100.0, false, false);
    let mut out: Vec<(String, Rule)> = Vec::new();
    let mut add = |prefix: &str, key: &str, r: Rule| {
        let path = if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
        out.push((path, r));
    };
    for prefix in ["cell", "well_prepared.cell", "nonlocal.cell", "constant_data.cell", "potential.cell"] {
        add(prefix, "n", Int(4, 4096));
        add(prefix, "dim", Int(1, 2));
        add(prefix, "tol", Float(0.0, 1e-2, true, false));
        add(prefix, "max_newton", Int(1, 1000));
        add(prefix, "relaxation", unit_open);
        add(prefix, "fixed_point_tol", Float(0.0, 1e-2, true, false));
        add(prefix, "fixed_point_max", Int(1, 100_000));
    }
    for prefix in ["picard", "well_prepared.picard", "nonlocal.picard", "constant_data.picard", "potential.picard"] {
        add(prefix, "damping", unit_open);
        add(prefix, "tol", unit_open);
        add(prefix, "max_iters", Int(1, 100_000));
    }
    for prefix in ["well_prepared", "nonlocal", "constant_data"] {
        add(prefix, "p", p);
        add(prefix, "eps_list", FloatList(0.0, 1.0, true, false));
        add(prefix, "n_cell", Int(4, 1024));
        add(prefix, "t_final", t_final);
        add(prefix, "checkpoints", Int(1, 10_000));
        add(prefix, "cfl", cfl);
    }
    for prefix in ["well_prepared", "nonlocal", "potential", "solve"] {
        add(prefix, "side", Int(1, 64));
        add(prefix, "data.u_amplitude", Float(-10.0, 10.0, false, false));
        add(prefix, "data.m_amplitude", Float(-1.0, 1.0, true, true));
    }
    for prefix in ["well_prepared.reference", "nonlocal.reference"] {
        add(prefix, "points", Int(8, 1 << 20));
        add(prefix, "table_half_width", Float(0.0, 10.0, true, false));
        add(prefix, "table_step", unit_open);
        add(prefix, "m_nodes", Int(2, 1000));
        add(prefix, "cfl", cfl);
    }
    add("potential", "eps", unit_open);
    add("potential", "n_cell", Int(4, 1024));
    add("potential", "t_final", t_final);
    add("potential", "cfl", cfl);
    add("potential", "perturbations", Int(1, 10_000));
    add("potential", "amplitude", unit_open);
    add("potential", "seed", Int(0, MAX_SEED));
    add("potential", "refinement", IntList(4, 1024));
    add("cell_problem", "p", FloatList(-100.0, 100.0, false, false));
    add("cell_problem", "m", Float(0.0, 1e6, false, false));
    add("table", "p_min", FloatList(-100.0, 100.0, false, false));
    add("table", "p_max", FloatList(-100.0, 100.0, false, false));
    add("table", "p_nodes", Int(2, 10_000));
    add("table", "m_min", Float(0.0, 1e6, false, false));
    add("table", "m_max", Float(0.0, 1e6, false, false));
    add("table", "m_nodes", Int(1, 10_000));
    add("solve", "eps", unit_open);
    add("solve", "p", p);
    add("solve", "n_cell", Int(4, 1024));
    add("solve", "points", Int(8, 1 << 20));
    add("solve", "t_final", t_final);
    add("solve", "steps", Int(1, 10_000_000));
    add("solve", "cfl", cfl);
    add("solve", "dissipation", Float(0.0, 1e6, false, false));
    add("solve", "table_half_width", Float(0.0, 10.0, true, false));
    add("solve", "table_step", unit_open);
    add("solve", "m_nodes", Int(2, 1000));
    add("assumptions", "dim", Int(1, 2));
    add("assumptions", "radius", Float(0.0, 100.0, true, false));
    add("assumptions", "samples", Int(1, 1000));
    add("assumptions", "trials", Int(1, 100_000));
    add("assumptions", "seed", Int(0, MAX_SEED));
    add("assumptions", "theta", Float(0.0, 1.0, true, true));
    add("assumptions", "p_radius", Float(0.0, 100.0, true, false));
    add("assumptions", "eps", unit_open);
    add("io", "workers", Int(1, 1024));
    out
}

fn lookup<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut v = table.get(parts.next()?)?;
    for k in parts {
        v = v.as_table()?.get(k)?;
    }
    Some(v)
}

fn remove(table: &mut Table, path: &str) {
    match path.split_once('.') {
        None => {
            table.remove(path);
        }
        Some((head, rest)) => {
            if let Some(Value::Table(t)) = table.get_mut(head) {
                remove(t, rest);
            }
        }
    }
}

/// Set a dotted key, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> std::result::Result<(), ConfigError> {
    let invalid = |m: String| ConfigError::Invalid(vec![ValidationError { field: path.to_string(), message: m }]);
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| invalid("empty key".into()))?;
    let mut t = table;
    for k in parts {
        let entry = t.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| invalid(format!("`{k}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Apply `key=value`; the value is read as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> std::result::Result<(), ConfigError> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(ConfigError::Invalid(vec![ValidationError {
            field: assignment.to_string(),
            message: "expected key=value".into(),
        }]));
    };
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    set_path(table, key.trim(), value)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parse TOML text into a raw table.
pub fn parse_toml(text: &str) -> std::result::Result<Table, ConfigError> {
    toml::from_str::<Table>(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, ConfigError> {
    parse_table(parse_toml(text)?)
}

fn section_error(key: &str, v: &Value) -> Option<String> {
    fn check<T: DeserializeOwned>(v: &Value) -> Option<String> {
        v.clone().try_into::<T>().err().map(|e| e.message().to_string())
    }
    match key {
        "command" => check::<Command>(v),
        "hamiltonian" => check::<HamiltonianModel>(v),
        "coupling" => check::<CouplingModel>(v),
        "cell" => check::<CellOptions>(v),
        "picard" => check::<PicardOptions>(v),
        "cell_problem" => check::<CellProblemSection>(v),
        "table" => check::<TableSection>(v),
        "solve" => check::<SolveSection>(v),
        "converge" => check::<ConvergeSection>(v),
        "well_prepared" => check::<WellPreparedConfig>(v),
        "nonlocal" => check::<NonlocalConfig>(v),
        "constant_data" => check::<ConstantDataConfig>(v),
        "potential" => check::<PotentialConfig>(v),
        "assumptions" => check::<AssumptionsSection>(v),
        "io" => check::<IoSection>(v),
        _ => Some("unknown key".into()),
    }
}

/// Keys of `raw` that do not survive a typed round trip are unknown.
fn unknown_keys(raw: &Table, typed: &Table, prefix: &str, out: &mut Vec<ValidationError>) {
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, typed.get(k)) {
            (_, None) => out.push(ValidationError { field: path, message: "unknown key".into() }),
            (Value::Table(r), Some(Value::Table(t))) => unknown_keys(r, t, &path, out),
            _ => {}
        }
    }
}

/// Validate a raw table: ranges and types of every numeric key, section types, unknown
/// keys, then the semantic checks of each section.
pub fn parse_table(mut raw: Table) -> std::result::Result<RunConfig, ConfigError> {
    let mut errors = Vec::new();
    if !raw.contains_key("command") {
        errors.push(ValidationError { field: "command".into(), message: "missing; one of cell, table, solve-eps, solve-limit, converge, ansatz, two-scale, potential, check-assumptions".into() });
    }
    for (path, rule) in schema() {
        if let Some(v) = lookup(&raw, &path) {
            if !rule.accepts(v) {
                errors.push(ValidationError { field: path.clone(), message: format!("{}, got {v}", rule.describe()) });
                remove(&mut raw, &path);
            }
        }
    }
    let mut typed_ok = true;
    for (k, v) in &raw {
        if let Some(m) = section_error(k, v) {
            errors.push(ValidationError { field: k.clone(), message: m });
            typed_ok = false;
        }
    }
    if !typed_ok || !raw.contains_key("command") {
        return Err(ConfigError::Invalid(errors));
    }
    let cfg: RunConfig = Value::Table(raw.clone())
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(vec![ValidationError { field: "(document)".into(), message: e.message().to_string() }]))?;
    let typed = Table::try_from(&cfg).expect("config serializes");
    unknown_keys(&raw, &typed, "", &mut errors);
    errors.extend(cfg.semantic_errors());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

/// Canonical TOML: every key with its resolved value.
pub fn emit_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

fn inverse_integer(eps: f64) -> bool {
    let q = (1.0 / eps).round();
    eps > 0.0 && (q * eps - 1.0).abs() <= 1e-12
}

fn path_creatable(p: &Path) -> bool {
    for a in p.ancestors().skip(1) {
        if a.as_os_str().is_empty() {
            return true;
        }
        if a.exists() {
            return a.is_dir();
        }
    }
    true
}

impl RunConfig {
    pub fn hamiltonian_or_default(&self) -> HamiltonianModel {
        self.hamiltonian.clone().unwrap_or(HamiltonianModel::Quadratic)
    }

    pub fn coupling_or_default(&self) -> CouplingModel {
        self.coupling.clone().unwrap_or(CouplingModel::None)
    }

    /// The well-prepared section with the top-level model overrides applied.
    pub fn well_prepared_resolved(&self) -> WellPreparedConfig {
        let mut c = self.well_prepared.clone();
        if let Some(h) = &self.hamiltonian {
            c.hamiltonian = h.clone();
        }
        if let Some(f) = &self.coupling {
            c.coupling = f.clone();
        }
        c
    }

    pub fn nonlocal_resolved(&self) -> NonlocalConfig {
        let mut c = self.nonlocal.clone();
        if let Some(h) = &self.hamiltonian {
            c.hamiltonian = h.clone();
        }
        if let Some(f) = &self.coupling {
            c.coupling = f.clone();
        }
        c
    }

    pub fn constant_data_resolved(&self) -> ConstantDataConfig {
        let mut c = self.constant_data.clone();
        if let Some(h) = &self.hamiltonian {
            c.hamiltonian = h.clone();
        }
        if let Some(f) = &self.coupling {
            c.coupling = f.clone();
        }
        c
    }

    pub fn potential_resolved(&self) -> PotentialConfig {
        let mut c = self.potential.clone();
        if let Some(h) = &self.hamiltonian {
            c.hamiltonian = h.clone();
        }
        if let Some(f) = &self.coupling {
            c.coupling = f.clone();
        }
        c
    }

    fn semantic_errors(&self) -> Vec<ValidationError> {
        let mut out = Vec::new();
        let mut push = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                out.push(ValidationError { field: field.into(), message: e.to_string() });
            }
        };
        let single = matches!(
            self.command,
            Command::Cell | Command::Table | Command::SolveEps | Command::SolveLimit | Command::CheckAssumptions
        );
        if single {
            push("hamiltonian", self.hamiltonian_or_default().validate());
            push("coupling", self.coupling_or_default().validate());
        }
        push("picard", self.picard.validate());
        let dim = self.cell.dim;
        if self.cell_problem.p.len() != dim {
            push("cell_problem.p", Err(Error::InvalidArgument(format!("needs {dim} entries for cell.dim = {dim}"))));
        }
        let t = &self.table;
        if t.p_min.len() != dim || t.p_max.len() != dim {
            push("table.p_min", Err(Error::InvalidArgument(format!("p_min and p_max need {dim} entries"))));
        } else if t.p_min.iter().zip(&t.p_max).any(|(a, b)| a >= b) {
            push("table.p_max", Err(Error::InvalidArgument("each p_max entry must exceed p_min".into())));
        }
        if t.m_max < t.m_min {
            push("table.m_max", Err(Error::InvalidArgument("m_max must be at least m_min".into())));
        }
        let s = &self.solve;
        if !inverse_integer(s.eps) {
            push("solve.eps", Err(Error::InvalidArgument(format!("must be 1/q for an integer q, got {}", s.eps))));
        }
        if matches!(self.command, Command::SolveEps | Command::SolveLimit) && dim != 1 {
            push("cell.dim", Err(Error::InvalidArgument("solve-eps and solve-limit are one-dimensional".into())));
        }
        let conv = |e: Experiment| self.command == Command::Converge && self.converge.experiment == e;
        let wp_used = conv(Experiment::WellPrepared) || matches!(self.command, Command::Ansatz | Command::TwoScale);
        push("well_prepared", if wp_used { self.well_prepared_resolved() } else { self.well_prepared.clone() }.validate());
        push("nonlocal", if conv(Experiment::Nonlocal) { self.nonlocal_resolved() } else { self.nonlocal.clone() }.validate());
        push(
            "constant_data",
            if conv(Experiment::ConstantData) { self.constant_data_resolved() } else { self.constant_data.clone() }.validate(),
        );
        let pot_used = self.command == Command::Potential;
        push("potential", if pot_used { self.potential_resolved() } else { self.potential.clone() }.validate());
        for (name, p) in [("io.cache_dir", &self.io.cache_dir), ("io.report", &self.io.report), ("io.csv", &self.io.csv), ("io.fields", &self.io.fields)] {
            if let Some(p) = p {
                if !path_creatable(p) {
                    push(name, Err(Error::InvalidArgument(format!("{} cannot be created", p.display()))));
                }
            }
        }
        out
    }

    pub fn runtime(&self) -> Runtime {
        let workers = self
            .io
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Runtime { workers, cache_dir: self.io.cache_dir.clone() }
    }
}

/// What a successful command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    /// False when a solver stopped at its iteration budget; maps to exit code 2.
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub p: Vec<f64>,
    pub m: f64,
    pub h_bar: f64,
    pub b_bar: Vec<f64>,
    pub hj_residual: f64,
    pub fp_residual: f64,
    pub fixed_point_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub spec: TableSpec,
    pub model_hash: String,
    pub nodes: usize,
    pub lipschitz_p: f64,
    pub max_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub epsilon: f64,
    pub n_cell: usize,
    pub points: usize,
    pub scheme: crate::eps_solver::Scheme,
    pub steps: usize,
    pub dt: f64,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
    pub mass_defect: f64,
    pub history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_residuals: Option<LimitResiduals>,
}

impl SolveReport {
    fn new(sol: &MFGSolution, limit_residuals: Option<LimitResiduals>) -> Self {
        SolveReport {
            epsilon: sol.epsilon,
            n_cell: sol.n_cell,
            points: sol.grid.len(),
            scheme: sol.scheme,
            steps: sol.times.steps,
            dt: sol.times.dt(),
            iterations: sol.iterations,
            converged: sol.converged,
            last_change: sol.last_change(),
            mass_defect: mass_defect(sol),
            history: sol.history.clone(),
            limit_residuals,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionsReport {
    pub hamiltonian: HamiltonianModel,
    pub coupling: CouplingModel,
    pub checks: Vec<AssumptionReport>,
}

fn write_report<T: Serialize>(cfg: &RunConfig, report: &T) -> Result<()> {
    match &cfg.io.report {
        Some(p) => write_json(report, p),
        None => Ok(()),
    }
}

fn write_csv(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.io.csv {
        Some(p) => write_text(text, p),
        None => Ok(()),
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn cell_command(cfg: &RunConfig) -> Result<Outcome> {
    let (h, f) = (cfg.hamiltonian_or_default(), cfg.coupling_or_default());
    let cp = &cfg.cell_problem;
    let p = [cp.p[0], cp.p.get(1).copied().unwrap_or(0.0)];
    let cs = solve_node(&h, &f, p, cp.m, &cfg.cell)?;
    let b = effective_drift(&cs);
    let report = CellReport {
        p: cp.p.clone(),
        m: cp.m,
        h_bar: cs.h_bar,
        b_bar: b[..cfg.cell.dim].to_vec(),
        hj_residual: cs.residuals.hj,
        fp_residual: cs.residuals.fp,
        fixed_point_iters: cs.residuals.fixed_point_iters,
    };
    write_report(cfg, &report)?;
    Ok(Outcome {
        summary: format!(
            "cell p={} m={} h_bar={} hj_residual={:e} fp_residual={:e}",
            fmt_list(&report.p),
            report.m,
            report.h_bar,
            report.hj_residual,
            report.fp_residual
        ),
        converged: true,
    })
}

fn table_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    let (h, f) = (cfg.hamiltonian_or_default(), cfg.coupling_or_default());
    let t = &cfg.table;
    let p_grid: Vec<Vec<f64>> = t.p_min.iter().zip(&t.p_max).map(|(&a, &b)| linspace(a, b, t.p_nodes)).collect();
    let m_grid = match f.kind() {
        CouplingKind::None => vec![1.0],
        CouplingKind::Nonlocal => vec![0.0],
        CouplingKind::Local => linspace(t.m_min, t.m_max, t.m_nodes),
    };
    let spec = TableSpec { hamiltonian: h, coupling: f, p_grid, m_grid, cell: cfg.cell.clone() };
    let (table, status) = build_table_cached(&spec, rt.workers, rt.cache_dir.as_deref())?;
    if let Some(p) = &cfg.io.fields {
        write_table(&table, Some(&spec), p)?;
    }
    let report = TableReport {
        model_hash: table.model_hash.clone(),
        nodes: table.h_bar.len(),
        lipschitz_p: table.lipschitz_p(),
        max_drift: table.max_drift(),
        spec,
    };
    write_report(cfg, &report)?;
    let cache = match status {
        CacheStatus::Hit => "hit",
        CacheStatus::Built => "built",
        CacheStatus::Disabled => "disabled",
    };
    Ok(Outcome {
        summary: format!("table nodes={} hash={} cache={cache} lipschitz_p={}", report.nodes, &report.model_hash[..12], report.lipschitz_p),
        converged: true,
    })
}

fn modulated(grid: TorusGrid, data: &ModulatedData, side: f64) -> Result<(ScalarField, ScalarField)> {
    Ok((ScalarField::from_fn(grid, |x| data.u0(x[0], side))?, ScalarField::from_fn(grid, |x| data.m_t(x[0], side))?))
}

fn finish_solve(cfg: &RunConfig, sol: &MFGSolution, residuals: Option<LimitResiduals>) -> Result<Outcome> {
    if let Some(p) = &cfg.io.fields {
        write_solution(sol, p)?;
    }
    let report = SolveReport::new(sol, residuals);
    write_report(cfg, &report)?;
    Ok(Outcome {
        summary: format!(
            "{} eps={} steps={} iterations={} converged={} last_change={:e} mass_defect={:e}",
            cfg.command.name(),
            report.epsilon,
            report.steps,
            report.iterations,
            report.converged,
            report.last_change,
            report.mass_defect
        ),
        converged: report.converged,
    })
}

fn solve_eps_command(cfg: &RunConfig) -> Result<Outcome> {
    let (h, f) = (cfg.hamiltonian_or_default(), cfg.coupling_or_default());
    let s = &cfg.solve;
    let grid = aligned_grid(1, s.side, s.n_cell, s.eps)?;
    let (u0, m_t) = modulated(grid, &s.data, s.side as f64)?;
    let times = match s.steps {
        Some(k) => TimeGrid::new(s.t_final, k)?,
        None => {
            let bank = CellBank::new(&h, &f, &CellOptions { n: s.n_cell, dim: 1, ..cfg.cell.clone() });
            let pts = [([s.p, 0.0], m_t.min()), ([s.p, 0.0], m_t.max_abs())];
            let speed = (1.5 * cell_speed(&bank, &pts)?).max(s.p.abs()).max(1e-12);
            TimeGrid::with_max_step(s.t_final, s.cfl * grid.h() / speed)?
        }
    };
    let prob = EpsProblem {
        hamiltonian: h,
        coupling: f,
        p_lin: [s.p, 0.0],
        u0,
        m_t,
        epsilon: s.eps,
        times,
        scheme: s.scheme,
        dissipation: s.dissipation,
    };
    let sol = solve_mfg_eps(&prob, &cfg.picard)?;
    finish_solve(cfg, &sol, None)
}

fn solve_limit_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    let (h, f) = (cfg.hamiltonian_or_default(), cfg.coupling_or_default());
    let s = &cfg.solve;
    let grid = TorusGrid::new(1, s.side, s.points)?;
    let (u0, m_t) = modulated(grid, &s.data, s.side as f64)?;
    let spec = ReferenceSpec {
        points: s.points,
        table_half_width: s.table_half_width,
        table_step: s.table_step,
        m_nodes: s.m_nodes,
        cfl: s.cfl,
    };
    let (p_grid, m_grid) = table_axes(&f, s.p, &spec, (m_t.min(), m_t.max_abs()))?;
    let tspec = TableSpec { hamiltonian: h, coupling: f.clone(), p_grid, m_grid, cell: CellOptions { dim: 1, ..cfg.cell.clone() } };
    let (table, _) = build_table_cached(&tspec, rt.workers, rt.cache_dir.as_deref())?;
    let times = match s.steps {
        Some(k) => TimeGrid::new(s.t_final, k)?,
        None => TimeGrid::with_max_step(s.t_final, 2.0 * s.cfl * stable_step(&table, &grid))?,
    };
    let prob = LimitProblem { table, coupling: f, p_lin: [s.p, 0.0], u0, m_t, times };
    let sol = solve_limit(&prob, &cfg.picard)?;
    let residuals = residual_check(&sol, &prob)?;
    finish_solve(cfg, &sol, Some(residuals))
}

fn convergence_outcome(cfg: &RunConfig, name: &str, report: &ConvergenceReport) -> Result<Outcome> {
    write_report(cfg, report)?;
    write_csv(cfg, &convergence_csv(report))?;
    Ok(Outcome {
        summary: format!(
            "converge experiment={name} eps={} fitted_rate_u={} fitted_rate_m={}",
            fmt_list(&report.eps_list),
            report.fitted_rate_u,
            report.fitted_rate_m
        ),
        converged: true,
    })
}

fn converge_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    match cfg.converge.experiment {
        Experiment::WellPrepared => {
            let run = run_well_prepared(&cfg.well_prepared_resolved(), rt)?;
            convergence_outcome(cfg, "well-prepared", &run.report)
        }
        Experiment::Nonlocal => {
            let run = run_nonlocal_convergence(&cfg.nonlocal_resolved(), rt)?;
            convergence_outcome(cfg, "nonlocal", &run.report)
        }
        Experiment::ConstantData => {
            let report = run_constant_data(&cfg.constant_data_resolved(), rt)?;
            convergence_outcome(cfg, "constant-data", &report)
        }
    }
}

/// Halving ratios `r(eps) / r(eps / 2)` of consecutive rows.
fn ratios(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[0] / w[1]).collect()
}

fn ansatz_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    let wp = cfg.well_prepared_resolved();
    wp.validate()?;
    let rows: Vec<AnsatzResiduals> = rt.install(|| {
        let reference = wp.reference(rt)?;
        let bank = CellBank::new(&wp.hamiltonian, &wp.coupling, &wp.cell_options());
        run_ansatz_family(&wp, &reference, &bank)
    })?;
    write_report(cfg, &rows)?;
    write_csv(cfg, &ansatz_csv(&rows))?;
    let hjb: Vec<f64> = rows.iter().map(|r| r.hjb_residual_sup).collect();
    let fp: Vec<f64> = rows.iter().map(|r| r.fp_residual_l1).collect();
    Ok(Outcome {
        summary: format!("ansatz hjb_halving_ratios={} fp_halving_ratios={}", fmt_list(&ratios(&hjb)), fmt_list(&ratios(&fp))),
        converged: true,
    })
}

fn two_scale_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    let report = run_two_scale(&cfg.well_prepared_resolved(), rt)?;
    write_report(cfg, &report)?;
    let monotone = report.monotone.iter().filter(|&&m| m).count();
    Ok(Outcome {
        summary: format!("two-scale tests={} monotone={monotone}/{}", report.tests.len(), report.monotone.len()),
        converged: true,
    })
}

fn potential_command(cfg: &RunConfig, rt: &Runtime) -> Result<Outcome> {
    let report = potential_check(&cfg.potential_resolved(), rt)?;
    write_report(cfg, &report)?;
    Ok(Outcome {
        summary: format!(
            "potential J_opt={} min_gap={:e} duality_defect={:e} duality_rate={}",
            report.j_opt, report.min_gap, report.duality_defect, report.duality_rate
        ),
        converged: true,
    })
}

fn check_assumptions_command(cfg: &RunConfig) -> Result<Outcome> {
    let (h, f) = (cfg.hamiltonian_or_default(), cfg.coupling_or_default());
    let a = &cfg.assumptions;
    let checks = vec![
        check_convexity(&h, a.dim, a.radius, a.samples)?,
        check_monotonicity(&f, a.dim, a.trials, a.seed)?,
        check_lip_condition(&h, &f, a.dim, a.theta, a.p_radius, a.eps, a.samples)?,
    ];
    let summary = checks
        .iter()
        .map(|c| format!("{}={}", c.name, if c.passed { "pass" } else { "fail" }))
        .collect::<Vec<_>>()
        .join(" ");
    write_report(cfg, &AssumptionsReport { hamiltonian: h, coupling: f, checks })?;
    Ok(Outcome { summary: format!("check-assumptions {summary}"), converged: true })
}

/// Execute a validated config.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let rt = cfg.runtime();
    match cfg.command {
        Command::Cell => cell_command(cfg),
        Command::Table => table_command(cfg, &rt),
        Command::SolveEps => rt.install(|| solve_eps_command(cfg)),
        Command::SolveLimit => solve_limit_command(cfg, &rt),
        Command::Converge => converge_command(cfg, &rt),
        Command::Ansatz => ansatz_command(cfg, &rt),
        Command::TwoScale => two_scale_command(cfg, &rt),
        Command::Potential => potential_command(cfg, &rt),
        Command::CheckAssumptions => check_assumptions_command(cfg),
    }
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.converged => 0,
        Ok(_) => 2,
        Err(e) if e.is_nonconvergence() => 2,
        Err(_) => 1,
    }
}

/// Run a config, print the summary line to stdout and diagnostics to stderr.
pub fn run(cfg: &RunConfig) -> i32 {
    let result = execute(cfg);
    match &result {
        Ok(o) => {
            println!("{}", o.summary);
            if !o.converged {
                eprintln!("error: solver stopped at its iteration budget without converging");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    exit_code(&result)
}

#[derive(Debug, Parser)]
#[command(name = "mfghom", version, about = "Homogenization of periodic mean-field-games systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Solve one cell problem.
    Cell(RunArgs),
    /// Build an effective table.
    Table(RunArgs),
    /// Solve the oscillatory system at one eps.
    SolveEps(RunArgs),
    /// Solve the homogenized system.
    SolveLimit(RunArgs),
    /// Run a convergence experiment.
    Converge(RunArgs),
    /// Residuals of the two-scale ansatz.
    Ansatz(RunArgs),
    /// Two-scale weak-limit diagnostics.
    TwoScale(RunArgs),
    /// Potential-game duality check.
    Potential(RunArgs),
    /// Sample the structural assumptions on the models.
    CheckAssumptions(RunArgs),
    /// Validate a config and print it in canonical form.
    Config(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config file; defaults apply when absent.
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set picard.max_iters=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (overrides `io.workers`).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Table cache directory (overrides `io.cache_dir` and the environment).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// JSON report path (overrides `io.report`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV path (overrides `io.csv`).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Container path (overrides `io.fields`).
    #[arg(long)]
    pub fields: Option<PathBuf>,
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Build the raw table for `args` following the documented precedence.
pub fn assemble(args: &RunArgs, command: Option<Command>, env_cache: Option<String>) -> std::result::Result<Table, ConfigError> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                ConfigError::Invalid(vec![ValidationError { field: "(config file)".into(), message: format!("{}: {e}", p.display()) }])
            })?;
            parse_toml(&text)?
        }
        None => Table::new(),
    };
    if let Some(dir) = env_cache.filter(|d| !d.is_empty()) {
        set_path(&mut table, "io.cache_dir", Value::String(dir))?;
    }
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(w) = args.workers {
        set_path(&mut table, "io.workers", Value::Integer(w as i64))?;
    }
    for (key, p) in [("io.cache_dir", &args.cache_dir), ("io.report", &args.report), ("io.csv", &args.csv), ("io.fields", &args.fields)] {
        if let Some(p) = p {
            set_path(&mut table, key, path_value(p))?;
        }
    }
    if let Some(c) = command {
        set_path(&mut table, "command", Value::String(c.name().into()))?;
    }
    Ok(table)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (args, command) = match &cli.command {
        CliCommand::Cell(a) => (a, Some(Command::Cell)),
        CliCommand::Table(a) => (a, Some(Command::Table)),
        CliCommand::SolveEps(a) => (a, Some(Command::SolveEps)),
        CliCommand::SolveLimit(a) => (a, Some(Command::SolveLimit)),
        CliCommand::Converge(a) => (a, Some(Command::Converge)),
        CliCommand::Ansatz(a) => (a, Some(Command::Ansatz)),
        CliCommand::TwoScale(a) => (a, Some(Command::TwoScale)),
        CliCommand::Potential(a) => (a, Some(Command::Potential)),
        CliCommand::CheckAssumptions(a) => (a, Some(Command::CheckAssumptions)),
        CliCommand::Config(a) => (a, None),
    };
    let cfg = match assemble(args, command, std::env::var(CACHE_ENV).ok()).and_then(parse_table) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if command.is_none() {
        print!("{}", emit_config(&cfg));
        return 0;
    }
    run(&cfg)
}
