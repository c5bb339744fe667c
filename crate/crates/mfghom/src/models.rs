//! Catalog of Hamiltonians `H(p, y)` and couplings `F`, with analytic derivatives and
//! sampling checks of convexity, monotonicity and the large-|p| Lipschitz condition.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{integrate_values, TorusGrid};

pub type Vec2 = [f64; 2];

const TWO_PI: f64 = 2.0 * PI;

/// Evaluators a Hamiltonian has to provide. Points in 1-D use the first component only.
pub trait Hamiltonian: Sync {
    fn value(&self, p: Vec2, y: Vec2) -> f64;
    fn dp(&self, p: Vec2, y: Vec2) -> Vec2;
    fn dy(&self, p: Vec2, y: Vec2) -> Vec2;
    /// Lower bound on the smallest eigenvalue of the p-Hessian.
    fn hessian_lower_bound(&self) -> f64;
}

/// Closed-form periodic potentials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Potential {
    /// `cos(2 pi y1)`
    Cos,
    /// `cos(2 pi y1) + sin(2 pi y2)` (the second term vanishes in 1-D)
    CosSin,
}

impl Potential {
    pub fn value(self, y: Vec2) -> f64 {
        match self {
            Potential::Cos => (TWO_PI * y[0]).cos(),
            Potential::CosSin => (TWO_PI * y[0]).cos() + (TWO_PI * y[1]).sin(),
        }
    }
    pub fn grad(self, y: Vec2) -> Vec2 {
        match self {
            Potential::Cos => [-TWO_PI * (TWO_PI * y[0]).sin(), 0.0],
            Potential::CosSin => [-TWO_PI * (TWO_PI * y[0]).sin(), TWO_PI * (TWO_PI * y[1]).cos()],
        }
    }
}

/// The three catalog Hamiltonians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HamiltonianModel {
    /// `H = |p|^2 / 2`
    Quadratic,
    /// `H = |p|^2 / 2 + amplitude * V(y)`
    QuadraticPlusPotential { amplitude: f64, potential: Potential },
    /// `H = a(y) |p|^2 / 2` with `a(y) = 1 + (amplitude / 2) cos(2 pi y1)`, `|amplitude| < 2`
    WeightedQuadratic { amplitude: f64 },
}

impl HamiltonianModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            HamiltonianModel::WeightedQuadratic { amplitude } if !(amplitude.abs() < 2.0) => {
                Err(Error::InvalidArgument(format!(
                    "weighted-quadratic amplitude must satisfy |a| < 2, got {amplitude}"
                )))
            }
            HamiltonianModel::QuadraticPlusPotential { amplitude, .. } if !amplitude.is_finite() => {
                Err(Error::InvalidArgument("potential amplitude must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// True when `H` does not depend on `y`.
    pub fn is_flat(&self) -> bool {
        match self {
            HamiltonianModel::Quadratic => true,
            HamiltonianModel::QuadraticPlusPotential { amplitude, .. } => *amplitude == 0.0,
            HamiltonianModel::WeightedQuadratic { amplitude } => *amplitude == 0.0,
        }
    }

    fn weight(amplitude: f64, y: Vec2) -> f64 {
        1.0 + 0.5 * amplitude * (TWO_PI * y[0]).cos()
    }

    /// Convex conjugate `H*(a, y) = sup_p (a.p - H(p, y))`.
    pub fn conjugate(&self, a: Vec2, y: Vec2) -> f64 {
        let a2 = a[0] * a[0] + a[1] * a[1];
        match self {
            HamiltonianModel::Quadratic => 0.5 * a2,
            HamiltonianModel::QuadraticPlusPotential { amplitude, potential } => {
                0.5 * a2 - amplitude * potential.value(y)
            }
            HamiltonianModel::WeightedQuadratic { amplitude } => {
                0.5 * a2 / Self::weight(*amplitude, y)
            }
        }
    }

    /// p-Hessian applied as a 2x2 matrix `[[h00, h01], [h01, h11]]`.
    pub fn dpp(&self, _p: Vec2, y: Vec2) -> [f64; 3] {
        match self {
            HamiltonianModel::WeightedQuadratic { amplitude } => {
                let w = Self::weight(*amplitude, y);
                [w, 0.0, w]
            }
            _ => [1.0, 0.0, 1.0],
        }
    }
}

impl Hamiltonian for HamiltonianModel {
    fn value(&self, p: Vec2, y: Vec2) -> f64 {
        let p2 = p[0] * p[0] + p[1] * p[1];
        match self {
            HamiltonianModel::Quadratic => 0.5 * p2,
            HamiltonianModel::QuadraticPlusPotential { amplitude, potential } => {
                0.5 * p2 + amplitude * potential.value(y)
            }
            HamiltonianModel::WeightedQuadratic { amplitude } => {
                0.5 * Self::weight(*amplitude, y) * p2
            }
        }
    }

    fn dp(&self, p: Vec2, y: Vec2) -> Vec2 {
        match self {
            HamiltonianModel::WeightedQuadratic { amplitude } => {
                let w = Self::weight(*amplitude, y);
                [w * p[0], w * p[1]]
            }
            _ => p,
        }
    }

    fn dy(&self, p: Vec2, y: Vec2) -> Vec2 {
        match self {
            HamiltonianModel::Quadratic => [0.0, 0.0],
            HamiltonianModel::QuadraticPlusPotential { amplitude, potential } => {
                let g = potential.grad(y);
                [amplitude * g[0], amplitude * g[1]]
            }
            HamiltonianModel::WeightedQuadratic { amplitude } => {
                let p2 = p[0] * p[0] + p[1] * p[1];
                [-0.25 * amplitude * TWO_PI * (TWO_PI * y[0]).sin() * p2, 0.0]
            }
        }
    }

    fn hessian_lower_bound(&self) -> f64 {
        match self {
            HamiltonianModel::WeightedQuadratic { amplitude } => 1.0 - 0.5 * amplitude.abs(),
            _ => 1.0,
        }
    }
}

/// Local coupling laws `F(y, m)`; `w(y) = 1 + (amplitude / 2) cos(2 pi y1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum LocalLaw {
    /// `F = strength * w(y) * m`
    Linear { strength: f64, amplitude: f64 },
    /// `F = strength * w(y) * m^exponent`, `exponent > 0`, `m >= 0`
    Power { strength: f64, amplitude: f64, exponent: f64 },
}

/// Coupling between the density and the Hamilton-Jacobi equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum CouplingModel {
    /// `F = 0`
    None,
    /// Pointwise dependence on the density.
    Local(LocalLaw),
    /// `F(x, m) = strength * (rho_sigma * m)(x)` with a periodized Gaussian `rho_sigma`.
    Nonlocal { sigma: f64, strength: f64 },
}

/// Which path the cell problem takes for a coupling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    None,
    Local,
    Nonlocal,
}

impl CouplingModel {
    pub fn kind(&self) -> CouplingKind {
        match self {
            CouplingModel::None => CouplingKind::None,
            CouplingModel::Local(_) => CouplingKind::Local,
            CouplingModel::Nonlocal { .. } => CouplingKind::Nonlocal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CouplingModel::Nonlocal { sigma, strength } => {
                if !(*sigma > 0.0) || !strength.is_finite() {
                    return Err(Error::InvalidArgument("nonlocal coupling needs sigma > 0".into()));
                }
            }
            CouplingModel::Local(LocalLaw::Power { exponent, amplitude, .. }) => {
                if !(*exponent > 0.0) || !(amplitude.abs() < 2.0) {
                    return Err(Error::InvalidArgument(
                        "power law needs exponent > 0 and |amplitude| < 2".into(),
                    ));
                }
            }
            CouplingModel::Local(LocalLaw::Linear { amplitude, .. }) => {
                if !(amplitude.abs() < 2.0) {
                    return Err(Error::InvalidArgument("|amplitude| < 2 required".into()));
                }
            }
            CouplingModel::None => {}
        }
        Ok(())
    }

    fn weight(amplitude: f64, y: Vec2) -> f64 {
        1.0 + 0.5 * amplitude * (TWO_PI * y[0]).cos()
    }

    /// Pointwise `F(y, m)`; zero for the nonlocal variant (use [`Self::convolve`]).
    pub fn local(&self, y: Vec2, m: f64) -> f64 {
        match self {
            CouplingModel::Local(LocalLaw::Linear { strength, amplitude }) => {
                strength * Self::weight(*amplitude, y) * m
            }
            CouplingModel::Local(LocalLaw::Power { strength, amplitude, exponent }) => {
                strength * Self::weight(*amplitude, y) * m.max(0.0).powf(*exponent)
            }
            _ => 0.0,
        }
    }

    /// `dF/dm` for local laws.
    pub fn local_dm(&self, y: Vec2, m: f64) -> f64 {
        match self {
            CouplingModel::Local(LocalLaw::Linear { strength, amplitude }) => {
                strength * Self::weight(*amplitude, y)
            }
            CouplingModel::Local(LocalLaw::Power { strength, amplitude, exponent }) => {
                let m = m.max(0.0);
                if m == 0.0 && *exponent < 1.0 {
                    f64::INFINITY
                } else {
                    strength * Self::weight(*amplitude, y) * exponent * m.powf(exponent - 1.0)
                }
            }
            _ => 0.0,
        }
    }

    /// Primitive `P(y, m)` with `dP/dm = F`, `P(y, 0) = 0`, when the coupling declares one.
    pub fn primitive(&self, y: Vec2, m: f64) -> Option<f64> {
        match self {
            CouplingModel::None => Some(0.0),
            CouplingModel::Local(LocalLaw::Linear { strength, amplitude }) => {
                Some(0.5 * strength * Self::weight(*amplitude, y) * m * m)
            }
            CouplingModel::Local(LocalLaw::Power { strength, amplitude, exponent }) => Some(
                strength * Self::weight(*amplitude, y) * m.max(0.0).powf(exponent + 1.0)
                    / (exponent + 1.0),
            ),
            CouplingModel::Nonlocal { .. } => None,
        }
    }

    pub fn has_primitive(&self) -> bool {
        !matches!(self, CouplingModel::Nonlocal { .. })
    }

    /// Fourier multiplier of the periodized Gaussian on a torus of side `side`.
    fn multiplier(sigma: f64, side: f64, k: [i64; 2]) -> f64 {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        (-2.0 * PI * PI * sigma * sigma * k2 / (side * side)).exp()
    }

    /// Evaluate `F` on a whole density field. Local laws act pointwise with the supplied
    /// cell coordinates; the nonlocal variant convolves over the grid.
    pub fn evaluate(&self, grid: &TorusGrid, y: &[Vec2], m: &[f64]) -> Vec<f64> {
        match self {
            CouplingModel::None => vec![0.0; m.len()],
            CouplingModel::Local(_) => y.iter().zip(m).map(|(&yy, &mm)| self.local(yy, mm)).collect(),
            CouplingModel::Nonlocal { sigma, strength } => {
                Self::convolve(grid, *sigma, m).into_iter().map(|v| strength * v).collect()
            }
        }
    }

    /// `(rho_sigma * m)` on the grid, exact for band-limited data.
    pub fn convolve(grid: &TorusGrid, sigma: f64, m: &[f64]) -> Vec<f64> {
        let n = grid.n_axis();
        let side = grid.side();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut data: Vec<Complex<f64>> = m.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let freq = |i: usize| -> i64 {
            if i <= n / 2 {
                i as i64
            } else {
                i as i64 - n as i64
            }
        };
        if grid.dim() == 1 {
            fwd.process(&mut data);
            for (i, c) in data.iter_mut().enumerate() {
                *c *= Self::multiplier(sigma, side, [freq(i), 0]);
            }
            inv.process(&mut data);
            data.iter().map(|c| c.re / n as f64).collect()
        } else {
            for row in data.chunks_mut(n) {
                fwd.process(row);
            }
            transpose_sq(&mut data, n);
            for row in data.chunks_mut(n) {
                fwd.process(row);
            }
            // rows are now indexed by the axis-0 frequency
            for r in 0..n {
                for c in 0..n {
                    data[r * n + c] *= Self::multiplier(sigma, side, [freq(r), freq(c)]);
                }
            }
            for row in data.chunks_mut(n) {
                inv.process(row);
            }
            transpose_sq(&mut data, n);
            for row in data.chunks_mut(n) {
                inv.process(row);
            }
            let s = (n * n) as f64;
            data.iter().map(|c| c.re / s).collect()
        }
    }

    /// Nodal values of the periodized Gaussian kernel.
    pub fn kernel_values(grid: &TorusGrid, sigma: f64) -> Vec<f64> {
        let side = grid.side();
        let g1 = |x: f64| -> f64 {
            let mut s = 0.0;
            for k in -6i32..=6 {
                let z = x + k as f64 * side;
                s += (-z * z / (2.0 * sigma * sigma)).exp();
            }
            s / (sigma * (2.0 * PI).sqrt())
        };
        (0..grid.len())
            .map(|i| {
                let x = grid.coords(i);
                let mut v = g1(x[0]);
                if grid.dim() == 2 {
                    v *= g1(x[1]);
                }
                v
            })
            .collect()
    }
}

fn transpose_sq(data: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            data.swap(r * n + c, c * n + r);
        }
    }
}

/// Where an assumption check attained its worst value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Witness {
    Point { p: Vec2, y: Vec2 },
    TrialPair { trial: usize, f1: TrigPoly, f2: TrigPoly },
}

/// Result of one assumption check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub name: String,
    pub passed: bool,
    pub worst_value: f64,
    pub witness: Witness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn lattice(samples: usize, lo: f64, hi: f64, closed: bool) -> Vec<f64> {
    if samples == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let div = if closed { samples - 1 } else { samples };
    (0..samples).map(|i| lo + (hi - lo) * i as f64 / div as f64).collect()
}

fn points(dim: usize, axis: &[f64]) -> Vec<Vec2> {
    if dim == 1 {
        axis.iter().map(|&a| [a, 0.0]).collect()
    } else {
        axis.iter().flat_map(|&a| axis.iter().map(move |&b| [a, b])).collect()
    }
}

/// Smallest eigenvalue of the central-difference p-Hessian at `(p, y)`.
pub fn hessian_min_eig(h: &dyn Hamiltonian, dim: usize, p: Vec2, y: Vec2) -> f64 {
    let d = 1e-3;
    let e = |k: usize| if k == 0 { [d, 0.0] } else { [0.0, d] };
    let add = |a: Vec2, b: Vec2, s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    let h0 = h.value(p, y);
    let second = |k: usize| {
        (h.value(add(p, e(k), 1.0), y) - 2.0 * h0 + h.value(add(p, e(k), -1.0), y)) / (d * d)
    };
    let a = second(0);
    if dim == 1 {
        return a;
    }
    let c = second(1);
    let pp = add(add(p, e(0), 1.0), e(1), 1.0);
    let pm = add(add(p, e(0), 1.0), e(1), -1.0);
    let mp = add(add(p, e(0), -1.0), e(1), 1.0);
    let mm = add(add(p, e(0), -1.0), e(1), -1.0);
    let b = (h.value(pp, y) - h.value(pm, y) - h.value(mp, y) + h.value(mm, y)) / (4.0 * d * d);
    0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

/// Minimum p-Hessian eigenvalue over a lattice of `samples` points per axis in
/// `[-radius, radius]^dim x [0, 1)^dim`.
pub fn check_convexity(h: &dyn Hamiltonian, dim: usize, radius: f64, samples: usize) -> Result<AssumptionReport> {
    if samples < 1 || !(radius > 0.0) {
        return Err(Error::InvalidArgument("need samples >= 1 and radius > 0".into()));
    }
    let ps = points(dim, &lattice(samples, -radius, radius, true));
    let ys = points(dim, &lattice(samples, 0.0, 1.0, false));
    let mut worst = f64::INFINITY;
    let mut witness = Witness::Point { p: [0.0; 2], y: [0.0; 2] };
    for &p in &ps {
        for &y in &ys {
            let v = hessian_min_eig(h, dim, p, y);
            if v < worst {
                worst = v;
                witness = Witness::Point { p, y };
            }
        }
    }
    Ok(AssumptionReport {
        name: "convexity".into(),
        passed: worst > 0.0,
        worst_value: worst,
        witness,
        note: None,
    })
}

/// Trigonometric polynomial of degree <= 3 in each axis, `sum a_k cos(2 pi k.x) + b_k sin(2 pi k.x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigPoly {
    pub modes: Vec<[i32; 2]>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl TrigPoly {
    pub fn random(dim: usize, rng: &mut impl Rng, amplitude: f64) -> Self {
        let mut modes = vec![[0, 0]];
        for k0 in 0..=3i32 {
            for k1 in 0..=(if dim == 2 { 3 } else { 0 }) {
                if k0 + k1 > 0 && k0 + k1 <= 3 {
                    modes.push([k0, k1]);
                }
            }
        }
        let cos = modes.iter().map(|_| amplitude * rng.random_range(-1.0..1.0)).collect();
        let sin = modes
            .iter()
            .map(|m| if m == &[0, 0] { 0.0 } else { amplitude * rng.random_range(-1.0..1.0) })
            .collect();
        TrigPoly { modes, cos, sin }
    }

    /// Value at `x` on a torus of side `side`.
    pub fn eval(&self, x: Vec2, side: f64) -> f64 {
        let mut s = 0.0;
        for (i, k) in self.modes.iter().enumerate() {
            let arg = TWO_PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]) / side;
            s += self.cos[i] * arg.cos() + self.sin[i] * arg.sin();
        }
        s
    }

    pub fn sample(&self, grid: &TorusGrid) -> Vec<f64> {
        (0..grid.len()).map(|i| self.eval(grid.coords(i), grid.side())).collect()
    }
}

/// Density built from a trial polynomial: `exp(q)`, smooth and positive.
pub fn trial_density(q: &TrigPoly, grid: &TorusGrid) -> Vec<f64> {
    q.sample(grid).into_iter().map(f64::exp).collect()
}

/// `int (F[f1] - F[f2]) (f1 - f2)` on `grid` (cell coordinates are the grid coordinates).
pub fn monotonicity_integral(f: &CouplingModel, grid: &TorusGrid, f1: &[f64], f2: &[f64]) -> f64 {
    let y: Vec<Vec2> = (0..grid.len()).map(|i| grid.coords(i)).collect();
    let a = f.evaluate(grid, &y, f1);
    let b = f.evaluate(grid, &y, f2);
    let prod: Vec<f64> = (0..f1.len()).map(|i| (a[i] - b[i]) * (f1[i] - f2[i])).collect();
    integrate_values(grid, &prod)
}

/// Seeded monotonicity check on the unit torus (64 points per axis).
pub fn check_monotonicity(f: &CouplingModel, dim: usize, trials: usize, seed: u64) -> Result<AssumptionReport> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let grid = TorusGrid::unit(dim, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for trial in 0..trials {
        let q1 = TrigPoly::random(dim, &mut rng, 0.3);
        let q2 = TrigPoly::random(dim, &mut rng, 0.3);
        let v = monotonicity_integral(f, &grid, &trial_density(&q1, &grid), &trial_density(&q2, &grid));
        if v < worst || witness.is_none() {
            worst = v;
            witness = Some(Witness::TrialPair { trial, f1: q1, f2: q2 });
        }
    }
    Ok(AssumptionReport {
        name: "monotonicity".into(),
        passed: worst >= -1e-12,
        worst_value: worst,
        witness: witness.expect("trials >= 1"),
        note: None,
    })
}

/// `theta H^2 + (D_y H, p) - eps (D_x F, p)` at one sample.
///
/// Catalog couplings have no explicit x dependence at a frozen uniform density, so the
/// `D_x F` term is zero; the pairing is the Euclidean inner product.
pub fn lip_value(h: &dyn Hamiltonian, _f: &CouplingModel, theta: f64, _eps: f64, p: Vec2, y: Vec2) -> f64 {
    let hv = h.value(p, y);
    let dy = h.dy(p, y);
    theta * hv * hv + dy[0] * p[0] + dy[1] * p[1]
}

/// Infimum of [`lip_value`] over `|p| = p_radius` and a lattice of `samples` cell points
/// per axis (and `4 * samples` directions in 2-D).
pub fn check_lip_condition(
    h: &dyn Hamiltonian,
    f: &CouplingModel,
    dim: usize,
    theta: f64,
    p_radius: f64,
    eps: f64,
    samples: usize,
) -> Result<AssumptionReport> {
    if !(theta > 0.0 && theta < 1.0) || !(p_radius > 0.0) || samples < 1 {
        return Err(Error::InvalidArgument("need theta in (0,1), p_radius > 0, samples >= 1".into()));
    }
    let ps: Vec<Vec2> = if dim == 1 {
        vec![[p_radius, 0.0], [-p_radius, 0.0]]
    } else {
        (0..4 * samples)
            .map(|k| {
                let a = TWO_PI * k as f64 / (4 * samples) as f64;
                [p_radius * a.cos(), p_radius * a.sin()]
            })
            .collect()
    };
    let ys = points(dim, &lattice(samples, 0.0, 1.0, false));
    let mut worst = f64::INFINITY;
    let mut witness = Witness::Point { p: [0.0; 2], y: [0.0; 2] };
    for &p in &ps {
        for &y in &ys {
            let v = lip_value(h, f, theta, eps, p, y);
            if v < worst {
                worst = v;
                witness = Witness::Point { p, y };
            }
        }
    }
    Ok(AssumptionReport {
        name: "lip".into(),
        passed: worst > 0.0,
        worst_value: worst,
        witness,
        note: Some("pairing d(.,.) evaluated as the Euclidean inner product".into()),
    })
}
