#![allow(dead_code)]

use std::f64::consts::PI;

use mfghom::eps_solver::{aligned_grid, Averaging, PicardOptions, TimeGrid};
use mfghom::experiments::potential::PotentialProblem;
use mfghom::models::{CouplingModel, Hamiltonian, HamiltonianModel, LocalLaw};
use nalgebra::{DMatrix, DVector};

/// Dense periodic 4th-order stencil matrices, built independently of the library.
pub fn dense_ops(n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1.0 / n as f64;
    let mut d = DMatrix::zeros(n, n);
    let mut l = DMatrix::zeros(n, n);
    let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
    for i in 0..n as isize {
        let r = i as usize;
        for (o, c) in [(-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)] {
            d[(r, wrap(i + o))] += c / (12.0 * h);
        }
        for (o, c) in [(-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0)] {
            l[(r, wrap(i + o))] += c / (12.0 * h * h);
        }
    }
    (d, l)
}

/// Principal eigenvalue of `-2 Lap + 2 p D + W` by shifted inverse power iteration.
pub fn cole_hopf_hbar(n: usize, p: f64, w: &[f64]) -> f64 {
    let (d, l) = dense_ops(n);
    let mut a = -2.0 * l + 2.0 * p * d;
    for i in 0..n {
        a[(i, i)] += w[i];
    }
    let sigma = w.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] -= sigma;
    }
    let lu = shifted.lu();
    let mut x = DVector::from_element(n, 1.0);
    let mut lambda = 0.0;
    for _ in 0..200 {
        let y = lu.solve(&x).unwrap();
        let ny = y.norm();
        let next = y / ny;
        let rq = (next.transpose() * &a * &next)[(0, 0)];
        let done = (rq - lambda).abs() < 1e-14 * rq.abs().max(1.0);
        lambda = rq;
        x = next;
        if done {
            break;
        }
    }
    // for p != 0 the operator is not symmetric; refine with the eigen-residual quotient
    let ax = &a * &x;
    let lambda = if p == 0.0 { lambda } else { ax.dot(&x) / x.dot(&x) };
    0.5 * p * p - lambda
}

pub fn tiny_potential() -> PotentialProblem {
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let f = CouplingModel::Local(LocalLaw::Linear { strength: 1.0, amplitude: 0.5 });
    let grid = aligned_grid(1, 1, 4, 0.5).unwrap();
    assert_eq!(grid.len(), 8);
    let x: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    let u_t = x.iter().map(|x| 0.1 * (2.0 * PI * x).sin()).collect();
    let m0 = x.iter().map(|x| 1.0 + 0.2 * (2.0 * PI * x).cos()).collect();
    PotentialProblem::new(&h, &f, grid, 4, 0.5, TimeGrid::new(0.1, 4).unwrap(), u_t, m0).unwrap()
}

/// Dense fourth-order periodic derivative, built independently.
pub fn dense_derivative(n: usize, h: f64) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        for (o, c) in [(-2i64, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)] {
            row[(i as i64 + o).rem_euclid(n as i64) as usize] += c / (12.0 * h);
        }
    }
    d
}

/// Terms of the discrete duality identity at N=8, K=4, with derivatives from an independent dense stencil.
pub struct DualityOracle {
    pub j: f64,
    pub rhs: f64,
    pub explicit: f64,
    pub lib_j: f64,
    pub lib_dual: f64,
}

pub fn duality_oracle() -> DualityOracle {
    let prob = tiny_potential();
    let opts = PicardOptions { tol: 1e-13, max_iters: 2000, averaging: Averaging::FixedDamping, ..PicardOptions::default() };
    let sol = prob.solve(&opts).unwrap();
    let (n, k, dt, h) = (8, 4, 0.1 / 4.0, 1.0 / 8.0);
    let d = dense_derivative(n, h);
    let y: Vec<[f64; 2]> = (0..n).map(|i| [((i % 4) as f64) / 4.0, 0.0]).collect();
    let grad = |u: &[f64]| (0..n).map(|i| (0..n).map(|j| d[i][j] * u[j]).sum::<f64>()).collect::<Vec<f64>>();
    let quad = |v: &[f64]| v.iter().sum::<f64>() * h;
    let big_f = |m: f64, y: f64| 0.5 * (1.0 + 0.25 * (2.0 * PI * y).cos()) * m * m;
    let small_f = |m: f64, y: f64| (1.0 + 0.25 * (2.0 * PI * y).cos()) * m;
    let ham = &prob.hamiltonian;

    let mut j = quad(&(0..n).map(|i| prob.u_terminal[i] * sol.m[0][i]).collect::<Vec<_>>());
    let mut rhs = quad(&(0..n).map(|i| sol.u_tilde[k][i] * prob.m_initial[i]).collect::<Vec<_>>());
    let mut explicit = 0.0;
    for s in 0..k {
        let (du0, du1) = (grad(&sol.u_tilde[s]), grad(&sol.u_tilde[s + 1]));
        let m = &sol.m[s];
        let run: Vec<f64> = (0..n)
            .map(|i| {
                let b = ham.dp([du1[i], 0.0], y[i]);
                ham.conjugate(b, y[i]) * m[i] + big_f(m[i], y[i][0])
            })
            .collect();
        j += dt * quad(&run);
        rhs += dt * quad(&(0..n).map(|i| big_f(m[i], y[i][0]) - small_f(m[i], y[i][0]) * m[i]).collect::<Vec<_>>());
        explicit += dt
            * quad(&(0..n).map(|i| (ham.value([du0[i], 0.0], y[i]) - ham.value([du1[i], 0.0], y[i])) * m[i]).collect::<Vec<_>>());
    }
    assert!((j - rhs - explicit).abs() <= 1e-10, "{j} vs {rhs} + {explicit}");
    let lib_j = prob.objective(&prob.optimal_controls(&sol), &sol.m);
    DualityOracle { j, rhs, explicit, lib_j, lib_dual: prob.dual_value(&sol) }
}
