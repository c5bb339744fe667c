use std::f64::consts::PI;

use mfghom::cell::{
    linearized_corrector, nu_corrector, solve_cell, solve_cell_coupled, solve_hj_ergodic,
    solve_invariant_density, CellOptions,
};
use mfghom::models::{CouplingModel, HamiltonianModel, LocalLaw, Potential};
use mfghom::torus::{integrate, lap, d1, Order, ScalarField, TorusGrid, VectorField};
use mfghom::Error;

mod common;
use common::*;
use nalgebra::{DMatrix, DVector};

fn opts(n: usize) -> CellOptions {
    CellOptions { n, ..CellOptions::default() }
}

fn cos_field(grid: TorusGrid, amp: f64) -> ScalarField {
    ScalarField::from_fn(grid, |x| amp * (2.0 * PI * x[0]).cos()).unwrap()
}

#[test]
fn flat_quadratic_gives_half_p_squared() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let g = ScalarField::constant(grid, 0.0);
    let (v, hbar) = solve_hj_ergodic(&HamiltonianModel::Quadratic, [1.0, 0.0], &g, &o).unwrap();
    assert!((hbar - 0.5).abs() <= 1e-10);
    assert!(v.max_abs() <= 1e-12);
}

#[test]
fn constant_shift_of_source_shifts_hbar() {
    let o = opts(64);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let g = cos_field(grid, 0.5);
    let g2 = ScalarField::new(grid, g.values().iter().map(|v| v + 0.3).collect()).unwrap();
    let (v1, h1) = solve_hj_ergodic(&h, [0.7, 0.0], &g, &o).unwrap();
    let (v2, h2) = solve_hj_ergodic(&h, [0.7, 0.0], &g2, &o).unwrap();
    assert!((h2 - (h1 - 0.3)).abs() <= 1e-12, "{h1} {h2}");
    let dv = v1.values().iter().zip(v2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dv <= 1e-11);
}

#[test]
fn cole_hopf_oracle_at_n128() {
    let o = opts(128);
    let grid = o.grid().unwrap();
    let g = cos_field(grid, 1.0);
    let (_, hbar) = solve_hj_ergodic(&HamiltonianModel::Quadratic, [0.0, 0.0], &g, &o).unwrap();
    let oracle = cole_hopf_hbar(128, 0.0, g.values());
    assert!((hbar - oracle).abs() <= 1e-8, "newton {hbar} oracle {oracle}");
}

#[test]
fn cole_hopf_oracle_with_potential_and_momentum() {
    let o = opts(64);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::QuadraticPlusPotential { amplitude: 0.8, potential: Potential::Cos };
    let zero = ScalarField::constant(grid, 0.0);
    for &p in &[-1.0, -0.4, 0.0, 0.3, 1.2] {
        let (_, hbar) = solve_hj_ergodic(&h, [p, 0.0], &zero, &o).unwrap();
        // H = p^2/2 + a V and g = 0 give W = -a V
        let w: Vec<f64> = (0..64).map(|i| -0.8 * (2.0 * PI * i as f64 / 64.0).cos()).collect();
        let oracle = cole_hopf_hbar(64, p, &w);
        assert!((hbar - oracle).abs() <= 1e-6, "p={p}: {hbar} vs {oracle}");
    }
}

#[test]
fn zero_drift_gives_uniform_density() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let mu = solve_invariant_density(&VectorField::constant(grid, [0.0, 0.0]), &o).unwrap();
    assert!(mu.values().iter().all(|m| (m - 1.0).abs() <= 1e-13));
}

#[test]
fn sine_drift_matches_closed_form_density() {
    let o = opts(128);
    let grid = o.grid().unwrap();
    let b = ScalarField::from_fn(grid, |x| (2.0 * PI * x[0]).sin()).unwrap();
    let drift = VectorField::new(grid, vec![b.values().to_vec()]).unwrap();
    let mu = solve_invariant_density(&drift, &o).unwrap();
    // mu' + b mu = 0 integrates to exp(cos(2 pi y) / (2 pi)); normalize on a fine grid
    let closed = |y: f64| ((2.0 * PI * y).cos() / (2.0 * PI)).exp();
    let fine = 1024;
    let mass: f64 = (0..fine).map(|i| closed(i as f64 / fine as f64)).sum::<f64>() / fine as f64;
    let l1: f64 = (0..128)
        .map(|i| (mu.values()[i] - closed(i as f64 / 128.0) / mass).abs())
        .sum::<f64>()
        / 128.0;
    assert!(l1 <= 1e-6, "L1 = {l1:e}");
    assert!((integrate(&mu) - 1.0).abs() <= 1e-14);
}

#[test]
fn strong_drift_on_coarse_grid_reports_positivity_violation() {
    let o = opts(8);
    let grid = o.grid().unwrap();
    let b = ScalarField::from_fn(grid, |x| 40.0 * (2.0 * PI * x[0]).sin()).unwrap();
    let drift = VectorField::new(grid, vec![b.values().to_vec()]).unwrap();
    match solve_invariant_density(&drift, &o) {
        Err(Error::PositivityViolated { value, .. }) => assert!(value < -1e-12),
        other => panic!("expected PositivityViolated, got {other:?}"),
    }
}

#[test]
fn coupled_with_zero_coupling_matches_decoupled() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let dec = solve_cell(&h, [0.5, 0.0], &ScalarField::constant(grid, 0.0), &o).unwrap();
    for m in [0.0, 1.0, 3.0] {
        let c = solve_cell_coupled(&h, &CouplingModel::None, [0.5, 0.0], m, [0.0, 0.0], &o).unwrap();
        assert!((c.h_bar - dec.h_bar).abs() <= 1e-12);
        assert!(!c.coupled);
    }
}

#[test]
fn coupled_with_zero_density_reduces_to_frozen_source() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let f = CouplingModel::Local(LocalLaw::Linear { strength: 1.0, amplitude: 1.0 });
    let c = solve_cell_coupled(&h, &f, [0.5, 0.0], 0.0, [0.0, 0.0], &o).unwrap();
    let (_, hb) = solve_hj_ergodic(&h, [0.5, 0.0], &ScalarField::constant(grid, 0.0), &o).unwrap();
    assert!((c.h_bar - hb).abs() <= 1e-12);
}

/// Monolithic Newton on (v, mu, hbar) with a finite-difference Jacobian.
fn monolithic(n: usize, m_param: f64) -> f64 {
    let (d, l) = dense_ops(n);
    let h = 1.0 / n as f64;
    let y: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let w: Vec<f64> = y.iter().map(|&y| 1.0 + 0.5 * (2.0 * PI * y).cos()).collect();
    // unknowns z = [v (n), mu (n), hbar]
    let residual = |z: &DVector<f64>| -> DVector<f64> {
        let v = z.rows(0, n).into_owned();
        let mu = z.rows(n, n).into_owned();
        let hb = z[2 * n];
        let dv = &d * &v;
        let mut r = DVector::zeros(2 * n + 1);
        let lv = &l * &v;
        for i in 0..n {
            r[i] = -lv[i] + 0.5 * dv[i] * dv[i] - w[i] * m_param * mu[i] - hb;
        }
        // stationary FP: transpose of -L + diag(Dv) D applied to mu
        let mut jac = -&l;
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] += dv[i] * d[(i, j)];
            }
        }
        let fp = jac.transpose() * &mu;
        for i in 0..n - 1 {
            r[n + i] = fp[i];
        }
        r[2 * n - 1] = h * mu.sum() - 1.0;
        r[2 * n] = h * v.sum();
        r
    };
    let mut z = DVector::zeros(2 * n + 1);
    for i in 0..n {
        z[n + i] = 1.0;
    }
    for _ in 0..40 {
        let r = residual(&z);
        if r.amax() < 1e-13 {
            break;
        }
        let mut j = DMatrix::zeros(2 * n + 1, 2 * n + 1);
        for k in 0..2 * n + 1 {
            let step = 1e-7;
            let mut zp = z.clone();
            zp[k] += step;
            let mut zm = z.clone();
            zm[k] -= step;
            let col = (residual(&zp) - residual(&zm)) / (2.0 * step);
            j.set_column(k, &col);
        }
        z -= j.lu().solve(&r).unwrap();
    }
    z[2 * n]
}

#[test]
fn coupled_cell_matches_monolithic_newton() {
    let mut o = opts(32);
    o.fixed_point_tol = 1e-12;
    let h = HamiltonianModel::Quadratic;
    let f = CouplingModel::Local(LocalLaw::Linear { strength: 1.0, amplitude: 1.0 });
    let c = solve_cell_coupled(&h, &f, [0.0, 0.0], 1.0, [0.0, 0.0], &o).unwrap();
    let oracle = monolithic(32, 1.0);
    assert!((c.h_bar - oracle).abs() <= 1e-8, "{} vs {}", c.h_bar, oracle);
    assert!(c.residuals.hj <= 1e-9 && c.residuals.fp <= 1e-9, "{:?}", c.residuals);
}

#[test]
fn linearized_corrector_flat_case() {
    let o = opts(16);
    let grid = o.grid().unwrap();
    let cs = solve_cell(&HamiltonianModel::Quadratic, [0.8, 0.0], &ScalarField::constant(grid, 0.0), &o).unwrap();
    let lc = linearized_corrector(&cs, 0).unwrap();
    assert!(lc.w_pi.max_abs() <= 1e-12);
    assert!((lc.h_bar_pi - 0.8).abs() <= 1e-12);
}

#[test]
fn linearized_corrector_identities() {
    let o = opts(64);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let g = cos_field(grid, 0.4);
    let p = 0.6;
    let cs = solve_cell(&h, [p, 0.0], &g, &o).unwrap();
    let lc = linearized_corrector(&cs, 0).unwrap();
    // duality with the invariant density
    let dv = d1(&grid, cs.v.values(), 0, Order::Fourth);
    let hp: Vec<f64> = (0..64)
        .map(|i| {
            let y = i as f64 / 64.0;
            (1.0 + 0.5 * (2.0 * PI * y).cos()) * (p + dv[i]) * cs.mu.values()[i]
        })
        .collect();
    let avg = hp.iter().sum::<f64>() / 64.0;
    assert!((lc.h_bar_pi - avg).abs() <= 1e-9, "{} vs {}", lc.h_bar_pi, avg);
    assert!(integrate(&lc.w_pi).abs() <= 1e-10);
    // finite difference of the ergodic constant
    let d = 1e-4;
    let (_, hp_plus) = solve_hj_ergodic(&h, [p + d, 0.0], &g, &o).unwrap();
    let (_, hp_minus) = solve_hj_ergodic(&h, [p - d, 0.0], &g, &o).unwrap();
    let fd = (hp_plus - hp_minus) / (2.0 * d);
    assert!((lc.h_bar_pi - fd).abs() <= 1e-6, "{} vs {}", lc.h_bar_pi, fd);
}

#[test]
fn linearized_corrector_rejects_coupled_cells() {
    let o = opts(16);
    let f = CouplingModel::Local(LocalLaw::Linear { strength: 1.0, amplitude: 0.0 });
    let cs = solve_cell_coupled(&HamiltonianModel::Quadratic, &f, [0.3, 0.0], 1.0, [0.0, 0.0], &o).unwrap();
    assert_eq!(linearized_corrector(&cs, 0).unwrap_err(), Error::CoupledCellUnsupported);
}

#[test]
fn nu_corrector_cases() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let drift = VectorField::new(
        grid,
        vec![(0..32).map(|i| 0.7 + 0.4 * (2.0 * PI * i as f64 / 32.0).sin()).collect()],
    )
    .unwrap();
    let zero = nu_corrector(&ScalarField::constant(grid, 0.0), &drift, &o).unwrap();
    assert!(zero.max_abs() <= 1e-14);

    // manufactured: rhs = Lap phi + div(b phi)
    let phi: Vec<f64> = (0..32)
        .map(|i| {
            let y = i as f64 / 32.0;
            0.3 * (2.0 * PI * y).cos() - 0.2 * (4.0 * PI * y).sin() + 0.1 * (6.0 * PI * y).cos()
        })
        .collect();
    let bphi: Vec<f64> = phi.iter().zip(drift.component(0)).map(|(a, b)| a * b).collect();
    let lp = lap(&grid, &phi, Order::Fourth);
    let dp = d1(&grid, &bphi, 0, Order::Fourth);
    let rhs = ScalarField::new(grid, lp.iter().zip(&dp).map(|(a, b)| a + b).collect()).unwrap();
    let nu = nu_corrector(&rhs, &drift, &o).unwrap();
    let err = nu.values().iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err:e}");

    match nu_corrector(&ScalarField::constant(grid, 1.0), &drift, &o) {
        Err(Error::CompatibilityViolated { integral }) => assert!((integral - 1.0).abs() < 1e-12),
        other => panic!("expected CompatibilityViolated, got {other:?}"),
    }
}

#[test]
fn newton_guess_shift_does_not_change_hbar() {
    let o = opts(32);
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let g = cos_field(grid, 0.5);
    let a = solve_cell(&h, [0.4, 0.0], &g, &o).unwrap();
    let b = mfghom::cell::solve_hj_ergodic_from(&h, [0.4, 0.0], &g, &o, Some((&vec![3.0; 32], 0.0))).unwrap();
    assert!((a.h_bar - b.1).abs() <= 1e-10);
}

#[test]
fn two_dimensional_cell_is_consistent() {
    let o = CellOptions { n: 16, dim: 2, ..CellOptions::default() };
    let grid = o.grid().unwrap();
    let h = HamiltonianModel::QuadraticPlusPotential { amplitude: 0.5, potential: Potential::CosSin };
    let cs = solve_cell(&h, [0.3, -0.2], &ScalarField::constant(grid, 0.0), &o).unwrap();
    assert!(integrate(&cs.v).abs() <= 1e-10);
    assert!((integrate(&cs.mu) - 1.0).abs() <= 1e-12);
    assert!(cs.mu.min() > 0.0);
    for axis in 0..2 {
        let lc = linearized_corrector(&cs, axis).unwrap();
        let b = mfghom::effective::effective_drift(&cs);
        assert!((lc.h_bar_pi - b[axis]).abs() <= 1e-9);
    }
}
