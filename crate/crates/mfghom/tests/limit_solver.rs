use std::f64::consts::PI;

use mfghom::cell::CellOptions;
use mfghom::effective::{build_table, EffectiveTable};
use mfghom::eps_solver::{mass_defect, solve_mfg_eps, EpsProblem, MFGSolution, PicardOptions, SchemeChoice, TimeGrid};
use mfghom::limit_solver::{residual_check, solve_limit, stable_step, LimitProblem};
use mfghom::models::{CouplingModel, HamiltonianModel};
use mfghom::torus::{ScalarField, TorusGrid};
use mfghom::Error;
use proptest::prelude::*;

fn lin(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn table(h: HamiltonianModel, lo: f64, hi: f64, nodes: usize) -> EffectiveTable {
    let o = CellOptions { n: 32, ..CellOptions::default() };
    build_table(&h, &CouplingModel::None, &[lin(lo, hi, nodes)], &[1.0], &o, 1).unwrap()
}

fn weighted_table() -> EffectiveTable {
    table(HamiltonianModel::WeightedQuadratic { amplitude: 1.0 }, 0.5, 1.5, 101)
}

fn problem(t: &EffectiveTable, n: usize, a: f64, b: f64, steps_factor: usize) -> LimitProblem {
    let grid = TorusGrid::unit(1, n).unwrap();
    let u0 = ScalarField::from_fn(grid, |x| a * (2.0 * PI * x[0]).sin()).unwrap();
    let m_t = ScalarField::from_fn(grid, |x| 1.0 + b * (2.0 * PI * x[0]).cos()).unwrap();
    let base = TimeGrid::with_max_step(0.25, stable_step(t, &grid)).unwrap();
    LimitProblem {
        table: t.clone(),
        coupling: CouplingModel::None,
        p_lin: [1.0, 0.0],
        u0,
        m_t,
        times: TimeGrid::new(0.25, base.steps * steps_factor).unwrap(),
    }
}

fn solve(prob: &LimitProblem) -> MFGSolution {
    let sol = solve_limit(prob, &PicardOptions::default()).unwrap();
    assert!(sol.converged);
    sol
}

#[test]
fn constant_data_is_transported_exactly() {
    let t = weighted_table();
    let prob = problem(&t, 64, 0.0, 0.0, 1);
    let sol = solve(&prob);
    let h1 = t.h_at(50, 0);
    assert_eq!(t.p_at(50)[0], 1.0);
    for n in 0..sol.times.len() {
        let exact = -sol.times.t(n) * h1;
        assert!(sol.u_tilde[n].iter().all(|u| (u - exact).abs() <= 1e-12));
        assert!(sol.m[n].iter().all(|m| (m - 1.0).abs() <= 1e-12));
    }
    let r = residual_check(&sol, &prob).unwrap();
    assert!(r.hj_residual <= 1e-10 && r.transport_residual <= 1e-10, "{r:?}");
}

#[test]
fn flat_table_matches_first_order_eps_run() {
    let t = table(HamiltonianModel::Quadratic, -1.0, 1.0, 9);
    let grid = TorusGrid::unit(1, 64).unwrap();
    let m_t = ScalarField::from_fn(grid, |x| 1.0 + 0.3 * (2.0 * PI * x[0]).cos()).unwrap();
    let times = TimeGrid::with_max_step(0.5, stable_step(&t, &grid)).unwrap();
    let lp = LimitProblem {
        table: t.clone(),
        coupling: CouplingModel::None,
        p_lin: [0.5, 0.0],
        u0: ScalarField::constant(grid, 0.0),
        m_t: m_t.clone(),
        times,
    };
    let ep = EpsProblem {
        hamiltonian: HamiltonianModel::Quadratic,
        coupling: CouplingModel::None,
        p_lin: [0.5, 0.0],
        u0: ScalarField::constant(grid, 0.0),
        m_t,
        epsilon: 0.0,
        times,
        scheme: SchemeChoice::Monotone,
        dissipation: Some(t.lipschitz_p()),
    };
    let a = solve(&lp);
    let b = solve_mfg_eps(&ep, &PicardOptions::default()).unwrap();
    for n in 0..times.len() {
        for i in 0..grid.len() {
            assert!((a.u_tilde[n][i] - b.u_tilde[n][i]).abs() <= 1e-12);
            assert!((a.m[n][i] - b.m[n][i]).abs() <= 1e-12);
        }
    }
}

/// Sup deviation in `u` and L1 deviation in `m` at the final and initial times, on coarse nodes.
fn deviation(coarse: &MFGSolution, fine: &MFGSolution) -> (f64, f64) {
    let stride = fine.grid.len() / coarse.grid.len();
    let (nc, nf) = (coarse.times.steps, fine.times.steps);
    let mut du: f64 = 0.0;
    let mut dm = 0.0;
    for i in 0..coarse.grid.len() {
        du = du.max((coarse.u_tilde[nc][i] - fine.u_tilde[nf][i * stride]).abs());
        dm += (coarse.m[0][i] - fine.m[0][i * stride]).abs() / coarse.grid.len() as f64;
    }
    (du, dm)
}

#[test]
fn refinement_halves_the_deviation_from_a_fine_reference() {
    let t = weighted_table();
    let run = |n: usize, k: usize| solve(&problem(&t, n, 0.05, 0.2, k));
    let reference = run(512, 8);
    let (u1, m1) = deviation(&run(64, 1), &reference);
    let (u2, m2) = deviation(&run(128, 2), &reference);
    assert!(u1 / u2 >= 1.8, "u {u1} -> {u2}");
    assert!(m1 / m2 >= 1.8, "m {m1} -> {m2}");
}

#[test]
fn residual_check_detects_corruption() {
    let t = weighted_table();
    let prob = problem(&t, 64, 0.05, 0.2, 1);
    let sol = solve(&prob);
    let clean = residual_check(&sol, &prob).unwrap();
    assert!(clean.hj_residual <= 10.0 * PicardOptions::default().tol, "{clean:?}");
    assert!(clean.transport_residual <= 10.0 * PicardOptions::default().tol, "{clean:?}");
    let mut bad = sol.clone();
    for u in &mut bad.u_tilde {
        for (i, v) in u.iter_mut().enumerate() {
            *v += 1e-3 * (2.0 * PI * i as f64 / 64.0).sin();
        }
    }
    let r = residual_check(&bad, &prob).unwrap();
    assert!(r.hj_residual >= clean.hj_residual + 1e-4, "{r:?}");
}

#[test]
fn mass_and_positivity_are_preserved() {
    let t = weighted_table();
    let sol = solve(&problem(&t, 64, 0.05, 0.9, 1));
    assert!(mass_defect(&sol) <= 1e-10);
    assert!(sol.m.iter().flatten().all(|&m| m >= 0.0));
}

#[test]
fn leaving_the_table_hull_is_an_error() {
    let t = table(HamiltonianModel::WeightedQuadratic { amplitude: 1.0 }, 0.95, 1.05, 11);
    let prob = problem(&t, 64, 0.1, 0.0, 1);
    assert!(matches!(solve_limit(&prob, &PicardOptions::default()), Err(Error::OutOfRange { .. })));
}

#[test]
fn too_large_a_step_is_rejected() {
    let t = weighted_table();
    let mut prob = problem(&t, 64, 0.05, 0.2, 1);
    prob.times = TimeGrid::new(0.25, prob.times.steps / 2).unwrap();
    assert!(matches!(solve_limit(&prob, &PicardOptions::default()), Err(Error::CflViolated { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ordered_initial_values_stay_ordered(a in -0.05f64..0.05, d in 0.0f64..0.01, phase in 0.0f64..1.0, shift in 0.0f64..0.05) {
        let t = weighted_table();
        let lower = problem(&t, 32, a, 0.0, 1);
        let mut upper = lower.clone();
        let raised: Vec<f64> = lower.u0.values().iter().enumerate()
            .map(|(i, u)| u + shift + d * (1.0 + (2.0 * PI * (i as f64 / 32.0 + phase)).sin()))
            .collect();
        upper.u0 = ScalarField::new(*lower.u0.grid(), raised).unwrap();
        let (s1, s2) = (solve(&lower), solve(&upper));
        for (u1, u2) in s1.u_tilde.iter().zip(&s2.u_tilde) {
            for (x, y) in u1.iter().zip(u2) {
                prop_assert!(*x <= y + 1e-12);
            }
        }
    }
}
