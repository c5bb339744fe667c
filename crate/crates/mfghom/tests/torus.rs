use std::f64::consts::PI;

use mfghom::torus::{
    advect, advect_adjoint, divergence, gradient, inner, integrate, laplacian, tree_sum, DivScheme, GradScheme,
    ScalarField, TorusGrid, VectorField,
};
use mfghom::Error;
use proptest::prelude::*;

fn sine(n: usize) -> ScalarField {
    ScalarField::from_fn(TorusGrid::unit(1, n).unwrap(), |y| (2.0 * PI * y[0]).sin()).unwrap()
}

fn max_err(a: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    a.iter().enumerate().fold(0.0, |e, (i, v)| e.max((v - f(i)).abs()))
}

fn slope(n: &[usize], e: &[f64]) -> f64 {
    let x: Vec<f64> = n.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let y: Vec<f64> = e.iter().map(|e| e.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / x.len() as f64, y.iter().sum::<f64>() / y.len() as f64);
    let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

#[test]
fn grid_layout() {
    let g = TorusGrid::new(2, 3, 8).unwrap();
    assert_eq!(g.len(), 24 * 24);
    assert_eq!(g.h(), 0.125);
    assert_eq!(g.side(), 3.0);
    let i = g.flat([23, 5]);
    assert_eq!(g.multi(g.shift(i, 0, 1)), [0, 5]);
    assert_eq!(g.multi(g.shift(i, 1, -6)), [23, 23]);
    assert!(matches!(TorusGrid::new(3, 1, 8), Err(Error::InvalidGrid(_))));
    assert!(TorusGrid::new(1, 0, 8).is_err());
    assert!(TorusGrid::new(1, 1, 0).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let g = TorusGrid::unit(1, 4).unwrap();
    assert!(matches!(ScalarField::new(g, vec![0.0, f64::NAN, 0.0, 0.0]), Err(Error::NonFinite { .. })));
    assert!(ScalarField::new(g, vec![0.0; 3]).is_err());
    assert!(VectorField::new(g, vec![vec![0.0; 4], vec![0.0; 4]]).is_err());
}

#[test]
fn constants_have_zero_derivatives() {
    for dim in [1, 2] {
        let g = TorusGrid::new(dim, 2, 8).unwrap();
        let c = ScalarField::constant(g, 3.7);
        let gr = gradient(&c, GradScheme::Centered).unwrap();
        assert!(gr.components().iter().flatten().all(|&v| v == 0.0));
        let dir = VectorField::constant(g, [1.0, -1.0]);
        let up = gradient(&c, GradScheme::Upwind(Some(&dir))).unwrap();
        assert!(up.components().iter().flatten().all(|&v| v == 0.0));
        assert!(laplacian(&c).values().iter().all(|&v| v == 0.0));
        let v = VectorField::constant(g, [0.3, -2.0]);
        for s in [DivScheme::Centered, DivScheme::UpwindAdjoint] {
            assert!(divergence(&v, s).values().iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn upwind_without_direction_is_a_scheme_mismatch() {
    assert!(matches!(gradient(&sine(8), GradScheme::Upwind(None)), Err(Error::SchemeMismatch)));
}

#[test]
fn centered_gradient_taylor_bound() {
    let n = 64;
    let f = sine(n);
    let h = 1.0 / n as f64;
    let g = gradient(&f, GradScheme::Centered).unwrap();
    let e = max_err(g.component(0), |i| 2.0 * PI * (2.0 * PI * i as f64 * h).cos());
    assert!(e <= (2.0 * PI).powi(3) * h * h / 6.0, "{e}");
}

#[test]
fn laplacian_taylor_bound() {
    let n = 64;
    let h = 1.0 / n as f64;
    let f = ScalarField::from_fn(TorusGrid::unit(1, n).unwrap(), |y| (2.0 * PI * y[0]).cos()).unwrap();
    let l = laplacian(&f);
    let e = max_err(l.values(), |i| -(2.0 * PI).powi(2) * (2.0 * PI * i as f64 * h).cos());
    assert!(e <= (2.0 * PI).powi(4) * h * h / 12.0, "{e}");
}

#[test]
fn orders_of_accuracy() {
    let ns = [32, 64, 128, 256];
    let (mut ec, mut eu) = (vec![], vec![]);
    for &n in &ns {
        let f = sine(n);
        let h = 1.0 / n as f64;
        let exact = |i: usize| 2.0 * PI * (2.0 * PI * i as f64 * h).cos();
        ec.push(max_err(gradient(&f, GradScheme::Centered).unwrap().component(0), exact));
        let dir = VectorField::constant(*f.grid(), [1.0, 0.0]);
        eu.push(max_err(gradient(&f, GradScheme::Upwind(Some(&dir))).unwrap().component(0), exact));
    }
    let (sc, su) = (slope(&ns, &ec), slope(&ns, &eu));
    assert!((sc - 2.0).abs() <= 0.1, "centered slope {sc}");
    assert!((su - 1.0).abs() <= 0.1, "upwind slope {su}");
}

#[test]
fn centered_divergence_of_sine_flux() {
    let n = 128;
    let h = 1.0 / n as f64;
    let grid = TorusGrid::unit(1, n).unwrap();
    let v = VectorField::new(grid, vec![sine(n).into_values()]).unwrap();
    let d = divergence(&v, DivScheme::Centered);
    let e = max_err(d.values(), |i| 2.0 * PI * (2.0 * PI * i as f64 * h).cos());
    assert!(e <= (2.0 * PI).powi(3) * h * h / 6.0, "{e}");
}

#[test]
fn trapezoid_quadrature_is_exact_on_trig() {
    let g = TorusGrid::unit(1, 8).unwrap();
    assert_eq!(integrate(&ScalarField::constant(g, 1.0)), 1.0);
    let c = ScalarField::from_fn(TorusGrid::unit(1, 4).unwrap(), |y| (2.0 * PI * y[0]).cos()).unwrap();
    assert!(integrate(&c).abs() < 1e-15);
    let c2 = ScalarField::from_fn(g, |y| (2.0 * PI * y[0]).cos().powi(2)).unwrap();
    assert!((integrate(&c2) - 0.5).abs() < 1e-15);
}

#[test]
fn tree_sum_is_order_fixed() {
    let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
    assert_eq!(tree_sum(&v).to_bits(), tree_sum(&v.clone()).to_bits());
    assert!((tree_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-12);
}

fn field_strategy(dim: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    let len = if dim == 1 { n } else { n * n };
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #[test]
    fn laplacian_sums_to_zero(dim in 1usize..=2, vals in field_strategy(2, 8)) {
        let g = TorusGrid::unit(dim, 8).unwrap();
        let f = ScalarField::new(g, vals[..g.len()].to_vec()).unwrap();
        let s = tree_sum(laplacian(&f).values());
        prop_assert!(s.abs() <= 1e-9, "{}", s);
    }

    #[test]
    fn divergence_sums_to_zero(dim in 1usize..=2, a in field_strategy(2, 8), b in field_strategy(2, 8), upwind in any::<bool>()) {
        let g = TorusGrid::unit(dim, 8).unwrap();
        let comps = if dim == 1 { vec![a[..8].to_vec()] } else { vec![a.clone(), b.clone()] };
        let v = VectorField::new(g, comps).unwrap();
        let s = if upwind { DivScheme::UpwindAdjoint } else { DivScheme::Centered };
        let total = tree_sum(divergence(&v, s).values());
        prop_assert!(total.abs() <= 1e-9, "{}", total);
    }

    #[test]
    fn advection_adjointness(dim in 1usize..=2, b0 in field_strategy(2, 8), b1 in field_strategy(2, 8), f in field_strategy(2, 8), g in field_strategy(2, 8)) {
        let grid = TorusGrid::unit(dim, 8).unwrap();
        let n = grid.len();
        let comps = if dim == 1 { vec![b0[..n].to_vec()] } else { vec![b0.clone(), b1.clone()] };
        let b = VectorField::new(grid, comps).unwrap();
        let f = ScalarField::new(grid, f[..n].to_vec()).unwrap();
        let g = ScalarField::new(grid, g[..n].to_vec()).unwrap();
        let lhs = inner(&grid, advect(&b, &f).values(), g.values());
        let rhs = inner(&grid, f.values(), advect_adjoint(&b, &g).values());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn upwind_divergence_is_minus_adjoint_for_nonnegative_density(b in field_strategy(1, 16), m in prop::collection::vec(0.0f64..5.0, 16)) {
        let grid = TorusGrid::unit(1, 16).unwrap();
        let bf = VectorField::new(grid, vec![b.clone()]).unwrap();
        let flux = VectorField::new(grid, vec![b.iter().zip(&m).map(|(x, y)| x * y).collect()]).unwrap();
        let d = divergence(&flux, DivScheme::UpwindAdjoint);
        let a = advect_adjoint(&bf, &ScalarField::new(grid, m).unwrap());
        for (x, y) in d.values().iter().zip(a.values()) {
            prop_assert!((x + y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }
}
