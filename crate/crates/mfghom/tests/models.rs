use std::f64::consts::PI;

use mfghom::models::{
    check_convexity, check_lip_condition, check_monotonicity, hessian_min_eig, lip_value, monotonicity_integral,
    trial_density, CouplingModel, Hamiltonian, HamiltonianModel, LocalLaw, Potential, Vec2, Witness,
};
use mfghom::torus::{integrate_values, TorusGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn catalog() -> Vec<HamiltonianModel> {
    vec![
        HamiltonianModel::Quadratic,
        HamiltonianModel::QuadraticPlusPotential { amplitude: 0.7, potential: Potential::Cos },
        HamiltonianModel::QuadraticPlusPotential { amplitude: -0.4, potential: Potential::CosSin },
        HamiltonianModel::WeightedQuadratic { amplitude: 1.0 },
        HamiltonianModel::WeightedQuadratic { amplitude: -1.5 },
    ]
}

fn local_linear(strength: f64, amplitude: f64) -> CouplingModel {
    CouplingModel::Local(LocalLaw::Linear { strength, amplitude })
}

struct Concave;

impl Hamiltonian for Concave {
    fn value(&self, p: Vec2, _y: Vec2) -> f64 {
        -0.5 * (p[0] * p[0] + p[1] * p[1])
    }
    fn dp(&self, p: Vec2, _y: Vec2) -> Vec2 {
        [-p[0], -p[1]]
    }
    fn dy(&self, _p: Vec2, _y: Vec2) -> Vec2 {
        [0.0, 0.0]
    }
    fn hessian_lower_bound(&self) -> f64 {
        -1.0
    }
}

fn witness_point(w: &Witness) -> (Vec2, Vec2) {
    match w {
        Witness::Point { p, y } => (*p, *y),
        other => panic!("unexpected witness {other:?}"),
    }
}

#[test]
fn convexity_of_quadratic() {
    let r = check_convexity(&HamiltonianModel::Quadratic, 1, 2.0, 9).unwrap();
    assert!(r.passed);
    assert!((r.worst_value - 1.0).abs() <= 1e-6, "{}", r.worst_value);
}

#[test]
fn convexity_of_weighted_quadratic_attains_analytic_minimum() {
    let h = HamiltonianModel::WeightedQuadratic { amplitude: 1.0 };
    let r = check_convexity(&h, 1, 2.0, 16).unwrap();
    assert!(r.passed);
    assert!((r.worst_value - 0.5).abs() <= 1e-6, "{}", r.worst_value);
    let (p, y) = witness_point(&r.witness);
    assert!((y[0] - 0.5).abs() < 1e-12);
    assert_eq!(hessian_min_eig(&h, 1, p, y), r.worst_value);
}

#[test]
fn convexity_violation_is_detected() {
    let r = check_convexity(&Concave, 2, 1.0, 5).unwrap();
    assert!(!r.passed);
    assert!((r.worst_value + 1.0).abs() <= 1e-6);
    let (p, y) = witness_point(&r.witness);
    assert_eq!(hessian_min_eig(&Concave, 2, p, y), r.worst_value);
}

#[test]
fn catalog_is_convex_on_large_box() {
    for h in catalog() {
        for dim in [1, 2] {
            let r = check_convexity(&h, dim, 10.0, 7).unwrap();
            assert!(r.passed, "{h:?} dim {dim}: {}", r.worst_value);
            assert!(r.worst_value >= h.hessian_lower_bound() - 1e-6);
        }
    }
}

#[test]
fn convexity_rejects_bad_sampling() {
    assert!(check_convexity(&HamiltonianModel::Quadratic, 1, 0.0, 4).is_err());
    assert!(check_convexity(&HamiltonianModel::Quadratic, 1, 1.0, 0).is_err());
}

fn pair(w: &Witness, grid: &TorusGrid) -> (Vec<f64>, Vec<f64>) {
    match w {
        Witness::TrialPair { f1, f2, .. } => (trial_density(f1, grid), trial_density(f2, grid)),
        other => panic!("unexpected witness {other:?}"),
    }
}

#[test]
fn identity_coupling_integral_is_a_square() {
    let f = local_linear(1.0, 0.0);
    let r = check_monotonicity(&f, 1, 10, 3).unwrap();
    assert!(r.passed);
    let grid = TorusGrid::unit(1, 64).unwrap();
    let (a, b) = pair(&r.witness, &grid);
    let sq: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    let direct = integrate_values(&grid, &sq);
    assert!((direct - r.worst_value).abs() <= 1e-12 * (1.0 + direct));
    assert_eq!(monotonicity_integral(&f, &grid, &a, &b), r.worst_value);
}

#[test]
fn sign_flipped_coupling_fails_with_witness() {
    let f = local_linear(-1.0, 0.0);
    let r = check_monotonicity(&f, 2, 5, 11).unwrap();
    assert!(!r.passed);
    assert!(r.worst_value < 0.0);
    let grid = TorusGrid::unit(2, 64).unwrap();
    let (a, b) = pair(&r.witness, &grid);
    assert_eq!(monotonicity_integral(&f, &grid, &a, &b), r.worst_value);
}

/// `sum_k rho_hat(k) |c_k|^2` with a naive DFT.
fn fourier_quadratic_form(delta: &[f64], sigma: f64) -> f64 {
    let n = delta.len();
    let mut s = 0.0;
    for k in 0..n {
        let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        let (mut re, mut im) = (0.0, 0.0);
        for (j, d) in delta.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * j as f64 / n as f64;
            re += d * a.cos();
            im += d * a.sin();
        }
        let c2 = (re * re + im * im) / (n * n) as f64;
        s += (-2.0 * PI * PI * sigma * sigma * kk * kk).exp() * c2;
    }
    s
}

#[test]
fn gaussian_kernel_monotonicity_matches_fourier_sum() {
    let sigma = 0.15;
    let f = CouplingModel::Nonlocal { sigma, strength: 1.0 };
    let r = check_monotonicity(&f, 1, 8, 5).unwrap();
    assert!(r.passed);
    let grid = TorusGrid::unit(1, 64).unwrap();
    let (a, b) = pair(&r.witness, &grid);
    let delta: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let oracle = fourier_quadratic_form(&delta, sigma);
    assert!(oracle >= 0.0);
    assert!((oracle - r.worst_value).abs() <= 1e-12 * (1.0 + oracle), "{oracle} vs {}", r.worst_value);
}

#[test]
fn gaussian_kernel_is_a_probability_density() {
    for (dim, side) in [(1, 1), (1, 3), (2, 2)] {
        let grid = TorusGrid::new(dim, side, 32).unwrap();
        let k = CouplingModel::kernel_values(&grid, 0.2);
        assert!(k.iter().all(|&v| v >= 0.0));
        assert!((integrate_values(&grid, &k) - 1.0).abs() < 1e-10);
    }
}

#[test]
fn convolution_damps_fourier_modes() {
    let side = 2;
    let sigma = 0.3;
    let grid = TorusGrid::new(1, side, 32).unwrap();
    let m: Vec<f64> = (0..grid.len()).map(|i| 1.0 + (2.0 * PI * grid.coords(i)[0] / side as f64).cos()).collect();
    let c = CouplingModel::convolve(&grid, sigma, &m);
    let damp = (-2.0 * PI * PI * sigma * sigma / (side * side) as f64).exp();
    for (i, v) in c.iter().enumerate() {
        let exact = 1.0 + damp * (2.0 * PI * grid.coords(i)[0] / side as f64).cos();
        assert!((v - exact).abs() < 1e-12);
    }
}

#[test]
fn lip_condition_flat_case() {
    let (theta, pr) = (0.5, 2.0);
    let r = check_lip_condition(&HamiltonianModel::Quadratic, &CouplingModel::None, 1, theta, pr, 0.1, 16).unwrap();
    assert!(r.passed);
    assert!((r.worst_value - theta * (0.5 * pr * pr).powi(2)).abs() < 1e-12);
}

fn dense_lip_oracle(h: &HamiltonianModel, theta: f64, pr: f64, samples: usize) -> f64 {
    let mut worst = f64::INFINITY;
    for s in [pr, -pr] {
        for j in 0..samples {
            let y = [j as f64 / samples as f64, 0.0];
            let p2 = s * s;
            let hv = 0.5 * p2 + (2.0 * PI * y[0]).cos();
            let dy = -2.0 * PI * (2.0 * PI * y[0]).sin();
            worst = worst.min(theta * hv * hv + dy * s);
            assert!((lip_value(h, &CouplingModel::None, theta, 0.1, [s, 0.0], y) - (theta * hv * hv + dy * s)).abs() < 1e-12);
        }
    }
    worst
}

#[test]
fn lip_condition_with_potential_matches_dense_oracle() {
    let h = HamiltonianModel::QuadraticPlusPotential { amplitude: 1.0, potential: Potential::Cos };
    let (theta, pr) = (0.5, 3.0);
    let r = check_lip_condition(&h, &CouplingModel::None, 1, theta, pr, 0.1, 64).unwrap();
    let oracle = dense_lip_oracle(&h, theta, pr, 640);
    assert!(r.worst_value >= oracle - 1e-12);
    assert!((r.worst_value - oracle).abs() <= 0.02 * oracle.abs().max(1.0), "{} vs {oracle}", r.worst_value);
    assert_eq!(r.passed, oracle > 0.0);
}

#[test]
fn lip_condition_fails_for_small_theta_and_radius() {
    let h = HamiltonianModel::QuadraticPlusPotential { amplitude: 1.0, potential: Potential::Cos };
    let (theta, pr) = (0.01, 1.0);
    let r = check_lip_condition(&h, &CouplingModel::None, 1, theta, pr, 0.1, 64).unwrap();
    assert!(!r.passed);
    assert!(dense_lip_oracle(&h, theta, pr, 640) < 0.0);
    let (p, y) = witness_point(&r.witness);
    assert_eq!(lip_value(&h, &CouplingModel::None, theta, 0.1, p, y), r.worst_value);
}

#[test]
fn lip_condition_rejects_bad_theta() {
    let h = HamiltonianModel::Quadratic;
    assert!(check_lip_condition(&h, &CouplingModel::None, 1, 1.0, 1.0, 0.1, 4).is_err());
    assert!(check_lip_condition(&h, &CouplingModel::None, 1, 0.5, 0.0, 0.1, 4).is_err());
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d = 1e-4;
    for h in catalog() {
        for _ in 0..100 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let dp = h.dp(p, y);
            let dy = h.dy(p, y);
            for k in 0..2 {
                let mut a = p;
                let mut b = p;
                a[k] += d;
                b[k] -= d;
                let fd = (h.value(a, y) - h.value(b, y)) / (2.0 * d);
                assert!((fd - dp[k]).abs() <= 1e-6 * dp[k].abs().max(1.0), "{h:?} dp");
                let mut a = y;
                let mut b = y;
                a[k] += d;
                b[k] -= d;
                let fd = (h.value(p, a) - h.value(p, b)) / (2.0 * d);
                assert!((fd - dy[k]).abs() <= 1e-6 * dy[k].abs().max(1.0), "{h:?} dy");
            }
        }
    }
}

#[test]
fn primitives_differentiate_to_the_coupling() {
    let laws = [
        local_linear(1.3, 0.5),
        CouplingModel::Local(LocalLaw::Power { strength: 0.8, amplitude: -1.0, exponent: 2.5 }),
        CouplingModel::Local(LocalLaw::Power { strength: 1.0, amplitude: 0.3, exponent: 0.5 }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 1e-4;
    for f in &laws {
        assert!(f.has_primitive());
        for _ in 0..100 {
            let y = [rng.random_range(0.0..1.0), 0.0];
            let m = rng.random_range(0.2..3.0);
            let fd = (f.primitive(y, m + d).unwrap() - f.primitive(y, m - d).unwrap()) / (2.0 * d);
            assert!((fd - f.local(y, m)).abs() <= 1e-6, "{f:?}");
            let fdm = (f.local(y, m + d) - f.local(y, m - d)) / (2.0 * d);
            assert!((fdm - f.local_dm(y, m)).abs() <= 1e-6 * f.local_dm(y, m).abs().max(1.0));
        }
    }
    assert!(!CouplingModel::Nonlocal { sigma: 0.1, strength: 1.0 }.has_primitive());
}

#[test]
fn conjugate_is_the_legendre_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for h in catalog() {
        for _ in 0..20 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let y = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let a = h.dp(p, y);
            let fenchel = a[0] * p[0] + a[1] * p[1] - h.value(p, y);
            assert!((h.conjugate(a, y) - fenchel).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_models_are_rejected() {
    assert!(HamiltonianModel::WeightedQuadratic { amplitude: 2.0 }.validate().is_err());
    assert!(CouplingModel::Nonlocal { sigma: 0.0, strength: 1.0 }.validate().is_err());
    assert!(CouplingModel::Local(LocalLaw::Power { strength: 1.0, amplitude: 0.0, exponent: 0.0 }).validate().is_err());
}

#[test]
fn models_serialize_as_tagged_sections() {
    let f = local_linear(1.0, 0.5);
    let v = serde_json::to_value(&f).unwrap();
    assert_eq!(v["variant"], "local");
    assert_eq!(v["law"], "linear");
    let back: CouplingModel = serde_json::from_value(v).unwrap();
    assert_eq!(back, f);
    let h = HamiltonianModel::QuadraticPlusPotential { amplitude: 0.5, potential: Potential::CosSin };
    let t = toml::to_string(&h).unwrap();
    assert_eq!(toml::from_str::<HamiltonianModel>(&t).unwrap(), h);
}

proptest! {
    #[test]
    fn hamiltonians_are_periodic_in_y(k in 0usize..5, p0 in -5.0f64..5.0, p1 in -5.0f64..5.0, y0 in 0.0f64..1.0, y1 in 0.0f64..1.0, s0 in -3i32..3, s1 in -3i32..3) {
        let h = &catalog()[k];
        let p = [p0, p1];
        let shifted = [y0 + s0 as f64, y1 + s1 as f64];
        prop_assert!((h.value(p, [y0, y1]) - h.value(p, shifted)).abs() <= 1e-10);
    }

    #[test]
    fn hessian_bound_holds(k in 0usize..5, p0 in -10.0f64..10.0, p1 in -10.0f64..10.0, y0 in 0.0f64..1.0, y1 in 0.0f64..1.0) {
        let h = &catalog()[k];
        prop_assert!(h.hessian_lower_bound() > 0.0);
        prop_assert!(hessian_min_eig(h, 2, [p0, p1], [y0, y1]) >= h.hessian_lower_bound() - 1e-5);
    }

    #[test]
    fn local_couplings_are_periodic(strength in 0.1f64..3.0, amp in -1.9f64..1.9, y in 0.0f64..1.0, m in 0.0f64..4.0) {
        let f = local_linear(strength, amp);
        prop_assert!((f.local([y, 0.0], m) - f.local([y + 1.0, 0.0], m)).abs() <= 1e-10);
    }
}
