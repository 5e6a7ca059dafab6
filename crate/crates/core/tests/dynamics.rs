mod common;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use shooting_sqp::bench::{make_benchmark, rotation_blocks, Benchmark1, Benchmark3, BenchmarkId};
use shooting_sqp::dynamics::{
    flow, flow_time_derivative, flow_with_sensitivity, mat_exp, SensitivityMethod, Tolerances,
};
use shooting_sqp::{LinearField, VectorField};

fn oscillator() -> LinearField {
    LinearField::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap()
}

fn rotation(t: f64) -> DMatrix<f64> {
    let (s, c) = t.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
}

#[test]
fn oscillator_half_turn() {
    let r = flow(&oscillator(), &DVector::from_vec(vec![1.0, 0.0]), PI, Tolerances::default()).unwrap();
    assert!((r.endpoint - DVector::from_vec(vec![-1.0, 0.0])).amax() < 1e-8);
}

#[test]
fn zero_time_is_identity() {
    let x0 = DVector::from_vec(vec![0.3, -2.0, 7.5]);
    let r = flow_with_sensitivity(&Benchmark1, &x0, 0.0, SensitivityMethod::Variational, Tolerances::default())
        .unwrap();
    assert_eq!(r.endpoint, x0);
    assert_eq!(r.sensitivity.unwrap(), DMatrix::identity(3, 3));
}

#[test]
fn benchmark1_against_tight_reference() {
    let x0 = DVector::from_element(3, 1.0);
    let tol = Tolerances::default();
    let tight = Tolerances::new(tol.abs_tol * 1e-4, tol.rel_tol * 1e-4);
    let a = flow(&Benchmark1, &x0, 5.0, tol).unwrap().endpoint;
    let b = flow(&Benchmark1, &x0, 5.0, tight).unwrap().endpoint;
    assert!((a - b).amax() < 1e-6);
}

#[test]
fn benchmark1_against_rk4() {
    let x0 = DVector::from_element(3, 1.0);
    let a = flow(&Benchmark1, &x0, 5.0, Tolerances::default()).unwrap().endpoint;
    let b = common::rk4(&Benchmark1, &x0, 5.0, 20_000);
    assert!((a - b).amax() < 1e-6);
}

#[test]
fn oscillator_sensitivity_is_rotation() {
    for method in [SensitivityMethod::Variational, SensitivityMethod::FiniteDifference] {
        for &t in &[0.1, 1.0, 2.5, 4.0] {
            let r = flow_with_sensitivity(&oscillator(), &DVector::from_vec(vec![0.4, -1.3]), t, method, Tolerances::default())
                .unwrap();
            assert!((r.sensitivity.unwrap() - rotation(t)).amax() < 1e-7, "{method:?} t={t}");
        }
    }
}

#[test]
fn benchmark1_sensitivity_methods_agree() {
    let x0 = DVector::from_element(3, 1.0);
    let tol = Tolerances::default();
    let v = flow_with_sensitivity(&Benchmark1, &x0, 0.5, SensitivityMethod::Variational, tol).unwrap();
    let f = flow_with_sensitivity(&Benchmark1, &x0, 0.5, SensitivityMethod::FiniteDifference, tol).unwrap();
    assert!((v.sensitivity.unwrap() - f.sensitivity.unwrap()).amax() < 1e-5);
}

#[test]
fn time_derivative_is_field_value() {
    let ho = oscillator();
    assert_eq!(flow_time_derivative(&ho, &DVector::from_vec(vec![1.0, 0.0])).as_slice(), &[0.0, -1.0]);
    let x = DVector::from_element(3, 1.0);
    assert_eq!(flow_time_derivative(&Benchmark1, &x).as_slice(), &[0.0, 2.0, -2.0]);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let lf = LinearField::new(a.clone()).unwrap();
    let y = DVector::from_vec(vec![0.5, -1.0]);
    assert_eq!(flow_time_derivative(&lf, &y), a * y);
}

#[test]
fn mat_exp_examples() {
    assert_eq!(mat_exp(&DMatrix::zeros(3, 3), 1.7), DMatrix::identity(3, 3));
    let gen = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    for &t in &[0.0, 0.3, 2.0, 10.0] {
        assert!((mat_exp(&gen, t) - rotation(t)).amax() < 1e-12);
    }
}

#[test]
fn benchmark_jacobians_match_central_differences() {
    let fields = [
        make_benchmark(BenchmarkId::b1()).unwrap(),
        make_benchmark(BenchmarkId::b2(6).unwrap()).unwrap(),
        make_benchmark(BenchmarkId::b3(6).unwrap()).unwrap(),
    ];
    let mut r = common::rng(3);
    for f in &fields {
        let x = common::random_vector(&mut r, f.dim()) * 2.0;
        let j = f.jacobian(&x);
        for k in 0..f.dim() {
            let mut e = DVector::zeros(f.dim());
            e[k] = 1e-6;
            let col = (f.eval(&(&x + &e)) - f.eval(&(&x - &e))) / 2e-6;
            assert!((j.column(k) - col).amax() < 1e-8);
        }
    }
}

fn semigroup_gap(vf: &dyn VectorField, x0: &DVector<f64>, s: f64, t: f64) -> f64 {
    let tol = Tolerances::default();
    let mid = flow(vf, x0, s, tol).unwrap().endpoint;
    let two = flow(vf, &mid, t, tol).unwrap().endpoint;
    let one = flow(vf, x0, s + t, tol).unwrap().endpoint;
    (two - one).norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn semigroup_benchmark2(s in 0.0..5.0f64, t in 0.0..5.0f64, x in prop::collection::vec(-2.0..2.0f64, 4)) {
        let vf = LinearField::new(rotation_blocks(4)).unwrap();
        prop_assert!(semigroup_gap(&vf, &DVector::from_vec(x), s, t) <= 1e-6);
    }

    #[test]
    fn semigroup_benchmark3(s in 0.0..5.0f64, t in 0.0..5.0f64, x in prop::collection::vec(-2.0..2.0f64, 4)) {
        let vf = Benchmark3::new(4).unwrap();
        prop_assert!(semigroup_gap(&vf, &DVector::from_vec(x), s, t) <= 1e-6);
    }

    #[test]
    fn semigroup_benchmark1(s in 0.0..2.5f64, t in 0.0..2.5f64, x in prop::collection::vec(0.5..1.2f64, 3)) {
        // The standard instance's neighbourhood; far from it the field blows up before t = 5.
        prop_assert!(semigroup_gap(&Benchmark1, &DVector::from_vec(x), s, t) <= 1e-6);
    }

    #[test]
    fn linear_sensitivity_is_matrix_exponential(t in 0.0..5.0f64, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let a = common::random_matrix(&mut r, 3, 3);
        let vf = LinearField::new(a.clone()).unwrap();
        let x0 = common::random_vector(&mut r, 3);
        let res = flow_with_sensitivity(&vf, &x0, t, SensitivityMethod::Variational, Tolerances::default()).unwrap();
        let e = mat_exp(&a, t);
        let scale = e.amax().max(1.0);
        prop_assert!((res.sensitivity.unwrap() - e).amax() <= 1e-7 * scale);
    }

    #[test]
    fn variational_matches_central_differences(which in 0usize..3, t in 0.05..1.0f64, seed in 0u64..1000) {
        let field = match which {
            0 => make_benchmark(BenchmarkId::b1()).unwrap(),
            1 => make_benchmark(BenchmarkId::b2(10).unwrap()).unwrap(),
            _ => make_benchmark(BenchmarkId::b3(10).unwrap()).unwrap(),
        };
        let n = field.dim();
        let mut r = common::rng(seed);
        let x0 = DVector::from_element(n, 1.0) + common::random_vector(&mut r, n) * 0.3;
        let tol = Tolerances::new(1e-13, 1e-12);
        let s = flow_with_sensitivity(field.as_ref(), &x0, t, SensitivityMethod::Variational, Tolerances::default())
            .unwrap()
            .sensitivity
            .unwrap();
        let mut fd = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * x0[k].abs().max(1.0);
            let mut e = DVector::zeros(n);
            e[k] = h;
            let p = flow(field.as_ref(), &(&x0 + &e), t, tol).unwrap().endpoint;
            let m = flow(field.as_ref(), &(&x0 - &e), t, tol).unwrap().endpoint;
            fd.column_mut(k).copy_from(&((p - m) / (2.0 * h)));
        }
        prop_assert!(common::rel_err(&s, &fd) <= 1e-4);
    }
}
