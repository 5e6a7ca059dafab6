//! Independent oracles for the integration tests.
//!
//! Flows here come from a fixed-step classical RK4 with a step count that does not depend
//! on the horizon, so every oracle is a smooth function of `χ` and finite differences of it
//! are clean. None of this touches the crate's integrator or its Jacobian assembly.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use shooting_sqp::bench::{benchmark_instance, BenchmarkId, Instance};
use shooting_sqp::linalg::BlockDiagHessian;
use shooting_sqp::problem::StructuredJacobian;
use shooting_sqp::{Multipliers, Problem, ShootingVector, VectorField};

pub const RK_STEPS: usize = 1000;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn rk4(field: &dyn VectorField, x0: &DVector<f64>, t: f64, steps: usize) -> DVector<f64> {
    let h = t / steps as f64;
    let mut x = x0.clone();
    for _ in 0..steps {
        let k1 = field.eval(&x);
        let k2 = field.eval(&(&x + &k1 * (h / 2.0)));
        let k3 = field.eval(&(&x + &k2 * (h / 2.0)));
        let k4 = field.eval(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// RK4 on the augmented system `ẋ = f(x)`, `Ṡ = J(x) S`, `S(0) = I`.
pub fn rk4_sensitivity(
    field: &dyn VectorField,
    x0: &DVector<f64>,
    t: f64,
    steps: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x0.len();
    let h = t / steps as f64;
    let rhs = |x: &DVector<f64>, s: &DMatrix<f64>| (field.eval(x), field.jacobian(x) * s);
    let mut x = x0.clone();
    let mut s = DMatrix::identity(n, n);
    for _ in 0..steps {
        let (a1, b1) = rhs(&x, &s);
        let (a2, b2) = rhs(&(&x + &a1 * (h / 2.0)), &(&s + &b1 * (h / 2.0)));
        let (a3, b3) = rhs(&(&x + &a2 * (h / 2.0)), &(&s + &b2 * (h / 2.0)));
        let (a4, b4) = rhs(&(&x + &a3 * h), &(&s + &b3 * h));
        x += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        s += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
    }
    (x, s)
}

fn states(chi: &ShootingVector) -> Vec<(DVector<f64>, f64)> {
    (0..chi.segments()).map(|i| (chi.state_owned(i), chi.duration(i))).collect()
}

fn ellipsoid_sq(c: &DVector<f64>, e: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let d = v - c;
    (d.transpose() * e * &d)[(0, 0)]
}

/// `c(χ)` written out from scratch.
pub fn oracle_constraints(p: &Problem, chi: &ShootingVector) -> DVector<f64> {
    let n = chi.n();
    let seg = states(chi);
    let big_n = seg.len();
    let mut out = Vec::with_capacity((big_n - 1) * n + 2);
    out.push(0.5 * (ellipsoid_sq(&p.init.center, &p.init.shape, &seg[0].0) - 1.0));
    for i in 0..big_n - 1 {
        let end = rk4(p.field.as_ref(), &seg[i].0, seg[i].1, RK_STEPS);
        out.extend((&seg[i + 1].0 - end).iter());
    }
    let last = rk4(p.field.as_ref(), &seg[big_n - 1].0, seg[big_n - 1].1, RK_STEPS);
    out.push(0.5 * (ellipsoid_sq(&p.unsafe_set.center, &p.unsafe_set.shape, &last) - 1.0));
    DVector::from_vec(out)
}

pub fn oracle_objective(chi: &ShootingVector) -> f64 {
    0.5 * chi.durations().iter().map(|t| t * t).sum::<f64>()
}

pub fn oracle_lagrangian(p: &Problem, chi: &ShootingVector, lambda: &DVector<f64>) -> f64 {
    oracle_objective(chi) + lambda.dot(&oracle_constraints(p, chi))
}

fn perturbed(chi: &ShootingVector, k: usize, delta: f64) -> ShootingVector {
    let mut flat = chi.as_flat().clone();
    flat[k] += delta;
    ShootingVector::from_flat(chi.n(), flat).unwrap()
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central differences of [`oracle_constraints`]; rows indexed by `χ`, columns by constraints.
pub fn fd_constraint_jacobian(p: &Problem, chi: &ShootingVector) -> DMatrix<f64> {
    let m = oracle_constraints(p, chi).len();
    let mut b = DMatrix::zeros(chi.len(), m);
    for k in 0..chi.len() {
        let h = fd_step(chi.as_flat()[k], 1e-6);
        let cp = oracle_constraints(p, &perturbed(chi, k, h));
        let cm = oracle_constraints(p, &perturbed(chi, k, -h));
        b.row_mut(k).copy_from(&((cp - cm) / (2.0 * h)).transpose());
    }
    b
}

/// Central differences of the scalar Lagrangian.
pub fn fd_grad_lagrangian(p: &Problem, chi: &ShootingVector, lambda: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(chi.len(), |k, _| {
        let h = fd_step(chi.as_flat()[k], 1e-6);
        (oracle_lagrangian(p, &perturbed(chi, k, h), lambda)
            - oracle_lagrangian(p, &perturbed(chi, k, -h), lambda))
            / (2.0 * h)
    })
}

/// `∇_χL` from RK4 sensitivities and the chain rule, written independently of the crate.
pub fn oracle_grad_lagrangian(p: &Problem, chi: &ShootingVector, lambda: &DVector<f64>) -> DVector<f64> {
    let n = chi.n();
    let seg = states(chi);
    let big_n = seg.len();
    let mut g = DVector::zeros(chi.len());
    let at = |i: usize| i * (n + 1);
    for (i, (_, t)) in seg.iter().enumerate() {
        g[at(i) + n] = *t;
    }
    let li = lambda[0];
    let w = &p.init.shape * (&seg[0].0 - &p.init.center) * li;
    for r in 0..n {
        g[at(0) + r] += w[r];
    }
    for i in 0..big_n {
        let (x, s) = rk4_sensitivity(p.field.as_ref(), &seg[i].0, seg[i].1, RK_STEPS);
        let fx = p.field.eval(&x);
        if i + 1 < big_n {
            let lam = lambda.rows(1 + i * n, n).into_owned();
            let sx = s.transpose() * &lam;
            for r in 0..n {
                g[at(i) + r] -= sx[r];
                g[at(i + 1) + r] += lam[r];
            }
            g[at(i) + n] -= fx.dot(&lam);
        } else {
            let lu = lambda[lambda.len() - 1];
            let r_u = &p.unsafe_set.shape * (&x - &p.unsafe_set.center);
            let sx = s.transpose() * &r_u * lu;
            for r in 0..n {
                g[at(i) + r] += sx[r];
            }
            g[at(i) + n] += lu * fx.dot(&r_u);
        }
    }
    g
}

/// Full dense Hessian of the Lagrangian: central differences of [`oracle_grad_lagrangian`],
/// symmetrized.
pub fn fd_hessian_lagrangian(p: &Problem, chi: &ShootingVector, lambda: &DVector<f64>) -> DMatrix<f64> {
    let k = chi.len();
    let mut h = DMatrix::zeros(k, k);
    for j in 0..k {
        let step = fd_step(chi.as_flat()[j], 1e-5);
        let gp = oracle_grad_lagrangian(p, &perturbed(chi, j, step), lambda);
        let gm = oracle_grad_lagrangian(p, &perturbed(chi, j, -step), lambda);
        h.column_mut(j).copy_from(&((gp - gm) / (2.0 * step)));
    }
    (&h + h.transpose()) * 0.5
}

/// `max |a − b| / max(1, max |b|)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn vec_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Standard instance with its start states jittered by up to `scale` and durations by
/// up to 10 %.
pub fn jittered_instance(id: BenchmarkId, segments: usize, seed: u64, scale: f64) -> (Instance, ShootingVector) {
    let inst = benchmark_instance(id, segments).unwrap();
    let mut r = rng(seed);
    let n = inst.chi0.n();
    let mut flat = inst.chi0.as_flat().clone();
    for (k, v) in flat.iter_mut().enumerate() {
        if k % (n + 1) == n {
            *v *= 1.0 + r.random_range(-0.1..0.1);
        } else {
            *v += r.random_range(-scale..scale);
        }
    }
    let chi = ShootingVector::from_flat(n, flat).unwrap();
    (inst, chi)
}

pub fn random_multipliers(segments: usize, n: usize, seed: u64) -> Multipliers {
    let mut r = rng(seed);
    let m = Multipliers::constraint_count(segments, n);
    Multipliers::from_flat(n, DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0))).unwrap()
}

pub fn random_matrix(r: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn random_vector(r: &mut StdRng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))
}

/// Dense symmetric eigenvalues, ascending.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

/// Random multiple-shooting Jacobian with the structural pattern of `B`.
pub fn random_structured(r: &mut StdRng, n: usize, segments: usize) -> StructuredJacobian {
    StructuredJacobian {
        n,
        segments,
        w1: random_vector(r, n) + DVector::from_element(n, 0.5),
        m: (0..segments - 1).map(|_| random_matrix(r, n, n)).collect(),
        vrow: (0..segments - 1).map(|_| random_vector(r, n)).collect(),
        w_u: random_vector(r, n),
        omega: r.random_range(-1.0..1.0),
    }
}

pub fn random_spd(r: &mut StdRng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(r, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn random_block_hessian(r: &mut StdRng, segments: usize, n: usize, spd: bool) -> BlockDiagHessian {
    let mut h = BlockDiagHessian::zeros(segments, n);
    for b in &mut h.blocks {
        *b = if spd {
            random_spd(r, n + 1)
        } else {
            let a = random_matrix(r, n + 1, n + 1);
            (&a + a.transpose()) * 0.5
        };
    }
    h
}
