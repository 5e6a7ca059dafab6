//! Saddle-point systems
//!
//! ```text
//! [ H   B ] [ d_χ ]     [ ∇_χ L ]
//! [ Bᵀ  0 ] [ d_λ ] = − [   c   ]
//! ```
//!
//! solved by projected conjugate gradients with the constraint preconditioner
//! `[[I, B], [Bᵀ, 0]]`. Applying the preconditioner needs solves with `BᵀB`, which for
//! the multiple-shooting Jacobian is banded with half-bandwidth `2n` regardless of the
//! number of segments, so it is assembled in band storage and factored once per iterate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Result};
use crate::linalg::{BandedCholesky, BandedSpd, BlockDiagHessian};
use crate::problem::StructuredJacobian;

/// A constraint Jacobian `B` (rows: variables, columns: constraints) seen as an operator.
pub trait ConstraintJacobian {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `B λ`.
    fn mul(&self, lambda: &DVector<f64>) -> DVector<f64>;
    /// `Bᵀ d`.
    fn tr_mul(&self, d: &DVector<f64>) -> DVector<f64>;
    /// `BᵀB` in band storage.
    fn normal_matrix(&self) -> BandedSpd;
    fn to_dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.nrows(), self.ncols());
        let mut e = DVector::zeros(self.ncols());
        for j in 0..self.ncols() {
            e[j] = 1.0;
            b.set_column(j, &self.mul(&e));
            e[j] = 0.0;
        }
        b
    }
}

/// Symmetric operator used as the (1,1) block.
pub trait HessianOperator {
    fn order(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn to_dense(&self) -> DMatrix<f64>;
}

impl HessianOperator for BlockDiagHessian {
    fn order(&self) -> usize {
        BlockDiagHessian::order(self)
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mul_vec(x)
    }

    fn to_dense(&self) -> DMatrix<f64> {
        BlockDiagHessian::to_dense(self)
    }
}

impl HessianOperator for DMatrix<f64> {
    fn order(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.clone()
    }
}

/// Dense `B` for small auxiliary problems; the normal matrix is stored with full band.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseJacobian {
    b: DMatrix<f64>,
}

impl DenseJacobian {
    pub fn new(b: DMatrix<f64>) -> Self {
        Self { b }
    }
}

impl ConstraintJacobian for DenseJacobian {
    fn nrows(&self) -> usize {
        self.b.nrows()
    }

    fn ncols(&self) -> usize {
        self.b.ncols()
    }

    fn mul(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.b * lambda
    }

    fn tr_mul(&self, d: &DVector<f64>) -> DVector<f64> {
        self.b.tr_mul(d)
    }

    fn normal_matrix(&self) -> BandedSpd {
        let k = self.b.ncols();
        BandedSpd::from_dense(&self.b.tr_mul(&self.b), k.saturating_sub(1))
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.b.clone()
    }
}

/// `BᵀB` for the multiple-shooting Jacobian, block-tridiagonal with a scalar border:
///
/// ```text
/// [ w1ᵀw1     w1ᵀM₁                                      ]
/// [ M₁ᵀw1     D₁       M₂                                ]
/// [           M₂ᵀ      D₂     ⋱                          ]
/// [                    ⋱      D_{N−2}   M_{N−1}          ]
/// [                           M_{N−1}ᵀ  D_{N−1}    w_U   ]
/// [                                     w_Uᵀ   w_Uᵀw_U+ω² ]
/// ```
///
/// with `Dᵢ = MᵢᵀMᵢ + vᵢvᵢᵀ + I`. Stored with half-bandwidth `2n`.
pub fn assemble_btb(b: &StructuredJacobian) -> BandedSpd {
    let n = b.n;
    let big_n = b.segments;
    let order = b.ncols();
    let mut btb = BandedSpd::zeros(order, 2 * n);
    let last = order - 1;
    btb.set(0, 0, b.w1.norm_squared());
    btb.set(last, last, b.w_u.norm_squared() + b.omega * b.omega);
    if big_n == 1 {
        // Both boundary constraints act on the only block.
        btb.set(last, 0, b.w1.dot(&b.w_u));
        return btb;
    }
    let group = |i: usize| 1 + i * n;
    let border = b.m[0].tr_mul(&b.w1);
    for k in 0..n {
        btb.set(group(0) + k, 0, border[k]);
    }
    for i in 0..big_n - 1 {
        let p = group(i);
        let mut d = b.m[i].tr_mul(&b.m[i]);
        d.ger(1.0, &b.vrow[i], &b.vrow[i], 1.0);
        for k in 0..n {
            d[(k, k)] += 1.0;
        }
        for col in 0..n {
            for row in col..n {
                btb.set(p + row, p + col, d[(row, col)]);
            }
        }
        if i + 2 < big_n {
            // Coupling (group i, group i+1) = M_{i+1}; the lower triangle holds its transpose.
            let q = group(i + 1);
            let mnext = &b.m[i + 1];
            for row in 0..n {
                for col in 0..n {
                    btb.set(q + row, p + col, mnext[(col, row)]);
                }
            }
        }
    }
    let p = group(big_n - 2);
    for k in 0..n {
        btb.set(last, p + k, b.w_u[k]);
    }
    btb
}

/// The constraint preconditioner `[[I, B], [Bᵀ, 0]]` with `BᵀB` factored.
pub struct ConstraintPreconditioner<'a> {
    jacobian: &'a dyn ConstraintJacobian,
    factor: BandedCholesky,
}

impl<'a> ConstraintPreconditioner<'a> {
    /// Factors `BᵀB`; fails when `B` is numerically rank deficient.
    pub fn new(jacobian: &'a dyn ConstraintJacobian) -> Result<Self> {
        let factor = jacobian.normal_matrix().cholesky()?;
        Ok(Self { jacobian, factor })
    }

    pub fn jacobian(&self) -> &'a dyn ConstraintJacobian {
        self.jacobian
    }

    pub fn factor(&self) -> &BandedCholesky {
        &self.factor
    }

    /// `(BᵀB)⁻¹ z`.
    pub fn normal_solve(&self, z: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(z)
    }

    /// Solution of `[[I, B], [Bᵀ, 0]] [g; v] = [r; 0]`: `v = (BᵀB)⁻¹Bᵀr`, `g = r − Bv`,
    /// with one refinement sweep on the projection.
    pub fn solve(&self, r: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        precond_solve(self.jacobian, &self.factor, r)
    }

    /// Minimum-norm solution of `Bᵀd = −c`: `d = −B(BᵀB)⁻¹c`.
    pub fn min_norm_step(&self, c: &DVector<f64>) -> DVector<f64> {
        -self.jacobian.mul(&self.factor.solve(c))
    }
}

/// See [`ConstraintPreconditioner::solve`].
pub fn precond_solve(
    jacobian: &dyn ConstraintJacobian,
    factor: &BandedCholesky,
    r: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let mut v = factor.solve(&jacobian.tr_mul(r));
    let mut g = r - jacobian.mul(&v);
    let dv = factor.solve(&jacobian.tr_mul(&g));
    g -= jacobian.mul(&dv);
    v += dv;
    (g, v)
}

/// `K [d_χ; d_λ] = [rhs_x; rhs_l]` with `K = [[H, B], [Bᵀ, 0]]`, where
/// `rhs_x = −∇_χL` and `rhs_l = −c`.
pub struct SaddleSystem<'a> {
    pub hessian: &'a dyn HessianOperator,
    pub jacobian: &'a dyn ConstraintJacobian,
    pub rhs_x: DVector<f64>,
    pub rhs_l: DVector<f64>,
}

impl SaddleSystem<'_> {
    pub fn order(&self) -> usize {
        self.jacobian.nrows() + self.jacobian.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let nx = self.jacobian.nrows();
        let nl = self.jacobian.ncols();
        let b = self.jacobian.to_dense();
        let mut k = DMatrix::zeros(nx + nl, nx + nl);
        k.view_mut((0, 0), (nx, nx)).copy_from(&self.hessian.to_dense());
        k.view_mut((0, nx), (nx, nl)).copy_from(&b);
        k.view_mut((nx, 0), (nl, nx)).copy_from(&b.transpose());
        k
    }

    fn check(&self) -> Result<()> {
        let nx = self.jacobian.nrows();
        dim_check(
            self.hessian.order() == nx
                && self.rhs_x.len() == nx
                && self.rhs_l.len() == self.jacobian.ncols(),
            || {
                format!(
                    "saddle system: H order {}, B {}x{}, rhs {} + {}",
                    self.hessian.order(),
                    nx,
                    self.jacobian.ncols(),
                    self.rhs_x.len(),
                    self.rhs_l.len()
                )
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpcgStatus {
    Converged,
    IterationLimit,
    NonpositiveCurvature,
}

#[derive(Debug, Clone)]
pub struct NpcgSolution {
    pub d_chi: DVector<f64>,
    pub d_lambda: DVector<f64>,
    pub iterations: usize,
    pub status: NpcgStatus,
    /// Norm of the projected residual at the feasibility step.
    pub initial_residual: f64,
    pub final_residual: f64,
}

/// Default relative inner tolerance `min(0.1, √‖r₀‖)`.
pub fn default_inner_tolerance(initial_residual: f64) -> f64 {
    0.1f64.min(initial_residual.sqrt())
}

/// Projected preconditioned CG; factors `BᵀB` and delegates to [`npcg_solve_with`].
pub fn npcg_solve(sys: &SaddleSystem<'_>, max_it: usize, tol: f64) -> Result<NpcgSolution> {
    let pre = ConstraintPreconditioner::new(sys.jacobian)?;
    npcg_solve_with(sys, &pre, max_it, tol)
}

/// Projected preconditioned CG started at the minimum-norm feasibility step. Stops once the
/// projected residual falls below `tol` times its initial value, after `max_it` iterations,
/// or on a direction of nonpositive curvature (returning the current iterate).
pub fn npcg_solve_with(
    sys: &SaddleSystem<'_>,
    pre: &ConstraintPreconditioner<'_>,
    max_it: usize,
    tol: f64,
) -> Result<NpcgSolution> {
    sys.check()?;
    let h = sys.hessian;
    let c = -&sys.rhs_l;
    let grad = -&sys.rhs_x;

    let mut d = pre.min_norm_step(&c);
    let mut r = h.apply(&d) + &grad;
    let (mut g, mut v) = pre.solve(&r);
    let g0 = g.norm();
    let mut status = NpcgStatus::Converged;
    let mut iterations = 0;
    if g0 > 1e-14 * r.norm() && g0 > 0.0 {
        status = NpcgStatus::IterationLimit;
        let mut p = -&g;
        let mut rg = r.dot(&g);
        while iterations < max_it {
            let hp = h.apply(&p);
            let kappa = p.dot(&hp);
            if kappa <= 1e-14 * p.norm_squared() {
                status = NpcgStatus::NonpositiveCurvature;
                break;
            }
            let step = rg / kappa;
            d.axpy(step, &p, 1.0);
            r.axpy(step, &hp, 1.0);
            (g, v) = pre.solve(&r);
            iterations += 1;
            if g.norm() <= tol * g0 {
                status = NpcgStatus::Converged;
                break;
            }
            let rg_new = r.dot(&g);
            p = -&g + p * (rg_new / rg);
            rg = rg_new;
        }
    }
    Ok(NpcgSolution {
        d_chi: d,
        d_lambda: -v,
        iterations,
        status,
        initial_residual: g0,
        final_residual: g.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_jacobian(n: usize, big_n: usize, seed: u64) -> StructuredJacobian {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        StructuredJacobian {
            n,
            segments: big_n,
            w1: DVector::from_fn(n, |_, _| next()),
            m: (0..big_n - 1).map(|_| DMatrix::from_fn(n, n, |_, _| next())).collect(),
            vrow: (0..big_n - 1).map(|_| DVector::from_fn(n, |_, _| next())).collect(),
            w_u: DVector::from_fn(n, |_, _| next()),
            omega: next(),
        }
    }

    #[test]
    fn btb_trivial_blocks() {
        let n = 2;
        let b = StructuredJacobian {
            n,
            segments: 3,
            w1: DVector::from_vec(vec![1.0, 2.0]),
            m: vec![DMatrix::zeros(n, n); 2],
            vrow: vec![DVector::zeros(n); 2],
            w_u: DVector::from_vec(vec![3.0, 0.0]),
            omega: 2.0,
        };
        let btb = assemble_btb(&b).to_dense();
        assert_eq!(btb[(0, 0)], 5.0);
        assert_eq!(btb[(5, 5)], 13.0);
        assert_eq!(btb.view((1, 1), (4, 4)).into_owned(), DMatrix::identity(4, 4));
    }

    #[test]
    fn btb_matches_dense_product() {
        for (n, big_n) in [(3, 4), (1, 2), (2, 1), (4, 6)] {
            let b = random_jacobian(n, big_n, (n * 31 + big_n) as u64);
            let dense = b.to_dense();
            let banded = assemble_btb(&b);
            assert_eq!(banded.half_bandwidth(), 2 * n);
            assert!((banded.to_dense() - dense.tr_mul(&dense)).amax() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let b = random_jacobian(2, 3, 7);
        let pre = ConstraintPreconditioner::new(&b).unwrap();
        let dense = b.to_dense();
        // Bᵀr = 0
        let w = DVector::from_fn(dense.ncols(), |i, _| i as f64 * 0.1 + 0.3);
        let r = DVector::from_fn(dense.nrows(), |i, _| (i as f64).cos());
        let (g, _) = pre.solve(&r);
        let (g2, v2) = pre.solve(&g);
        assert!((&g2 - &g).amax() < 1e-12);
        assert!(v2.amax() < 1e-12);
        assert!(b.tr_mul(&g).amax() < 1e-10 * r.norm());
        // r = B w
        let (g, v) = pre.solve(&(&dense * &w));
        assert!(g.amax() < 1e-12);
        assert!((v - w).amax() < 1e-10);
    }

    #[test]
    fn feasibility_step() {
        let b = random_jacobian(3, 4, 11);
        let pre = ConstraintPreconditioner::new(&b).unwrap();
        let c = DVector::from_fn(b.ncols(), |i, _| 1.0 - 0.2 * i as f64);
        let d0 = pre.min_norm_step(&c);
        assert!((b.tr_mul(&d0) + &c).amax() < 1e-10);
    }

    #[test]
    fn npcg_identity_hessian_is_projected_steepest_descent() {
        let b = random_jacobian(2, 3, 3);
        let h = BlockDiagHessian::identity(3, 2);
        let grad = DVector::from_fn(9, |i, _| (i as f64 * 0.9).sin());
        let sys = SaddleSystem {
            hessian: &h,
            jacobian: &b,
            rhs_x: -&grad,
            rhs_l: DVector::zeros(b.ncols()),
        };
        let sol = npcg_solve(&sys, 100, 1e-12).unwrap();
        let dense = b.to_dense();
        let proj = DMatrix::identity(9, 9)
            - &dense * (dense.tr_mul(&dense)).try_inverse().unwrap() * dense.transpose();
        assert!((sol.d_chi + proj * &grad).amax() < 1e-10);
        assert!(sol.iterations <= 1);
    }

    #[test]
    fn npcg_zero_rhs() {
        let b = random_jacobian(2, 3, 5);
        let h = BlockDiagHessian::identity(3, 2);
        let sys = SaddleSystem {
            hessian: &h,
            jacobian: &b,
            rhs_x: DVector::zeros(9),
            rhs_l: DVector::zeros(b.ncols()),
        };
        let sol = npcg_solve(&sys, 10, 1e-10).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.d_chi.amax(), 0.0);
        assert_eq!(sol.status, NpcgStatus::Converged);
    }

    #[test]
    fn npcg_flags_negative_curvature() {
        let b = random_jacobian(2, 3, 9);
        let h = -DMatrix::<f64>::identity(9, 9);
        let sys = SaddleSystem {
            hessian: &h,
            jacobian: &b,
            rhs_x: DVector::from_element(9, 1.0),
            rhs_l: DVector::zeros(b.ncols()),
        };
        let sol = npcg_solve(&sys, 10, 1e-10).unwrap();
        assert_eq!(sol.status, NpcgStatus::NonpositiveCurvature);
    }
}
