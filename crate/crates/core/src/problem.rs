//! The equality-constrained program
//!
//! ```text
//! min ½ Σ tᵢ²   s.t.   c(χ) = [ ½(‖x₀¹ − c_I‖²_{E_I} − 1),
//!                               x₀ⁱ⁺¹ − Φ(tᵢ, x₀ⁱ)            (i = 1 … N−1),
//!                               ½(‖Φ(t_N, x₀ᴺ) − c_U‖²_{E_U} − 1) ] = 0
//! ```
//!
//! over `χ = [x₀¹, t₁, …, x₀ᴺ, t_N]`, together with its structured Jacobian `B(χ)`
//! (rows indexed by `χ`, columns by constraints), Lagrangian gradients, block-diagonal
//! Hessians and the merit function used for step acceptance.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    flow, flow_along, flow_with_sensitivity_recording, mat_exp, FieldKind, SensitivityMethod,
    StepSequence, Tolerances, VectorField,
};
use crate::error::{dim_check, Error, Result};
use crate::kkt::{npcg_solve, ConstraintJacobian, NpcgStatus, SaddleSystem};
use crate::linalg::{BandedSpd, BlockDiagHessian};

/// `{ v : (v − c)ᵀ E (v − c) ≤ 1 }` with `E` symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let n = center.len();
        dim_check(shape.nrows() == n && shape.ncols() == n, || {
            format!("ellipsoid shape is {}x{}, center has length {n}", shape.nrows(), shape.ncols())
        })?;
        if (&shape - shape.transpose()).amax() > 1e-12 * (1.0 + shape.amax()) {
            return Err(Error::Config("ellipsoid shape matrix is not symmetric".into()));
        }
        if shape.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN });
        }
        Ok(Self { center, shape })
    }

    /// Ball of radius `r`: `E = r⁻² I`.
    pub fn ball(center: DVector<f64>, radius: f64) -> Self {
        let n = center.len();
        Self { center, shape: DMatrix::identity(n, n) / (radius * radius) }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(v − c)ᵀ E (v − c)`.
    pub fn norm_sq(&self, v: &DVector<f64>) -> f64 {
        let d = v - &self.center;
        d.dot(&(&self.shape * &d))
    }

    /// Membership with slack: `‖v − c‖²_E < 1 + eps`.
    pub fn contains(&self, v: &DVector<f64>, eps: f64) -> bool {
        self.norm_sq(v) < 1.0 + eps
    }
}

/// `χ = [x₀¹, t₁, …, x₀ᴺ, t_N]`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootingVector {
    n: usize,
    data: DVector<f64>,
}

impl ShootingVector {
    pub fn new(states: &[DVector<f64>], durations: &[f64]) -> Result<Self> {
        dim_check(!states.is_empty() && states.len() == durations.len(), || {
            format!("{} states but {} durations", states.len(), durations.len())
        })?;
        let n = states[0].len();
        dim_check(n > 0 && states.iter().all(|s| s.len() == n), || {
            "segment states must share one non-zero dimension".into()
        })?;
        let mut data = Vec::with_capacity(states.len() * (n + 1));
        for (s, t) in states.iter().zip(durations) {
            data.extend_from_slice(s.as_slice());
            data.push(*t);
        }
        Ok(Self { n, data: DVector::from_vec(data) })
    }

    pub fn from_flat(n: usize, data: DVector<f64>) -> Result<Self> {
        dim_check(n > 0 && !data.is_empty() && data.len() % (n + 1) == 0, || {
            format!("flat length {} is not a multiple of n + 1 = {}", data.len(), n + 1)
        })?;
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn segments(&self) -> usize {
        self.data.len() / (self.n + 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block_range(&self, i: usize) -> Range<usize> {
        i * (self.n + 1)..(i + 1) * (self.n + 1)
    }

    pub fn state(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.rows(i * (self.n + 1), self.n)
    }

    pub fn state_owned(&self, i: usize) -> DVector<f64> {
        self.state(i).into_owned()
    }

    pub fn duration(&self, i: usize) -> f64 {
        self.data[i * (self.n + 1) + self.n]
    }

    pub fn durations(&self) -> Vec<f64> {
        (0..self.segments()).map(|i| self.duration(i)).collect()
    }

    pub fn total_time(&self) -> f64 {
        self.durations().iter().sum()
    }

    pub fn as_flat(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }

    /// `χ + α d`.
    pub fn stepped(&self, alpha: f64, d: &DVector<f64>) -> Self {
        Self { n: self.n, data: &self.data + d * alpha }
    }
}

/// `λ = [λ_I, λ₁, …, λ_{N−1}, λ_U]`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    n: usize,
    data: DVector<f64>,
}

impl Multipliers {
    pub fn constraint_count(segments: usize, n: usize) -> usize {
        (segments - 1) * n + 2
    }

    pub fn ones(segments: usize, n: usize) -> Self {
        Self { n, data: DVector::from_element(Self::constraint_count(segments, n), 1.0) }
    }

    pub fn zeros(segments: usize, n: usize) -> Self {
        Self { n, data: DVector::zeros(Self::constraint_count(segments, n)) }
    }

    pub fn from_flat(n: usize, data: DVector<f64>) -> Result<Self> {
        dim_check(n > 0 && data.len() >= 2 && (data.len() - 2) % n == 0, || {
            format!("multiplier length {} is not (N−1)·{n} + 2", data.len())
        })?;
        Ok(Self { n, data })
    }

    pub fn segments(&self) -> usize {
        (self.data.len() - 2) / self.n + 1
    }

    pub fn lambda_init(&self) -> f64 {
        self.data[0]
    }

    pub fn lambda_match(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.rows(1 + i * self.n, self.n)
    }

    pub fn lambda_unsafe(&self) -> f64 {
        self.data[self.data.len() - 1]
    }

    pub fn as_flat(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_flat(self) -> DVector<f64> {
        self.data
    }
}

/// Blocks of `B(χ)`:
///
/// ```text
///        λ_I   λ₁     λ₂    …  λ_{N−1}   λ_U
/// x₀¹  [ w1    M₁                          ]
/// t₁   [       v₁ᵀ                         ]
/// x₀²  [       I      M₂                   ]
/// t₂   [              v₂ᵀ                  ]
///  ⋮                         ⋱
/// x₀ᴺ  [                       I       w_U ]
/// t_N  [                       0       ω   ]
/// ```
///
/// with `Mᵢ = −S(tᵢ, x₀ⁱ)ᵀ` and `vᵢ = −f(Φ(tᵢ, x₀ⁱ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredJacobian {
    pub n: usize,
    pub segments: usize,
    pub w1: DVector<f64>,
    pub m: Vec<DMatrix<f64>>,
    pub vrow: Vec<DVector<f64>>,
    pub w_u: DVector<f64>,
    pub omega: f64,
}

impl StructuredJacobian {
    fn xrow(&self, i: usize) -> usize {
        i * (self.n + 1)
    }

    fn trow(&self, i: usize) -> usize {
        i * (self.n + 1) + self.n
    }

    fn mcol(&self, i: usize) -> usize {
        1 + i * self.n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut b = DMatrix::zeros(self.nrows(), self.ncols());
        b.view_mut((0, 0), (n, 1)).copy_from(&self.w1);
        for i in 0..self.segments - 1 {
            let col = self.mcol(i);
            b.view_mut((self.xrow(i), col), (n, n)).copy_from(&self.m[i]);
            b.view_mut((self.trow(i), col), (1, n)).copy_from(&self.vrow[i].transpose());
            b.view_mut((self.xrow(i + 1), col), (n, n)).fill_with_identity();
        }
        let last = self.ncols() - 1;
        let k = self.segments - 1;
        b.view_mut((self.xrow(k), last), (n, 1)).copy_from(&self.w_u);
        b[(self.trow(k), last)] = self.omega;
        b
    }
}

impl ConstraintJacobian for StructuredJacobian {
    fn nrows(&self) -> usize {
        self.segments * (self.n + 1)
    }

    fn ncols(&self) -> usize {
        Multipliers::constraint_count(self.segments, self.n)
    }

    fn mul(&self, lambda: &DVector<f64>) -> DVector<f64> {
        assert_eq!(lambda.len(), self.ncols());
        let n = self.n;
        let mut out = DVector::zeros(self.nrows());
        out.rows_mut(0, n).axpy(lambda[0], &self.w1, 1.0);
        for i in 0..self.segments - 1 {
            let li = lambda.rows(self.mcol(i), n);
            out.rows_mut(self.xrow(i), n).gemv(1.0, &self.m[i], &li, 1.0);
            out[self.trow(i)] += self.vrow[i].dot(&li);
            let mut next = out.rows_mut(self.xrow(i + 1), n);
            next += li;
        }
        let k = self.segments - 1;
        let lu = lambda[lambda.len() - 1];
        out.rows_mut(self.xrow(k), n).axpy(lu, &self.w_u, 1.0);
        out[self.trow(k)] += self.omega * lu;
        out
    }

    fn tr_mul(&self, d: &DVector<f64>) -> DVector<f64> {
        assert_eq!(d.len(), self.nrows());
        let n = self.n;
        let mut out = DVector::zeros(self.ncols());
        out[0] = self.w1.dot(&d.rows(0, n));
        for i in 0..self.segments - 1 {
            let col = self.mcol(i);
            let mut o = out.rows_mut(col, n);
            o.gemv_tr(1.0, &self.m[i], &d.rows(self.xrow(i), n), 0.0);
            o.axpy(d[self.trow(i)], &self.vrow[i], 1.0);
            o += d.rows(self.xrow(i + 1), n);
        }
        let k = self.segments - 1;
        let last = out.len() - 1;
        out[last] = self.w_u.dot(&d.rows(self.xrow(k), n)) + self.omega * d[self.trow(k)];
        out
    }

    /// `BᵀB` assembled blockwise; see [`crate::kkt::assemble_btb`].
    fn normal_matrix(&self) -> BandedSpd {
        crate::kkt::assemble_btb(self)
    }
}

/// Flow data of one segment.
#[derive(Debug, Clone)]
pub struct SegmentData {
    /// `Φ(tᵢ, x₀ⁱ)`.
    pub endpoint: DVector<f64>,
    /// `f(Φ(tᵢ, x₀ⁱ)) = dΦ/dtᵢ`.
    pub rate: DVector<f64>,
    /// `S(tᵢ, x₀ⁱ)`.
    pub sensitivity: Option<DMatrix<f64>>,
    /// Accepted mesh for nonlinear fields; empty when the matrix exponential was used.
    pub steps: StepSequence,
}

/// Everything the solvers need at one iterate.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub segments: Vec<SegmentData>,
    pub objective: f64,
    pub objective_grad: DVector<f64>,
    pub constraints: DVector<f64>,
    pub jacobian: StructuredJacobian,
}

/// An instance of the connecting-trajectory program.
#[derive(Clone)]
pub struct Problem {
    pub field: Arc<dyn VectorField>,
    pub init: Ellipsoid,
    pub unsafe_set: Ellipsoid,
    pub sensitivity: SensitivityMethod,
    pub tolerances: Tolerances,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("n", &self.n())
            .field("init", &self.init)
            .field("unsafe_set", &self.unsafe_set)
            .field("sensitivity", &self.sensitivity)
            .field("tolerances", &self.tolerances)
            .finish()
    }
}

/// `½ Σ tᵢ²`.
pub fn objective(chi: &ShootingVector) -> f64 {
    0.5 * chi.durations().iter().map(|t| t * t).sum::<f64>()
}

/// `∇F`: zero on states, `tᵢ` on durations.
pub fn objective_grad(chi: &ShootingVector) -> DVector<f64> {
    let n = chi.n();
    DVector::from_fn(chi.len(), |k, _| if k % (n + 1) == n { chi.as_flat()[k] } else { 0.0 })
}

/// `(∇_χ L, ∇_λ L) = (∇F + Bλ, c)`.
pub fn grad_lagrangian(
    chi: &ShootingVector,
    lambda: &Multipliers,
    jacobian: &StructuredJacobian,
    constraints: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let gx = objective_grad(chi) + jacobian.mul(lambda.as_flat());
    (gx, constraints.clone())
}

/// Analytic `P′(0) = ∇Fᵀd + (λ + d_λ)ᵀ(Bᵀd) + σ cᵀ(Bᵀd)`.
#[allow(clippy::too_many_arguments)]
pub fn merit_slope(
    lambda: &Multipliers,
    d_lambda: &DVector<f64>,
    sigma: f64,
    d_chi: &DVector<f64>,
    objective_grad: &DVector<f64>,
    jacobian: &dyn ConstraintJacobian,
    constraints: &DVector<f64>,
) -> f64 {
    let btd = jacobian.tr_mul(d_chi);
    objective_grad.dot(d_chi)
        + (lambda.as_flat() + d_lambda).dot(&btd)
        + sigma * constraints.dot(&btd)
}

/// Minimizer of `½ Σ tᵢ²` subject to `Σ tᵢ = total`, obtained from one saddle-point solve
/// with the constraint-preconditioned projected CG.
pub fn equal_length_split(total: f64, segments: usize) -> Result<DVector<f64>> {
    dim_check(segments > 0, || "need at least one segment".into())?;
    let h = DMatrix::<f64>::identity(segments, segments);
    let b = crate::kkt::DenseJacobian::new(DMatrix::from_element(segments, 1, 1.0));
    let t0 = DVector::zeros(segments);
    // At t = 0: ∇F = 0, c = Σt − total.
    let sys = SaddleSystem {
        hessian: &h,
        jacobian: &b,
        rhs_x: -DVector::<f64>::zeros(segments),
        rhs_l: DVector::from_element(1, total),
    };
    let sol = npcg_solve(&sys, 4 * segments + 4, 1e-14)?;
    debug_assert!(sol.status != NpcgStatus::NonpositiveCurvature);
    Ok(t0 + sol.d_chi)
}

/// Outcome of re-simulating a candidate trajectory from `x₀¹` in one piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub verified: bool,
    /// `‖x₀¹ − c_I‖²_{E_I}`.
    pub init_norm_sq: f64,
    /// `‖Φ(Σtᵢ, x₀¹) − c_U‖²_{E_U}`, `NaN` if the simulation failed.
    pub unsafe_norm_sq: f64,
    pub total_time: f64,
    pub note: Option<String>,
}

/// Membership slack used by [`Problem::verify`].
pub const VERIFY_EPS: f64 = 1e-4;

impl Problem {
    pub fn new(field: Arc<dyn VectorField>, init: Ellipsoid, unsafe_set: Ellipsoid) -> Result<Self> {
        let n = field.dim();
        dim_check(init.dim() == n && unsafe_set.dim() == n, || {
            format!(
                "field dimension {n}, Init dimension {}, Unsafe dimension {}",
                init.dim(),
                unsafe_set.dim()
            )
        })?;
        Ok(Self {
            field,
            init,
            unsafe_set,
            sensitivity: SensitivityMethod::default(),
            tolerances: Tolerances::default(),
        })
    }

    pub fn with_sensitivity(mut self, method: SensitivityMethod) -> Self {
        self.sensitivity = method;
        self
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tolerances = tol;
        self
    }

    pub fn n(&self) -> usize {
        self.field.dim()
    }

    fn check_chi(&self, chi: &ShootingVector) -> Result<()> {
        dim_check(chi.n() == self.n(), || {
            format!("shooting vector has n = {}, problem has n = {}", chi.n(), self.n())
        })
    }

    fn check_lambda(&self, chi: &ShootingVector, lambda: &Multipliers) -> Result<()> {
        dim_check(
            lambda.as_flat().len() == Multipliers::constraint_count(chi.segments(), chi.n()),
            || {
                format!(
                    "{} multipliers for {} constraints",
                    lambda.as_flat().len(),
                    Multipliers::constraint_count(chi.segments(), chi.n())
                )
            },
        )
    }

    /// Flow of one segment. Linear fields use `e^{At}`; others integrate.
    pub fn segment(&self, x0: &DVector<f64>, t: f64, with_sensitivity: bool) -> Result<SegmentData> {
        match self.field.kind() {
            FieldKind::Linear(a) => {
                let e = mat_exp(a, t);
                let endpoint = &e * x0;
                let rate = a * &endpoint;
                Ok(SegmentData {
                    endpoint,
                    rate,
                    sensitivity: with_sensitivity.then_some(e),
                    steps: StepSequence::default(),
                })
            }
            FieldKind::Nonlinear => {
                let (res, steps) = if with_sensitivity {
                    flow_with_sensitivity_recording(
                        self.field.as_ref(),
                        x0,
                        t,
                        self.sensitivity,
                        self.tolerances,
                    )?
                } else {
                    let r = flow(self.field.as_ref(), x0, t, self.tolerances)?;
                    (r, StepSequence::default())
                };
                let rate = self.field.eval(&res.endpoint);
                Ok(SegmentData { endpoint: res.endpoint, rate, sensitivity: res.sensitivity, steps })
            }
        }
    }

    fn constraints_from(&self, chi: &ShootingVector, segs: &[SegmentData]) -> DVector<f64> {
        let n = self.n();
        let big_n = chi.segments();
        let mut c = DVector::zeros(Multipliers::constraint_count(big_n, n));
        c[0] = 0.5 * (self.init.norm_sq(&chi.state_owned(0)) - 1.0);
        for i in 0..big_n - 1 {
            let gap = chi.state(i + 1) - &segs[i].endpoint;
            c.rows_mut(1 + i * n, n).copy_from(&gap);
        }
        let last = c.len() - 1;
        c[last] = 0.5 * (self.unsafe_set.norm_sq(&segs[big_n - 1].endpoint) - 1.0);
        c
    }

    /// `c(χ)`.
    pub fn constraints(&self, chi: &ShootingVector) -> Result<DVector<f64>> {
        self.check_chi(chi)?;
        let segs = (0..chi.segments())
            .map(|i| self.segment(&chi.state_owned(i), chi.duration(i), false))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.constraints_from(chi, &segs))
    }

    /// Flows with sensitivities, constraints, objective data and `B(χ)` in one pass.
    pub fn evaluate(&self, chi: &ShootingVector) -> Result<Evaluation> {
        self.check_chi(chi)?;
        let segs = (0..chi.segments())
            .map(|i| self.segment(&chi.state_owned(i), chi.duration(i), true))
            .collect::<Result<Vec<_>>>()?;
        let constraints = self.constraints_from(chi, &segs);
        let jacobian = self.jacobian_from(chi, &segs);
        Ok(Evaluation {
            segments: segs,
            objective: objective(chi),
            objective_grad: objective_grad(chi),
            constraints,
            jacobian,
        })
    }

    /// `B(χ)` in block form.
    pub fn jacobian(&self, chi: &ShootingVector) -> Result<StructuredJacobian> {
        Ok(self.evaluate(chi)?.jacobian)
    }

    fn jacobian_from(&self, chi: &ShootingVector, segs: &[SegmentData]) -> StructuredJacobian {
        let n = self.n();
        let big_n = chi.segments();
        let sens = |i: usize| segs[i].sensitivity.as_ref().expect("sensitivity requested");
        let w1 = &self.init.shape * (chi.state(0) - &self.init.center);
        let m = (0..big_n - 1).map(|i| -sens(i).transpose()).collect();
        let vrow = (0..big_n - 1).map(|i| -&segs[i].rate).collect();
        let last = &segs[big_n - 1];
        let r = &self.unsafe_set.shape * (&last.endpoint - &self.unsafe_set.center);
        let w_u = sens(big_n - 1).transpose() * &r;
        let omega = last.rate.dot(&r);
        StructuredJacobian { n, segments: big_n, w1, m, vrow, w_u, omega }
    }

    /// Simulates once from `x₀¹` over `Σ tᵢ` (ignoring the other shooting states) and
    /// checks `x₀¹ ∈ Init` and the endpoint `∈ Unsafe`, each with slack [`VERIFY_EPS`].
    pub fn verify(&self, chi: &ShootingVector) -> Verification {
        let x0 = chi.state_owned(0);
        let total_time = chi.total_time();
        let init_norm_sq = self.init.norm_sq(&x0);
        let mut out = Verification {
            verified: false,
            init_norm_sq,
            unsafe_norm_sq: f64::NAN,
            total_time,
            note: None,
        };
        if !(total_time >= 0.0) {
            out.note = Some(format!("negative total time {total_time}"));
            return out;
        }
        match flow(self.field.as_ref(), &x0, total_time, self.tolerances) {
            Ok(r) => {
                out.unsafe_norm_sq = self.unsafe_set.norm_sq(&r.endpoint);
                out.verified = init_norm_sq < 1.0 + VERIFY_EPS && out.unsafe_norm_sq < 1.0 + VERIFY_EPS;
            }
            Err(e) => out.note = Some(e.to_string()),
        }
        out
    }

    /// `L(χ, λ) = F(χ) + λᵀ c(χ)`.
    pub fn lagrangian(&self, chi: &ShootingVector, lambda: &Multipliers) -> Result<f64> {
        self.check_lambda(chi, lambda)?;
        Ok(objective(chi) + lambda.as_flat().dot(&self.constraints(chi)?))
    }

    /// `P(α) = F(χ + αd) + (λ + d_λ)ᵀ c(χ + αd) + (σ/2) ‖c(χ + αd)‖²`.
    pub fn merit(
        &self,
        chi: &ShootingVector,
        lambda: &Multipliers,
        d_lambda: &DVector<f64>,
        sigma: f64,
        alpha: f64,
        d_chi: &DVector<f64>,
    ) -> Result<f64> {
        self.check_lambda(chi, lambda)?;
        let trial = chi.stepped(alpha, d_chi);
        let c = self.constraints(&trial)?;
        Ok(objective(&trial)
            + (lambda.as_flat() + d_lambda).dot(&c)
            + 0.5 * sigma * c.norm_squared())
    }

    /// Block-diagonal Hessian of the Lagrangian for `ẋ = A x`, built from the matrix
    /// exponentials already held in `eval`.
    pub fn analytic_hessian_linear(
        &self,
        chi: &ShootingVector,
        lambda: &Multipliers,
        eval: &Evaluation,
    ) -> Result<BlockDiagHessian> {
        let a = match self.field.kind() {
            FieldKind::Linear(a) => a.clone(),
            FieldKind::Nonlinear => {
                return Err(Error::Config("analytic linear Hessian needs a linear field".into()))
            }
        };
        self.check_lambda(chi, lambda)?;
        Ok(self.hessian_first_order_terms(chi, lambda, eval, |_, _| Ok(a.clone()))?.0)
    }

    /// Block-diagonal Hessian of the Lagrangian for a general field: mixed and time
    /// derivatives in closed form, the `∂²Φ/∂x₀²` contractions by central differences
    /// of the sensitivity along the segment's accepted mesh. The contractions vanish for
    /// linear fields and are skipped there.
    pub fn analytic_hessian_mixed(
        &self,
        chi: &ShootingVector,
        lambda: &Multipliers,
        eval: &Evaluation,
    ) -> Result<BlockDiagHessian> {
        self.check_lambda(chi, lambda)?;
        let field = self.field.clone();
        let (mut h, contraction_weights) =
            self.hessian_first_order_terms(chi, lambda, eval, |_, seg| Ok(field.jacobian(&seg.endpoint)))?;
        if matches!(self.field.kind(), FieldKind::Linear(_)) {
            return Ok(h);
        }
        let n = self.n();
        for (i, weight) in contraction_weights.into_iter().enumerate() {
            let Some(mu) = weight else { continue };
            if mu.iter().all(|v| *v == 0.0) {
                continue;
            }
            let t = self.second_order_contraction(&chi.state_owned(i), &eval.segments[i].steps, &mu)?;
            let mut block = h.blocks[i].view_mut((0, 0), (n, n));
            block += t;
        }
        Ok(h)
    }

    /// `Σ_k μ_k ∂²Φ_k/∂x₀²` at one segment, symmetrized.
    fn second_order_contraction(
        &self,
        x0: &DVector<f64>,
        steps: &StepSequence,
        mu: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut t = DMatrix::zeros(n, n);
        let mut xp = x0.clone();
        for b in 0..n {
            let h = 1e-5 * x0[b].abs().max(1.0);
            xp[b] = x0[b] + h;
            let sp = flow_along(self.field.as_ref(), &xp, steps, true)?.sensitivity.unwrap();
            xp[b] = x0[b] - h;
            let sm = flow_along(self.field.as_ref(), &xp, steps, true)?.sensitivity.unwrap();
            xp[b] = x0[b];
            let col = (sp - sm).transpose() * mu / (2.0 * h);
            t.set_column(b, &col);
        }
        Ok((&t + t.transpose()) * 0.5)
    }

    /// Hessian blocks without tensor terms, plus per-block contraction weights `μ` such that
    /// the missing term is `Σ_k μ_k ∂²Φ_k/∂x₀²`.
    #[allow(clippy::type_complexity)]
    fn hessian_first_order_terms<J>(
        &self,
        chi: &ShootingVector,
        lambda: &Multipliers,
        eval: &Evaluation,
        jac_at: J,
    ) -> Result<(BlockDiagHessian, Vec<Option<DVector<f64>>>)>
    where
        J: Fn(usize, &SegmentData) -> Result<DMatrix<f64>>,
    {
        let n = self.n();
        let big_n = chi.segments();
        dim_check(eval.segments.len() == big_n, || "evaluation does not match χ".into())?;
        let mut h = BlockDiagHessian::zeros(big_n, n);
        let mut weights: Vec<Option<DVector<f64>>> = vec![None; big_n];
        for i in 0..big_n {
            let seg = &eval.segments[i];
            let s = seg.sensitivity.as_ref().expect("evaluation carries sensitivities");
            let jac = jac_at(i, seg)?;
            let js = &jac * s;
            let jf = &jac * &seg.rate;
            let mut a_blk = DMatrix::<f64>::zeros(n, n);
            let mut v = DVector::<f64>::zeros(n);
            let mut alpha = 1.0;
            let mut mu = DVector::<f64>::zeros(n);
            if i == 0 {
                a_blk += &self.init.shape * lambda.lambda_init();
            }
            if i + 1 < big_n {
                let li = lambda.lambda_match(i);
                v -= js.transpose() * li;
                alpha -= jf.dot(&li);
                mu -= li;
            }
            if i + 1 == big_n {
                let lu = lambda.lambda_unsafe();
                let eu = &self.unsafe_set.shape;
                let r = eu * (&seg.endpoint - &self.unsafe_set.center);
                a_blk += s.transpose() * eu * s * lu;
                v += (js.transpose() * &r + s.transpose() * (eu * &seg.rate)) * lu;
                alpha += lu * (jf.dot(&r) + seg.rate.dot(&(eu * &seg.rate)));
                mu += r * lu;
            }
            let blk = &mut h.blocks[i];
            blk.view_mut((0, 0), (n, n)).copy_from(&a_blk);
            blk.view_mut((0, n), (n, 1)).copy_from(&v);
            blk.view_mut((n, 0), (1, n)).copy_from(&v.transpose());
            blk[(n, n)] = alpha;
            weights[i] = Some(mu);
        }
        Ok((h, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearField;

    fn rotation_field() -> Arc<dyn VectorField> {
        Arc::new(LinearField::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap())
    }

    fn ball_problem(field: Arc<dyn VectorField>, c_i: DVector<f64>, c_u: DVector<f64>) -> Problem {
        Problem::new(field, Ellipsoid::ball(c_i, 0.25), Ellipsoid::ball(c_u, 0.25)).unwrap()
    }

    #[test]
    fn objective_examples() {
        let st = |k| vec![DVector::zeros(2); k];
        let chi = ShootingVector::new(&st(5), &[1.0; 5]).unwrap();
        assert_eq!(objective(&chi), 2.5);
        let chi = ShootingVector::new(&st(1), &[5.0]).unwrap();
        assert_eq!(objective(&chi), 12.5);
        let chi = ShootingVector::new(&st(10), &[0.5; 10]).unwrap();
        assert_eq!(objective(&chi), 1.25);
    }

    #[test]
    fn flat_layout() {
        let s = [DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        let chi = ShootingVector::new(&s, &[0.5, 0.7]).unwrap();
        assert_eq!(chi.as_flat().as_slice(), &[1.0, 2.0, 0.5, 3.0, 4.0, 0.7]);
        assert_eq!(chi.state(1).as_slice(), &[3.0, 4.0]);
        assert_eq!(chi.duration(1), 0.7);
        let lam = Multipliers::from_flat(2, DVector::from_vec(vec![9.0, 1.0, 2.0, 8.0])).unwrap();
        assert_eq!(lam.lambda_init(), 9.0);
        assert_eq!(lam.lambda_match(0).as_slice(), &[1.0, 2.0]);
        assert_eq!(lam.lambda_unsafe(), 8.0);
        assert_eq!(lam.segments(), 2);
    }

    #[test]
    fn exact_split_satisfies_matching() {
        let c_i = DVector::from_vec(vec![1.0, 1.0]);
        let field = rotation_field();
        let ends: Vec<_> = (0..4).map(|i| mat_exp(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), 0.5 * i as f64) * &c_i).collect();
        let c_u = mat_exp(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), 2.0) * &c_i;
        let p = ball_problem(field, c_i, c_u);
        let chi = ShootingVector::new(&ends, &[0.5; 4]).unwrap();
        let c = p.constraints(&chi).unwrap();
        assert!((c[0] + 0.5).abs() < 1e-14);
        assert!(c.rows(1, 6).amax() < 1e-8);
        assert!((c[7] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn boundary_start_zeroes_first_constraint() {
        let c_i = DVector::from_vec(vec![1.0, 1.0]);
        let p = ball_problem(rotation_field(), c_i.clone(), DVector::zeros(2));
        let x0 = &c_i + DVector::from_vec(vec![0.0, 0.25]);
        let chi = ShootingVector::new(&[x0, DVector::zeros(2)], &[0.1, 0.1]).unwrap();
        assert!(p.constraints(&chi).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn linear_jacobian_blocks() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let c_i = DVector::from_vec(vec![1.0, 1.0]);
        let p = ball_problem(rotation_field(), c_i.clone(), DVector::from_vec(vec![-1.0, 0.0]));
        let x1 = &c_i + DVector::from_vec(vec![0.25, 0.0]);
        let chi = ShootingVector::new(
            &[x1, DVector::from_vec(vec![0.2, 0.3]), DVector::from_vec(vec![-0.4, 1.0])],
            &[0.3, 0.7, 1.1],
        )
        .unwrap();
        let jac = p.jacobian(&chi).unwrap();
        assert!((&jac.w1 - DVector::from_vec(vec![4.0, 0.0])).amax() < 1e-14);
        for (i, t) in [0.3, 0.7].into_iter().enumerate() {
            assert!((&jac.m[i] + mat_exp(&a, t).transpose()).amax() < 1e-14);
        }
        // Operator form agrees with the dense assembly.
        let dense = jac.to_dense();
        let lam = DVector::from_fn(jac.ncols(), |i, _| (i as f64 * 0.7).cos());
        let d = DVector::from_fn(jac.nrows(), |i, _| (i as f64 * 1.3).sin());
        assert!((jac.mul(&lam) - &dense * &lam).amax() < 1e-14);
        assert!((jac.tr_mul(&d) - dense.transpose() * &d).amax() < 1e-14);
    }

    #[test]
    fn grad_lagrangian_without_multipliers() {
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let chi = ShootingVector::new(
            &[DVector::from_vec(vec![1.0, 0.5]), DVector::from_vec(vec![0.0, 1.0])],
            &[0.4, 0.9],
        )
        .unwrap();
        let ev = p.evaluate(&chi).unwrap();
        let (gx, gl) = grad_lagrangian(&chi, &Multipliers::zeros(2, 2), &ev.jacobian, &ev.constraints);
        assert_eq!(gx.as_slice(), &[0.0, 0.0, 0.4, 0.0, 0.0, 0.9]);
        assert_eq!(gl, ev.constraints);

        let chi0 = ShootingVector::new(&[DVector::zeros(2), DVector::zeros(2)], &[0.0, 0.0]).unwrap();
        let ev = p.evaluate(&chi0).unwrap();
        let (gx, _) = grad_lagrangian(&chi0, &Multipliers::zeros(2, 2), &ev.jacobian, &ev.constraints);
        assert_eq!(gx.amax(), 0.0);
    }

    #[test]
    fn linear_hessian_structure() {
        // Harmonic block at t = 0 with λ₁ = e₁: v₁ = −Aᵀe₁ = [0, −1].
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let chi = ShootingVector::new(
            &[DVector::from_vec(vec![1.0, 1.0]), DVector::from_vec(vec![0.5, 0.5])],
            &[0.0, 1.0],
        )
        .unwrap();
        let lam = Multipliers::from_flat(2, DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let ev = p.evaluate(&chi).unwrap();
        let h = p.analytic_hessian_linear(&chi, &lam, &ev).unwrap();
        assert!((h.blocks[0][(0, 2)] - 0.0).abs() < 1e-15);
        assert!((h.blocks[0][(1, 2)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn middle_blocks_have_zero_state_part() {
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let states: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2])).collect();
        let chi = ShootingVector::new(&states, &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let lam = Multipliers::from_flat(2, DVector::from_fn(10, |i, _| 1.0 + i as f64)).unwrap();
        let ev = p.evaluate(&chi).unwrap();
        let h = p.analytic_hessian_linear(&chi, &lam, &ev).unwrap();
        for blk in &h.blocks[1..4] {
            assert_eq!(blk.view((0, 0), (2, 2)).amax(), 0.0);
        }
        let mixed = p.analytic_hessian_mixed(&chi, &lam, &ev).unwrap();
        for (a, b) in h.blocks.iter().zip(&mixed.blocks) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_multipliers_leave_objective_curvature() {
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let chi = ShootingVector::new(&vec![DVector::from_vec(vec![1.0, 0.0]); 3], &[0.3, 0.2, 0.1]).unwrap();
        let ev = p.evaluate(&chi).unwrap();
        let h = p.analytic_hessian_mixed(&chi, &Multipliers::zeros(3, 2), &ev).unwrap();
        for blk in &h.blocks {
            let mut expected = DMatrix::zeros(3, 3);
            expected[(2, 2)] = 1.0;
            assert_eq!(blk, &expected);
        }
    }

    #[test]
    fn merit_reduces_to_objective() {
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let chi = ShootingVector::new(&vec![DVector::from_vec(vec![1.0, 0.0]); 2], &[0.3, 0.2]).unwrap();
        let lam = Multipliers::ones(2, 2);
        let d_lam = -lam.as_flat().clone();
        let d = DVector::zeros(6);
        let p0 = p.merit(&chi, &lam, &d_lam, 0.0, 0.0, &d).unwrap();
        assert!((p0 - objective(&chi)).abs() < 1e-15);
    }

    #[test]
    fn merit_slope_degenerate_cases() {
        let p = ball_problem(rotation_field(), DVector::from_vec(vec![1.0, 1.0]), DVector::zeros(2));
        let chi = ShootingVector::new(&vec![DVector::from_vec(vec![1.0, 0.0]); 2], &[0.3, 0.2]).unwrap();
        let ev = p.evaluate(&chi).unwrap();
        let lam = Multipliers::ones(2, 2);
        let zero = DVector::zeros(6);
        let dl = DVector::zeros(4);
        assert_eq!(merit_slope(&lam, &dl, 1.0, &zero, &ev.objective_grad, &ev.jacobian, &ev.constraints), 0.0);
        let d = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let s = merit_slope(&lam, &(-lam.as_flat()), 1.0, &d, &ev.objective_grad, &ev.jacobian, &DVector::zeros(4));
        assert!((s - ev.objective_grad.dot(&d)).abs() < 1e-15);
    }

    #[test]
    fn equal_length_regularization() {
        for n in [2, 5, 10] {
            let t = equal_length_split(5.0, n).unwrap();
            for ti in t.iter() {
                assert!((ti - 5.0 / n as f64).abs() < 1e-10);
            }
        }
    }
}
