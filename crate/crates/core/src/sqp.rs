//! Outer SQP drivers.
//!
//! Line search: the saddle-point system is solved by projected CG, the direction is
//! checked for descent on the merit function (resetting the Hessian to the identity once
//! if it fails), and a backtracking Armijo search picks the step. Trust region:
//! Byrd–Omojokun composite steps with a dog-leg vertical step and a Steihaug–Toint
//! horizontal step, accepted by the ratio of actual to predicted merit reduction.
//!
//! Stop codes: `S1` optimality and feasibility, `S2` iteration cap, `S3` step length or
//! radius below `min_step`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{fd_hessian_with, HessianScheme, QuasiNewtonState};
use crate::kkt::{
    default_inner_tolerance, npcg_solve_with, ConstraintJacobian, ConstraintPreconditioner,
    HessianOperator, NpcgSolution, NpcgStatus, SaddleSystem,
};
use crate::linalg::BlockDiagHessian;
use crate::problem::{merit_slope, Evaluation, Multipliers, Problem, ShootingVector, Verification};
use crate::dynamics::FieldKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    LineSearch,
    TrustRegion,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LineSearch => "line_search",
            Self::TrustRegion => "trust_region",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "line_search" | "ls" => Ok(Self::LineSearch),
            "trust_region" | "tr" => Ok(Self::TrustRegion),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Solver settings. Serialized keys equal the field names, except the Hessian scheme,
/// which is keyed `hessian`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    #[serde(rename = "hessian", alias = "hessian_scheme")]
    pub hessian_scheme: HessianScheme,
    pub max_iter: usize,
    pub tol_grad: f64,
    pub tol_feas: f64,
    pub min_step: f64,
    pub sigma: f64,
    pub armijo_delta: f64,
    pub descent_coeff: f64,
    pub dogleg_theta: f64,
    pub tr_radius0: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::LineSearch,
            hessian_scheme: HessianScheme::Bfgs,
            max_iter: 400,
            tol_grad: 1e-3,
            tol_feas: 1e-8,
            min_step: 1e-8,
            sigma: 1.0,
            armijo_delta: 1e-4,
            descent_coeff: 1e-5,
            dogleg_theta: 0.8,
            tr_radius0: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, hessian_scheme: HessianScheme) -> Self {
        Self { method, hessian_scheme, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_grad", self.tol_grad),
            ("tol_feas", self.tol_feas),
            ("min_step", self.min_step),
            ("armijo_delta", self.armijo_delta),
            ("descent_coeff", self.descent_coeff),
            ("tr_radius0", self.tr_radius0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.dogleg_theta > 0.0 && self.dogleg_theta < 1.0) {
            return Err(Error::Config(format!(
                "dogleg_theta must lie in (0, 1), got {}",
                self.dogleg_theta
            )));
        }
        Ok(())
    }
}

/// Trust-region acceptance threshold on `ρ`.
pub const TR_ETA: f64 = 1e-3;
/// Upper bound on the trust-region radius.
pub const TR_MAX_RADIUS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCode {
    S1,
    S2,
    S3,
    /// Integration failure or rank-deficient Jacobian.
    Abort,
}

impl StopCode {
    /// Table notation: `1`, `2`, `3`; aborts print as `A`.
    pub fn table_code(self) -> &'static str {
        match self {
            Self::S1 => "1",
            Self::S2 => "2",
            Self::S3 => "3",
            Self::Abort => "A",
        }
    }
}

impl fmt::Display for StopCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::Abort => "abort",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoglegBranch {
    /// `c` (hence `Bc`) vanished.
    Zero,
    Cauchy,
    Interpolated,
    Newton,
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub grad_norm: f64,
    pub feas_norm: f64,
    /// `P(0)` for line search, the penalty merit at the current iterate for trust region.
    pub merit: f64,
    /// Merit after the step (equal to `merit` for rejected trust-region steps).
    pub merit_new: f64,
    /// Line-search step length `α`, or `‖d‖` for trust region.
    pub step: f64,
    pub accepted: bool,
    pub restarted: bool,
    pub fallback: bool,
    pub inner_iterations: usize,
    pub inner_status: Option<NpcgStatus>,
    /// `‖Bᵀd_χ + c‖` of the projected-CG direction.
    pub linearized_feasibility: Option<f64>,
    pub radius: Option<f64>,
    pub rho: Option<f64>,
    pub vertical_norm: Option<f64>,
    pub vertical_branch: Option<DoglegBranch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub nit: usize,
    pub stop_code: StopCode,
    pub verified: bool,
    pub grad_norm: f64,
    pub feas_norm: f64,
    pub restarts: usize,
    pub fallbacks: usize,
    pub skipped_updates: usize,
    pub final_chi: ShootingVector,
    pub final_lambda: Multipliers,
    pub verification: Option<Verification>,
    pub abort_reason: Option<String>,
    /// `max tᵢ − min tᵢ` at the final iterate.
    pub duration_spread: f64,
    pub trace: Vec<IterationRecord>,
}

/// Current point with its evaluation.
#[derive(Clone)]
struct Iterate {
    chi: ShootingVector,
    lambda: Multipliers,
    eval: Evaluation,
    grad_l: DVector<f64>,
}

impl Iterate {
    fn new(problem: &Problem, chi: ShootingVector, lambda: Multipliers) -> Result<Self> {
        let eval = problem.evaluate(&chi)?;
        let grad_l = &eval.objective_grad + eval.jacobian.mul(lambda.as_flat());
        Ok(Self { chi, lambda, eval, grad_l })
    }

    fn with_lambda(&mut self, lambda: Multipliers) {
        self.grad_l = &self.eval.objective_grad + self.eval.jacobian.mul(lambda.as_flat());
        self.lambda = lambda;
    }

    fn grad_norm(&self) -> f64 {
        self.grad_l.norm()
    }

    fn feas_norm(&self) -> f64 {
        self.eval.constraints.norm()
    }
}

/// Dog-leg step for `min ‖Bᵀd + c‖` inside `‖d‖ ≤ ϑΔ`.
#[derive(Debug, Clone)]
pub struct VerticalStep {
    pub d: DVector<f64>,
    pub branch: DoglegBranch,
    pub cauchy: DVector<f64>,
    pub newton: DVector<f64>,
}

/// Dog-leg vertical step:
/// `dᶜ = −(‖Bc‖²/‖BᵀBc‖²) Bc`, `dᴺ = −B(BᵀB)⁻¹c`, truncated to the radius `ϑΔ`.
pub fn dogleg_vertical(
    pre: &ConstraintPreconditioner<'_>,
    c: &DVector<f64>,
    delta: f64,
    theta: f64,
) -> VerticalStep {
    let b = pre.jacobian();
    let bc = b.mul(c);
    let newton = pre.min_norm_step(c);
    let bc_sq = bc.norm_squared();
    if bc_sq == 0.0 {
        let z = DVector::zeros(bc.len());
        return VerticalStep { d: z.clone(), branch: DoglegBranch::Zero, cauchy: z, newton };
    }
    let btbc = b.tr_mul(&bc);
    let cauchy = &bc * (-bc_sq / btbc.norm_squared());
    let radius = theta * delta;
    let nc = cauchy.norm();
    let (d, branch) = if nc >= radius {
        (&cauchy * (radius / nc), DoglegBranch::Cauchy)
    } else if radius < newton.norm() {
        let diff = &newton - &cauchy;
        let ctd = cauchy.dot(&diff);
        // ‖dᶜ + α(dᴺ − dᶜ)‖ = ϑΔ; the unit-coefficient form is exact when ‖dᴺ − dᶜ‖ = 1,
        // so normalize the quadratic by ‖dᴺ − dᶜ‖².
        let dd = diff.norm_squared();
        let alpha = (-ctd + (ctd * ctd + dd * (radius * radius - nc * nc)).sqrt()) / dd;
        (&cauchy + &diff * alpha, DoglegBranch::Interpolated)
    } else {
        (newton.clone(), DoglegBranch::Newton)
    };
    VerticalStep { d, branch, cauchy, newton }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizontalStatus {
    Converged,
    Boundary,
    NonpositiveCurvature,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct HorizontalStep {
    pub d: DVector<f64>,
    pub status: HorizontalStatus,
    pub iterations: usize,
}

fn boundary_tau(base: &DVector<f64>, p: &DVector<f64>, delta: f64) -> f64 {
    let a = p.norm_squared();
    let b = base.dot(p);
    let c = base.norm_squared() - delta * delta;
    let disc = (b * b - a * c).max(0.0).sqrt();
    // Positive root, written to avoid cancellation.
    if b >= 0.0 {
        -c / (b + disc)
    } else {
        (disc - b) / a
    }
}

/// Steihaug–Toint CG for `min (g + H d_v)ᵀ d + ½ dᵀ H d` over `Bᵀd = 0`,
/// `‖d_v + d‖ ≤ Δ`, with the constraint preconditioner as projector.
pub fn steihaug_horizontal(
    hessian: &dyn HessianOperator,
    pre: &ConstraintPreconditioner<'_>,
    grad: &DVector<f64>,
    delta: f64,
    vertical: &DVector<f64>,
    max_it: usize,
) -> HorizontalStep {
    let mut z = DVector::zeros(grad.len());
    let mut r = grad + hessian.apply(vertical);
    let (mut g, _) = pre.solve(&r);
    let g0 = g.norm();
    if g0 <= 1e-14 * r.norm().max(f64::MIN_POSITIVE) || g0 == 0.0 {
        return HorizontalStep { d: z, status: HorizontalStatus::Converged, iterations: 0 };
    }
    let tol = default_inner_tolerance(g0) * g0;
    let mut p = -&g;
    let mut rg = r.dot(&g);
    for it in 0..max_it {
        let hp = hessian.apply(&p);
        let kappa = p.dot(&hp);
        let base = vertical + &z;
        if kappa <= 1e-14 * p.norm_squared() {
            let tau = boundary_tau(&base, &p, delta);
            z.axpy(tau, &p, 1.0);
            return HorizontalStep {
                d: z,
                status: HorizontalStatus::NonpositiveCurvature,
                iterations: it + 1,
            };
        }
        let alpha = rg / kappa;
        if (&base + &p * alpha).norm() >= delta {
            let tau = boundary_tau(&base, &p, delta);
            z.axpy(tau, &p, 1.0);
            return HorizontalStep { d: z, status: HorizontalStatus::Boundary, iterations: it + 1 };
        }
        z.axpy(alpha, &p, 1.0);
        r.axpy(alpha, &hp, 1.0);
        (g, _) = pre.solve(&r);
        if g.norm() <= tol {
            return HorizontalStep { d: z, status: HorizontalStatus::Converged, iterations: it + 1 };
        }
        let rg_new = r.dot(&g);
        p = -&g + p * (rg_new / rg);
        rg = rg_new;
    }
    HorizontalStep { d: z, status: HorizontalStatus::IterationLimit, iterations: max_it }
}

/// Runs SQP from `(chi0, lambda0)` and verifies the final iterate by simulation.
pub fn solve(
    problem: &Problem,
    chi0: ShootingVector,
    lambda0: Multipliers,
    config: &SolverConfig,
) -> RunReport {
    match SolverState::new(problem, chi0.clone(), lambda0.clone(), config) {
        Ok(state) => state.run(),
        Err(e) => {
            let verification = problem.verify(&chi0);
            RunReport {
                nit: 0,
                stop_code: StopCode::Abort,
                verified: false,
                grad_norm: f64::NAN,
                feas_norm: f64::NAN,
                restarts: 0,
                fallbacks: 0,
                skipped_updates: 0,
                duration_spread: spread(&chi0),
                final_chi: chi0,
                final_lambda: lambda0,
                verification: Some(verification),
                abort_reason: Some(e.to_string()),
                trace: Vec::new(),
            }
        }
    }
}

fn spread(chi: &ShootingVector) -> f64 {
    let t = chi.durations();
    t.iter().copied().fold(f64::NEG_INFINITY, f64::max) - t.iter().copied().fold(f64::INFINITY, f64::min)
}

/// One solver run: the current iterate, the Hessian approximation, the trust-region
/// radius and the trace. [`solve`] drives it to a stop code; the step methods are exposed
/// for inspection and testing.
pub struct SolverState<'a> {
    problem: &'a Problem,
    config: &'a SolverConfig,
    current: Iterate,
    /// Quasi-Newton blocks; ignored by the `fd` and `analytic` schemes.
    pub hessian: QuasiNewtonState,
    trace: Vec<IterationRecord>,
    fallbacks: usize,
    radius: f64,
    penalty: f64,
    nit: usize,
}

enum Step {
    Next(Iterate),
    /// Step length or radius underflow.
    Stalled(Iterate),
}

impl<'a> SolverState<'a> {
    pub fn new(
        problem: &'a Problem,
        chi: ShootingVector,
        lambda: Multipliers,
        config: &'a SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        let hessian = QuasiNewtonState::new(config.hessian_scheme, chi.segments(), chi.n());
        let current = Iterate::new(problem, chi, lambda)?;
        Ok(Self {
            problem,
            config,
            current,
            hessian,
            trace: Vec::new(),
            fallbacks: 0,
            radius: config.tr_radius0,
            penalty: config.sigma,
            nit: 0,
        })
    }

    pub fn chi(&self) -> &ShootingVector {
        &self.current.chi
    }

    pub fn lambda(&self) -> &Multipliers {
        &self.current.lambda
    }

    /// `‖∇_χL(χ, λ)‖`.
    pub fn grad_norm(&self) -> f64 {
        self.current.grad_norm()
    }

    /// `‖c(χ)‖`.
    pub fn feas_norm(&self) -> f64 {
        self.current.feas_norm()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn nit(&self) -> usize {
        self.nit
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    /// The `S1` test.
    pub fn converged(&self) -> bool {
        self.grad_norm() < self.config.tol_grad && self.feas_norm() < self.config.tol_feas
    }

    /// One line-search iteration; `Ok(false)` when the step length underflowed.
    pub fn line_search_step(&mut self) -> Result<bool> {
        let it = self.current.clone();
        let step = self.ls_step(&it, self.nit);
        self.advance(step)
    }

    /// One trust-region iteration; `Ok(false)` when the radius underflowed.
    pub fn tr_step(&mut self) -> Result<bool> {
        let it = self.current.clone();
        let step = self.trust_region_step(&it, self.nit);
        self.advance(step)
    }

    fn advance(&mut self, step: Result<Step>) -> Result<bool> {
        self.nit += 1;
        match step? {
            Step::Next(next) => {
                self.current = next;
                Ok(true)
            }
            Step::Stalled(same) => {
                self.current = same;
                Ok(false)
            }
        }
    }

    /// Iterates to a stop code and verifies the final iterate.
    pub fn run(mut self) -> RunReport {
        let mut abort_reason = None;
        let stop = loop {
            if self.converged() {
                break StopCode::S1;
            }
            if self.nit >= self.config.max_iter {
                break StopCode::S2;
            }
            let step = match self.config.method {
                Method::LineSearch => self.line_search_step(),
                Method::TrustRegion => self.tr_step(),
            };
            match step {
                Ok(true) => {}
                Ok(false) => break StopCode::S3,
                Err(e) => {
                    abort_reason = Some(e.to_string());
                    break StopCode::Abort;
                }
            }
        };
        let verification = self.problem.verify(&self.current.chi);
        RunReport {
            nit: self.nit,
            stop_code: stop,
            verified: verification.verified,
            grad_norm: self.current.grad_norm(),
            feas_norm: self.current.feas_norm(),
            restarts: self.hessian.reset_count,
            fallbacks: self.fallbacks,
            skipped_updates: self.hessian.skip_count,
            duration_spread: spread(&self.current.chi),
            final_chi: self.current.chi,
            final_lambda: self.current.lambda,
            verification: Some(verification),
            abort_reason,
            trace: self.trace,
        }
    }

    /// Approximation or exact Hessian for the configured scheme.
    fn hessian_at(&self, it: &Iterate) -> Result<BlockDiagHessian> {
        match self.config.hessian_scheme {
            HessianScheme::Bfgs | HessianScheme::Sr1 => Ok(self.hessian.blocks.clone()),
            HessianScheme::Fd => fd_hessian_with(self.problem, &it.chi, &it.lambda, &it.eval),
            HessianScheme::Analytic => match self.problem.field.kind() {
                FieldKind::Linear(_) => self.problem.analytic_hessian_linear(&it.chi, &it.lambda, &it.eval),
                FieldKind::Nonlinear => self.problem.analytic_hessian_mixed(&it.chi, &it.lambda, &it.eval),
            },
        }
    }

    /// `s = χ⁺ − χ`, `y = ∇_χL(χ⁺, λ⁺) − ∇_χL(χ, λ⁺)`.
    fn secant_update(&mut self, old: &Iterate, new: &Iterate) {
        if !self.config.hessian_scheme.is_quasi_newton() {
            return;
        }
        let s = new.chi.as_flat() - old.chi.as_flat();
        let old_grad = &old.eval.objective_grad + old.eval.jacobian.mul(new.lambda.as_flat());
        let y = &new.grad_l - old_grad;
        self.hessian.update(&s, &y);
    }

    fn solve_direction(
        &self,
        it: &Iterate,
        h: &BlockDiagHessian,
        pre: &ConstraintPreconditioner<'_>,
    ) -> Result<(NpcgSolution, f64)> {
        let sys = SaddleSystem {
            hessian: h,
            jacobian: &it.eval.jacobian,
            rhs_x: -&it.grad_l,
            rhs_l: -&it.eval.constraints,
        };
        let d0 = pre.min_norm_step(&it.eval.constraints);
        let (g0, _) = pre.solve(&(h.mul_vec(&d0) + &it.grad_l));
        let tol = default_inner_tolerance(g0.norm());
        let sol = npcg_solve_with(&sys, pre, 2 * it.chi.len(), tol)?;
        let slope = merit_slope(
            &it.lambda,
            &sol.d_lambda,
            self.config.sigma,
            &sol.d_chi,
            &it.eval.objective_grad,
            &it.eval.jacobian,
            &it.eval.constraints,
        );
        Ok((sol, slope))
    }

    fn is_descent(&self, slope: f64, d: &DVector<f64>, grad_l: &DVector<f64>) -> bool {
        slope < 0.0 && -slope >= self.config.descent_coeff * d.norm() * grad_l.norm()
    }

    fn ls_step(&mut self, it: &Iterate, iter: usize) -> Result<Step> {
        let pre = ConstraintPreconditioner::new(&it.eval.jacobian)?;
        let h = self.hessian_at(it)?;
        let (mut sol, mut slope) = self.solve_direction(it, &h, &pre)?;
        let mut restarted = false;
        let mut fallback = false;
        let c = &it.eval.constraints;
        let lin_feas = (it.eval.jacobian.tr_mul(&sol.d_chi) + c).norm();
        let mut record = IterationRecord {
            iter,
            grad_norm: it.grad_norm(),
            feas_norm: it.feas_norm(),
            merit: f64::NAN,
            merit_new: f64::NAN,
            step: 0.0,
            accepted: false,
            restarted: false,
            fallback: false,
            inner_iterations: sol.iterations,
            inner_status: Some(sol.status),
            linearized_feasibility: Some(lin_feas),
            radius: None,
            rho: None,
            vertical_norm: None,
            vertical_branch: None,
        };

        let tiny = 1e-12 * it.chi.as_flat().norm().max(1.0);
        if sol.status == NpcgStatus::Converged && sol.d_chi.norm() <= tiny {
            // Already stationary in χ: only the multipliers move.
            let lambda = Multipliers::from_flat(it.chi.n(), it.lambda.as_flat() + &sol.d_lambda)?;
            let mut next = it.clone();
            next.with_lambda(lambda);
            record.accepted = true;
            record.step = 1.0;
            self.trace.push(record);
            return Ok(Step::Next(next));
        }

        if !self.is_descent(slope, &sol.d_chi, &it.grad_l) {
            restarted = true;
            self.hessian.reset_identity();
            let eye = BlockDiagHessian::identity(it.chi.segments(), it.chi.n());
            (sol, slope) = self.solve_direction(it, &eye, &pre)?;
            if !self.is_descent(slope, &sol.d_chi, &it.grad_l) {
                // Steepest descent on the merit with the multiplier estimate frozen.
                fallback = true;
                self.fallbacks += 1;
                let lam = it.lambda.as_flat() + &sol.d_lambda;
                let g = &it.eval.objective_grad
                    + it.eval.jacobian.mul(&(lam + c * self.config.sigma));
                slope = -g.norm_squared();
                sol.d_chi = -g;
            }
        }
        record.restarted = restarted;
        record.fallback = fallback;

        let lam_plus = it.lambda.as_flat() + &sol.d_lambda;
        let p0 = it.eval.objective + lam_plus.dot(c) + 0.5 * self.config.sigma * c.norm_squared();
        record.merit = p0;
        let mut alpha = 1.0;
        let accepted = loop {
            if alpha < self.config.min_step || slope >= 0.0 {
                break None;
            }
            let p = self
                .problem
                .merit(&it.chi, &it.lambda, &sol.d_lambda, self.config.sigma, alpha, &sol.d_chi)
                .unwrap_or(f64::INFINITY);
            if p.is_finite() && p - p0 <= self.config.armijo_delta * alpha * slope {
                break Some(p);
            }
            alpha *= 0.5;
        };
        let Some(p_new) = accepted else {
            record.step = alpha;
            self.trace.push(record);
            return Ok(Step::Stalled(it.clone()));
        };
        record.accepted = true;
        record.step = alpha;
        record.merit_new = p_new;
        self.trace.push(record);

        let chi = it.chi.stepped(alpha, &sol.d_chi);
        let lambda = Multipliers::from_flat(it.chi.n(), lam_plus)?;
        let next = Iterate::new(self.problem, chi, lambda)?;
        self.secant_update(it, &next);
        Ok(Step::Next(next))
    }

    fn trust_region_step(&mut self, it: &Iterate, iter: usize) -> Result<Step> {
        let pre = ConstraintPreconditioner::new(&it.eval.jacobian)?;
        let h = self.hessian_at(it)?;
        let c = &it.eval.constraints;
        let delta = self.radius;
        let vertical = dogleg_vertical(&pre, c, delta, self.config.dogleg_theta);
        let horizontal = steihaug_horizontal(&h, &pre, &it.grad_l, delta, &vertical.d, 2 * it.chi.len());
        let d = &vertical.d + &horizontal.d;

        let q = it.grad_l.dot(&d) + 0.5 * h.quad_form(&d);
        let lin = it.eval.jacobian.tr_mul(&d) + c;
        let fr = 0.5 * (c.norm_squared() - lin.norm_squared());
        if q > 0.0 && fr > 0.0 {
            self.penalty = self.penalty.max(2.0 * q / fr);
        }
        let pred = -q + self.penalty * fr;
        let phi = |f: f64, cc: &DVector<f64>| f + it.lambda.as_flat().dot(cc) + 0.5 * self.penalty * cc.norm_squared();
        let phi0 = phi(it.eval.objective, c);

        let mut record = IterationRecord {
            iter,
            grad_norm: it.grad_norm(),
            feas_norm: it.feas_norm(),
            merit: phi0,
            merit_new: phi0,
            step: d.norm(),
            accepted: false,
            restarted: false,
            fallback: false,
            inner_iterations: horizontal.iterations,
            inner_status: None,
            linearized_feasibility: None,
            radius: Some(delta),
            rho: None,
            vertical_norm: Some(vertical.d.norm()),
            vertical_branch: Some(vertical.branch),
        };

        if !(pred > 0.0) {
            // Degenerate model: refresh the multipliers by least squares and keep χ.
            let (_, v) = pre.solve(&it.grad_l);
            let lambda = Multipliers::from_flat(it.chi.n(), it.lambda.as_flat() - v)?;
            let mut next = it.clone();
            next.with_lambda(lambda);
            self.trace.push(record);
            self.radius *= 0.25;
            if self.radius < self.config.min_step {
                return Ok(Step::Stalled(next));
            }
            return Ok(Step::Next(next));
        }

        let trial = it.chi.stepped(1.0, &d);
        let ared = match self.problem.constraints(&trial) {
            Ok(ct) => phi0 - phi(crate::problem::objective(&trial), &ct),
            Err(_) => f64::NEG_INFINITY,
        };
        let rho = ared / pred;
        record.rho = Some(rho);
        record.merit_new = phi0 - ared;
        let on_boundary = d.norm() >= 0.99 * delta;
        if rho < 0.25 {
            self.radius = 0.25 * delta;
        } else if rho > 0.75 && on_boundary {
            self.radius = (2.0 * delta).min(TR_MAX_RADIUS);
        }
        if rho > TR_ETA {
            record.accepted = true;
            self.trace.push(record);
            let mut next = Iterate::new(self.problem, trial, it.lambda.clone())?;
            // Least-squares multipliers at χ⁺: λ⁺ = λ + d_λ with d_λ = −v.
            let pre_next = ConstraintPreconditioner::new(&next.eval.jacobian)?;
            let (_, v) = pre_next.solve(&next.grad_l);
            let lambda = Multipliers::from_flat(it.chi.n(), it.lambda.as_flat() - v)?;
            next.with_lambda(lambda);
            self.secant_update(it, &next);
            return Ok(Step::Next(next));
        }
        self.trace.push(record);
        let same = it.clone();
        if self.radius < self.config.min_step {
            return Ok(Step::Stalled(same));
        }
        Ok(Step::Next(same))
    }
}
