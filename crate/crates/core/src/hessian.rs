//! Block-wise approximations of `∇²_χ L`.
//!
//! Each block of order `n + 1` couples one segment's initial state with its duration;
//! quasi-Newton pairs are split along the same blocks and each block is updated
//! independently.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_along, FieldKind, StepSequence};
use crate::error::{dim_check, Error, Result};
use crate::linalg::BlockDiagHessian;
use crate::problem::{Evaluation, Multipliers, Problem, ShootingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianScheme {
    #[default]
    Bfgs,
    Sr1,
    /// Central differences of the Lagrangian gradient, block-diagonal.
    Fd,
    /// Closed-form blocks (exact for linear fields, mixed closed-form/difference otherwise).
    Analytic,
}

impl HessianScheme {
    pub fn is_quasi_newton(self) -> bool {
        matches!(self, Self::Bfgs | Self::Sr1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bfgs => "bfgs",
            Self::Sr1 => "sr1",
            Self::Fd => "fd",
            Self::Analytic => "analytic",
        }
    }
}

impl fmt::Display for HessianScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HessianScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bfgs" => Ok(Self::Bfgs),
            "sr1" | "sr-1" => Ok(Self::Sr1),
            "fd" => Ok(Self::Fd),
            "analytic" => Ok(Self::Analytic),
            other => Err(Error::Config(format!("unknown hessian scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated,
    Skipped,
}

/// Relative threshold of the BFGS curvature test and the SR-1 denominator test.
pub const SKIP_THRESHOLD: f64 = 1e-8;

/// `H⁺ = H − (Hs)(Hs)ᵀ/(sᵀHs) + yyᵀ/(yᵀs)`, skipped unless `yᵀs ≥ 1e−8 ‖s‖‖y‖`.
pub fn bfgs_update_block(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> UpdateOutcome {
    let ys = y.dot(s);
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if !(ys >= SKIP_THRESHOLD * s.norm() * y.norm()) || ys == 0.0 || !(shs > 0.0) {
        return UpdateOutcome::Skipped;
    }
    h.ger(-1.0 / shs, &hs, &hs, 1.0);
    h.ger(1.0 / ys, y, y, 1.0);
    let sym = (&*h + h.transpose()) * 0.5;
    *h = sym;
    UpdateOutcome::Updated
}

/// `H⁺ = H + rrᵀ/(rᵀs)` with `r = y − Hs`, skipped unless `|rᵀs| ≥ 1e−8 ‖s‖‖r‖`.
pub fn sr1_update_block(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> UpdateOutcome {
    let r = y - &*h * s;
    let rs = r.dot(s);
    if !(rs.abs() >= SKIP_THRESHOLD * s.norm() * r.norm()) || rs == 0.0 {
        return UpdateOutcome::Skipped;
    }
    h.ger(1.0 / rs, &r, &r, 1.0);
    let sym = (&*h + h.transpose()) * 0.5;
    *h = sym;
    UpdateOutcome::Updated
}

/// Hessian approximation owned by one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiNewtonState {
    pub blocks: BlockDiagHessian,
    pub scheme: HessianScheme,
    pub skip_count: usize,
    pub update_count: usize,
    pub reset_count: usize,
}

impl QuasiNewtonState {
    pub fn new(scheme: HessianScheme, segments: usize, n: usize) -> Self {
        Self {
            blocks: BlockDiagHessian::identity(segments, n),
            scheme,
            skip_count: 0,
            update_count: 0,
            reset_count: 0,
        }
    }

    /// Every block becomes the identity.
    pub fn reset_identity(&mut self) {
        let k = self.blocks.block_order();
        for b in &mut self.blocks.blocks {
            *b = DMatrix::identity(k, k);
        }
        self.reset_count += 1;
    }

    /// Applies the scheme's secant update block by block. No-op for `fd`/`analytic`.
    pub fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let update = match self.scheme {
            HessianScheme::Bfgs => bfgs_update_block,
            HessianScheme::Sr1 => sr1_update_block,
            HessianScheme::Fd | HessianScheme::Analytic => return,
        };
        let k = self.blocks.block_order();
        for (i, blk) in self.blocks.blocks.iter_mut().enumerate() {
            let si = s.rows(i * k, k).into_owned();
            let yi = y.rows(i * k, k).into_owned();
            if si.iter().all(|v| *v == 0.0) {
                continue;
            }
            match update(blk, &si, &yi) {
                UpdateOutcome::Updated => self.update_count += 1,
                UpdateOutcome::Skipped => self.skip_count += 1,
            }
        }
    }
}

/// Gradient of the Lagrangian restricted to block `i`, evaluated at `(x0, t)` in place of
/// `(x₀ⁱ, tᵢ)`. Nonlinear flows replay `mesh` stretched to `t`.
fn block_gradient(
    problem: &Problem,
    segments: usize,
    lambda: &Multipliers,
    i: usize,
    x0: &DVector<f64>,
    t: f64,
    mesh: &StepSequence,
) -> Result<DVector<f64>> {
    let n = problem.n();
    let (endpoint, rate, s) = match problem.field.kind() {
        FieldKind::Linear(_) => {
            let seg = problem.segment(x0, t, true)?;
            (seg.endpoint, seg.rate, seg.sensitivity.unwrap())
        }
        FieldKind::Nonlinear => {
            let r = flow_along(problem.field.as_ref(), x0, &mesh.rescaled(t), true)?;
            let rate = problem.field.eval(&r.endpoint);
            (r.endpoint, rate, r.sensitivity.unwrap())
        }
    };
    let mut g = DVector::zeros(n + 1);
    g[n] = t;
    if i == 0 {
        let w = &problem.init.shape * (x0 - &problem.init.center) * lambda.lambda_init();
        let mut gx = g.rows_mut(0, n);
        gx += &w;
    }
    if i + 1 < segments {
        let li = lambda.lambda_match(i);
        let sx = s.tr_mul(&li);
        let mut gx = g.rows_mut(0, n);
        gx -= &sx;
        g[n] -= rate.dot(&li);
    }
    if i + 1 == segments {
        let lu = lambda.lambda_unsafe();
        let r = &problem.unsafe_set.shape * (&endpoint - &problem.unsafe_set.center);
        let mut gx = g.rows_mut(0, n);
        gx += s.tr_mul(&r) * lu;
        g[n] += lu * rate.dot(&r);
    }
    Ok(g)
}

/// Block-diagonal central-difference Hessian of the Lagrangian, symmetrized.
pub fn fd_hessian(problem: &Problem, chi: &ShootingVector, lambda: &Multipliers) -> Result<BlockDiagHessian> {
    let meshes = (0..chi.segments())
        .map(|i| Ok(problem.segment(&chi.state_owned(i), chi.duration(i), true)?.steps))
        .collect::<Result<Vec<_>>>()?;
    fd_hessian_on_meshes(problem, chi, lambda, &meshes)
}

/// [`fd_hessian`] reusing the meshes already recorded in `eval`.
pub fn fd_hessian_with(
    problem: &Problem,
    chi: &ShootingVector,
    lambda: &Multipliers,
    eval: &Evaluation,
) -> Result<BlockDiagHessian> {
    let meshes: Vec<_> = eval.segments.iter().map(|s| s.steps.clone()).collect();
    fd_hessian_on_meshes(problem, chi, lambda, &meshes)
}

fn fd_hessian_on_meshes(
    problem: &Problem,
    chi: &ShootingVector,
    lambda: &Multipliers,
    meshes: &[StepSequence],
) -> Result<BlockDiagHessian> {
    let n = problem.n();
    let big_n = chi.segments();
    dim_check(chi.n() == n && meshes.len() == big_n, || "fd_hessian: dimension mismatch".into())?;
    let mut h = BlockDiagHessian::zeros(big_n, n);
    for i in 0..big_n {
        let x0 = chi.state_owned(i);
        let t = chi.duration(i);
        let blk = &mut h.blocks[i];
        for j in 0..=n {
            let (gp, gm, step) = if j < n {
                let step = 1e-5 * x0[j].abs().max(1.0);
                let mut xp = x0.clone();
                xp[j] += step;
                let gp = block_gradient(problem, big_n, lambda, i, &xp, t, &meshes[i])?;
                xp[j] = x0[j] - step;
                let gm = block_gradient(problem, big_n, lambda, i, &xp, t, &meshes[i])?;
                (gp, gm, step)
            } else {
                let step = 1e-5 * t.abs().max(1.0);
                let gp = block_gradient(problem, big_n, lambda, i, &x0, t + step, &meshes[i])?;
                let gm = block_gradient(problem, big_n, lambda, i, &x0, t - step, &meshes[i])?;
                (gp, gm, step)
            };
            blk.set_column(j, &((gp - gm) / (2.0 * step)));
        }
    }
    h.symmetrize();
    Ok(h)
}
