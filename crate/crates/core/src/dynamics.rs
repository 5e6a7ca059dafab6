//! Right-hand sides of autonomous ODEs `ẋ = f(x)`, their numerical flow `Φ(t, x₀)`,
//! and the sensitivity `S(t, x₀) = ∂Φ(t, x₀)/∂x₀`.
//!
//! Integration uses the Dormand–Prince 5(4) embedded pair with FSAL and a standard
//! step-size controller. Sensitivities come either from the variational equation
//! `Ṡ = (∂f/∂x) S, S(0) = I`, integrated jointly with the state, or from forward
//! differences along the accepted step sequence of the nominal trajectory (internal
//! differentiation), which keeps the perturbed maps smooth in `x₀`.
//!
//! Negative times integrate backward.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

/// Tag returned by [`VectorField::kind`].
#[derive(Debug, Clone, Copy)]
pub enum FieldKind<'a> {
    /// `f(x) = A x`.
    Linear(&'a DMatrix<f64>),
    Nonlinear,
}

/// A continuously differentiable autonomous right-hand side.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `∂f/∂x` at `x`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn kind(&self) -> FieldKind<'_> {
        FieldKind::Nonlinear
    }

    /// Writes `f(x)` into `out`. The default allocates; implementors on hot paths override it.
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let fx = self.eval(&DVector::from_column_slice(x));
        out.copy_from_slice(fx.as_slice());
    }
}

/// `ẋ = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    a: DMatrix<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        dim_check(a.is_square() && a.nrows() > 0, || {
            format!("linear field needs a non-empty square matrix, got {}x{}", a.nrows(), a.ncols())
        })?;
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Parses a plain-text matrix: one whitespace-separated row per line, all rows of equal
    /// length. Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| {
                        Error::MatrixFile(format!("line {}: `{tok}`: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::MatrixFile(format!(
                        "line {}: expected {} entries, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        let n = rows.len();
        if n == 0 {
            return Err(Error::MatrixFile("no rows".into()));
        }
        if rows[0].len() != n {
            return Err(Error::MatrixFile(format!(
                "matrix must be square, got {}x{}",
                n,
                rows[0].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn kind(&self) -> FieldKind<'_> {
        FieldKind::Linear(&self.a)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.a.nrows();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.a[(i, j)] * x[j]).sum();
        }
    }
}

/// Integrator tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { abs_tol: 1e-10, rel_tol: 1e-8 }
    }
}

impl Tolerances {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Self {
        Self { abs_tol, rel_tol }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    #[default]
    Variational,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub endpoint: DVector<f64>,
    pub sensitivity: Option<DMatrix<f64>>,
    pub steps_taken: usize,
}

/// Accepted (signed) step sizes of an adaptive run, replayable with [`flow_along`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepSequence(pub Vec<f64>);

impl StepSequence {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// The same relative mesh stretched to cover `t` instead of `self.total()`.
    /// An empty sequence becomes the single step `t`.
    pub fn rescaled(&self, t: f64) -> StepSequence {
        let total = self.total();
        if self.0.is_empty() || total == 0.0 {
            return if t == 0.0 { StepSequence::default() } else { StepSequence(vec![t]) };
        }
        let factor = t / total;
        StepSequence(self.0.iter().map(|h| h * factor).collect())
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b5 - b4 (embedded fourth-order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS: usize = 200_000;

/// One Dormand–Prince stage sweep over a flat state.
struct Stepper<F> {
    rhs: F,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64])> Stepper<F> {
    fn new(rhs: F, dim: usize) -> Self {
        Self {
            rhs,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    /// Assumes `k[0] = f(y)`. Writes the fifth-order solution into `y_new` and leaves
    /// `k[6] = f(y_new)`.
    fn step(&mut self, y: &[f64], h: f64, y_new: &mut [f64]) {
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..y.len() {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        (self.rhs)(tmp, k2);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        (self.rhs)(tmp, k3);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        (self.rhs)(tmp, k4);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        (self.rhs)(tmp, k5);
        for i in 0..y.len() {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        (self.rhs)(tmp, k6);
        for i in 0..y.len() {
            y_new[i] =
                y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        (self.rhs)(y_new, k7);
    }

    fn error_norm(&self, y: &[f64], y_new: &[f64], h: f64, tol: Tolerances) -> f64 {
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let mut acc = 0.0;
        for i in 0..y.len() {
            let err =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = tol.abs_tol + tol.rel_tol * y[i].abs().max(y_new[i].abs());
            acc += (err / scale).powi(2);
        }
        (acc / y.len() as f64).sqrt()
    }
}

fn wrms(v: &[f64], y: &[f64], tol: Tolerances) -> f64 {
    let acc: f64 = v
        .iter()
        .zip(y)
        .map(|(vi, yi)| (vi / (tol.abs_tol + tol.rel_tol * yi.abs())).powi(2))
        .sum();
    (acc / v.len() as f64).sqrt()
}

/// Adaptive integration of `ẏ = rhs(y)` over signed time `t`. Returns the endpoint and
/// the accepted step sequence.
fn integrate_adaptive<F>(rhs: F, y0: &[f64], t: f64, tol: Tolerances) -> Result<(Vec<f64>, StepSequence)>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let dim = y0.len();
    let mut y = y0.to_vec();
    if t == 0.0 || dim == 0 {
        return Ok((y, StepSequence::default()));
    }
    if !t.is_finite() {
        return Err(Error::Integration { last_time: 0.0, reason: "non-finite horizon".into() });
    }
    let dir = t.signum();
    let span = t.abs();
    let mut st = Stepper::new(rhs, dim);
    (st.rhs)(&y, &mut st.k[0]);

    // Initial step (Hairer, Nørsett & Wanner, II.4).
    let d0 = wrms(&y, &y, tol);
    let d1 = wrms(&st.k[0], &y, tol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);
    {
        let probe: Vec<f64> = y.iter().zip(&st.k[0]).map(|(yi, ki)| yi + dir * h * ki).collect();
        let mut f1 = vec![0.0; dim];
        (st.rhs)(&probe, &mut f1);
        let diff: Vec<f64> = f1.iter().zip(&st.k[0]).map(|(a, b)| a - b).collect();
        let d2 = wrms(&diff, &y, tol) / h;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        h = (100.0 * h).min(h1).min(span);
    }

    let mut elapsed = 0.0_f64;
    let mut y_new = vec![0.0; dim];
    let mut steps = Vec::new();
    let mut attempts = 0usize;
    while elapsed < span {
        attempts += 1;
        if attempts > MAX_STEPS {
            return Err(Error::Integration {
                last_time: dir * elapsed,
                reason: format!("step budget of {MAX_STEPS} exhausted"),
            });
        }
        let remaining = span - elapsed;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= 1e-14 * elapsed.max(1.0) {
            return Err(Error::Integration {
                last_time: dir * elapsed,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }
        st.step(&y, dir * h, &mut y_new);
        let err = st.error_norm(&y, &y_new, dir * h, tol);
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            h *= 0.25;
            continue;
        }
        if err <= 1.0 {
            elapsed = if last { span } else { elapsed + h };
            steps.push(dir * h);
            std::mem::swap(&mut y, &mut y_new);
            st.k.swap(0, 6);
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok((y, StepSequence(steps)))
}

/// Replays a fixed mesh of Dormand–Prince steps.
fn integrate_fixed<F>(rhs: F, y0: &[f64], steps: &StepSequence) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut y = y0.to_vec();
    if steps.0.is_empty() {
        return Ok(y);
    }
    let mut st = Stepper::new(rhs, y.len());
    (st.rhs)(&y, &mut st.k[0]);
    let mut y_new = vec![0.0; y.len()];
    let mut elapsed = 0.0;
    for &h in &steps.0 {
        st.step(&y, h, &mut y_new);
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                last_time: elapsed,
                reason: "non-finite state on a replayed step".into(),
            });
        }
        elapsed += h;
        std::mem::swap(&mut y, &mut y_new);
        st.k.swap(0, 6);
    }
    Ok(y)
}

fn state_rhs(vf: &dyn VectorField) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    move |x, out| vf.eval_into(x, out)
}

/// Right-hand side of the state plus the column-major variational matrix.
fn variational_rhs(vf: &dyn VectorField) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    let n = vf.dim();
    move |y, out| {
        let (x, s) = y.split_at(n);
        let (dx, ds) = out.split_at_mut(n);
        vf.eval_into(x, dx);
        let jac = vf.jacobian(&DVector::from_column_slice(x));
        let s = DMatrixView::from_slice(s, n, n);
        let mut ds = DMatrixViewMut::from_slice(ds, n, n);
        ds.gemm(1.0, &jac, &s, 0.0);
    }
}

fn augmented_start(x0: &DVector<f64>) -> Vec<f64> {
    let n = x0.len();
    let mut y = Vec::with_capacity(n + n * n);
    y.extend_from_slice(x0.as_slice());
    y.extend_from_slice(DMatrix::<f64>::identity(n, n).as_slice());
    y
}

fn split_augmented(y: &[f64], n: usize) -> (DVector<f64>, DMatrix<f64>) {
    (
        DVector::from_column_slice(&y[..n]),
        DMatrix::from_column_slice(n, n, &y[n..]),
    )
}

fn check_start(vf: &dyn VectorField, x0: &DVector<f64>, tol: Tolerances) -> Result<()> {
    dim_check(x0.len() == vf.dim(), || {
        format!("initial state has length {}, field dimension is {}", x0.len(), vf.dim())
    })?;
    if !(tol.abs_tol > 0.0 && tol.rel_tol > 0.0) {
        return Err(Error::Config(format!("tolerances must be positive, got {tol:?}")));
    }
    Ok(())
}

/// `Φ(t, x₀)` by adaptive integration. `t = 0` returns `x₀` unchanged.
pub fn flow(vf: &dyn VectorField, x0: &DVector<f64>, t: f64, tol: Tolerances) -> Result<FlowResult> {
    Ok(flow_recording(vf, x0, t, tol)?.0)
}

/// Like [`flow`], also returning the accepted step sequence.
pub fn flow_recording(
    vf: &dyn VectorField,
    x0: &DVector<f64>,
    t: f64,
    tol: Tolerances,
) -> Result<(FlowResult, StepSequence)> {
    check_start(vf, x0, tol)?;
    let (y, steps) = integrate_adaptive(state_rhs(vf), x0.as_slice(), t, tol)?;
    Ok((
        FlowResult { endpoint: DVector::from_vec(y), sensitivity: None, steps_taken: steps.0.len() },
        steps,
    ))
}

/// `Φ(t, x₀)` together with `S(t, x₀)`.
pub fn flow_with_sensitivity(
    vf: &dyn VectorField,
    x0: &DVector<f64>,
    t: f64,
    method: SensitivityMethod,
    tol: Tolerances,
) -> Result<FlowResult> {
    Ok(flow_with_sensitivity_recording(vf, x0, t, method, tol)?.0)
}

/// Like [`flow_with_sensitivity`], also returning the accepted step sequence.
pub fn flow_with_sensitivity_recording(
    vf: &dyn VectorField,
    x0: &DVector<f64>,
    t: f64,
    method: SensitivityMethod,
    tol: Tolerances,
) -> Result<(FlowResult, StepSequence)> {
    check_start(vf, x0, tol)?;
    let n = vf.dim();
    match method {
        SensitivityMethod::Variational => {
            let (y, steps) =
                integrate_adaptive(variational_rhs(vf), &augmented_start(x0), t, tol)?;
            let (endpoint, sens) = split_augmented(&y, n);
            Ok((
                FlowResult { endpoint, sensitivity: Some(sens), steps_taken: steps.0.len() },
                steps,
            ))
        }
        SensitivityMethod::FiniteDifference => {
            let (y, steps) = integrate_adaptive(state_rhs(vf), x0.as_slice(), t, tol)?;
            let base = integrate_fixed(state_rhs(vf), x0.as_slice(), &steps)?;
            let mut sens = DMatrix::zeros(n, n);
            let mut xp = x0.clone();
            for j in 0..n {
                let h = f64::EPSILON.sqrt() * x0[j].abs().max(1.0);
                xp[j] = x0[j] + h;
                let h = xp[j] - x0[j];
                let yp = integrate_fixed(state_rhs(vf), xp.as_slice(), &steps)?;
                for i in 0..n {
                    sens[(i, j)] = (yp[i] - base[i]) / h;
                }
                xp[j] = x0[j];
            }
            Ok((
                FlowResult {
                    endpoint: DVector::from_vec(y),
                    sensitivity: Some(sens),
                    steps_taken: steps.0.len(),
                },
                steps,
            ))
        }
    }
}

/// Replays `steps` from `x0` without error control; with `sensitivity` the variational
/// system is carried along. Smooth in `x0` and in a uniform rescaling of `steps`, which
/// makes it the right tool for finite differences of flow-derived quantities.
pub fn flow_along(
    vf: &dyn VectorField,
    x0: &DVector<f64>,
    steps: &StepSequence,
    sensitivity: bool,
) -> Result<FlowResult> {
    dim_check(x0.len() == vf.dim(), || {
        format!("initial state has length {}, field dimension is {}", x0.len(), vf.dim())
    })?;
    let n = vf.dim();
    if sensitivity {
        let y = integrate_fixed(variational_rhs(vf), &augmented_start(x0), steps)?;
        let (endpoint, sens) = split_augmented(&y, n);
        Ok(FlowResult { endpoint, sensitivity: Some(sens), steps_taken: steps.0.len() })
    } else {
        let y = integrate_fixed(state_rhs(vf), x0.as_slice(), steps)?;
        Ok(FlowResult { endpoint: DVector::from_vec(y), sensitivity: None, steps_taken: steps.0.len() })
    }
}

/// `dΦ(t, x₀)/dt` at the endpoint, i.e. `f(Φ(t, x₀))`.
pub fn flow_time_derivative(vf: &dyn VectorField, endpoint: &DVector<f64>) -> DVector<f64> {
    vf.eval(endpoint)
}

/// `e^{A t}` by scaling and squaring with a diagonal (6,6) Padé approximant.
pub fn mat_exp(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert!(a.is_square(), "mat_exp needs a square matrix");
    const Q: usize = 6;
    let n = a.nrows();
    let x = a * t;
    let norm = x.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = x / 2f64.powi(squarings);

    let mut numer = DMatrix::<f64>::identity(n, n);
    let mut denom = DMatrix::<f64>::identity(n, n);
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut coeff = 1.0;
    for k in 1..=Q {
        coeff *= (Q - k + 1) as f64 / (k * (2 * Q - k + 1)) as f64;
        power = &power * &x;
        numer += &power * coeff;
        if k % 2 == 0 {
            denom += &power * coeff;
        } else {
            denom -= &power * coeff;
        }
    }
    let mut e = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for a scaled argument of norm <= 1/2");
    for _ in 0..squarings {
        e = &e * &e;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn oscillator() -> LinearField {
        LinearField::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap()
    }

    fn rotation(t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()])
    }

    #[test]
    fn oscillator_half_turn() {
        let r = flow(&oscillator(), &DVector::from_vec(vec![1.0, 0.0]), PI, Tolerances::default())
            .unwrap();
        assert!((r.endpoint[0] + 1.0).abs() < 1e-8);
        assert!(r.endpoint[1].abs() < 1e-8);
        assert!(r.steps_taken > 0);
    }

    #[test]
    fn zero_time_is_identity() {
        let x0 = DVector::from_vec(vec![0.3, -1.7]);
        let r = flow(&oscillator(), &x0, 0.0, Tolerances::default()).unwrap();
        assert_eq!(r.endpoint, x0);
        assert_eq!(r.steps_taken, 0);
        for method in [SensitivityMethod::Variational, SensitivityMethod::FiniteDifference] {
            let r = flow_with_sensitivity(&oscillator(), &x0, 0.0, method, Tolerances::default())
                .unwrap();
            assert_eq!(r.endpoint, x0);
            assert_eq!(r.sensitivity.unwrap(), DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn oscillator_sensitivity_is_rotation() {
        let x0 = DVector::from_vec(vec![0.4, 2.0]);
        for t in [0.3, 1.0, 2.7] {
            for method in [SensitivityMethod::Variational, SensitivityMethod::FiniteDifference] {
                let r = flow_with_sensitivity(&oscillator(), &x0, t, method, Tolerances::default())
                    .unwrap();
                let diff = r.sensitivity.unwrap() - rotation(t);
                assert!(diff.amax() < 1e-7, "{method:?} t={t}: {diff}");
            }
        }
    }

    #[test]
    fn backward_time_inverts_forward() {
        let x0 = DVector::from_vec(vec![1.0, 0.5]);
        let tol = Tolerances::default();
        let fwd = flow(&oscillator(), &x0, 1.3, tol).unwrap();
        let back = flow(&oscillator(), &fwd.endpoint, -1.3, tol).unwrap();
        assert!((back.endpoint - x0).amax() < 1e-8);
    }

    #[test]
    fn time_derivative_is_field_value() {
        let d = flow_time_derivative(&oscillator(), &DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(d.as_slice(), &[0.0, -1.0]);
    }

    #[test]
    fn mat_exp_identity_and_rotation() {
        assert_eq!(mat_exp(&DMatrix::zeros(3, 3), 2.0), DMatrix::identity(3, 3));
        let gen = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        for t in [0.1, 1.0, 5.0, -2.5, 40.0] {
            assert!((mat_exp(&gen, t) - rotation(t)).amax() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn mat_exp_matches_taylor_series() {
        // Oracle: 50-term Taylor series, no scaling.
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.3, -1.2, 0.5, 0.9, 1.1, 0.2, -0.7, 0.4, -0.6, 0.8, 0.1, -1.5, 0.25, -0.35, 1.3,
                -0.2,
            ],
        );
        let t = 0.3;
        let x = &a * t;
        let mut term = DMatrix::<f64>::identity(4, 4);
        let mut sum = term.clone();
        for k in 1..50 {
            term = &term * &x / k as f64;
            sum += &term;
        }
        assert!((mat_exp(&a, t) - sum).amax() < 1e-10);
    }

    #[test]
    fn parses_matrix_files() {
        let f = LinearField::parse("# rotation\n0 1\n-1 0\n\n").unwrap();
        assert_eq!(f.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert!(matches!(LinearField::parse("1 2\n3"), Err(Error::MatrixFile(_))));
        assert!(matches!(LinearField::parse("1 2 3\n4 5 6"), Err(Error::MatrixFile(_))));
        assert!(matches!(LinearField::parse("1 x\n3 4"), Err(Error::MatrixFile(_))));
        assert!(matches!(LinearField::parse(""), Err(Error::MatrixFile(_))));
    }

    #[test]
    fn blow_up_reports_last_good_time() {
        struct Blowup;
        impl VectorField for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
                x.map(|v| v * v)
            }
            fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 2.0 * x[0])
            }
        }
        // x' = x², x(0) = 1 blows up at t = 1.
        let err = flow(&Blowup, &DVector::from_element(1, 1.0), 2.0, Tolerances::default())
            .unwrap_err();
        match err {
            Error::Integration { last_time, reason } => assert!(last_time > 0.9 && last_time < 1.0 + 1e-6, "{last_time} {reason}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replayed_mesh_reproduces_nominal_endpoint() {
        let f = oscillator();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let (r, steps) = flow_recording(&f, &x0, 2.0, Tolerances::default()).unwrap();
        let replay = flow_along(&f, &x0, &steps, false).unwrap();
        assert_eq!(replay.endpoint, r.endpoint);
        let stretched = steps.rescaled(2.5);
        assert!((stretched.total() - 2.5).abs() < 1e-14);
    }
}
