//! Benchmark fields, instance generation and suite runs.
//!
//! Instances follow one recipe for every field: `c_I = [1, …, 1]`, `c_U = Φ(5, c_I)`,
//! both sets balls of radius ¼ (`E = 16 I`), the reference trajectory cut into `N`
//! pieces of length `5/N` whose start states are shifted by `u = ½[−1, 1, −1, …]`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearField, Tolerances, VectorField};
use crate::error::{dim_check, Error, Result};
use crate::hessian::HessianScheme;
use crate::problem::{Ellipsoid, Multipliers, Problem, ShootingVector};
use crate::sqp::{solve, Method, RunReport, SolverConfig};

/// Total time of the reference trajectory.
pub const HORIZON: f64 = 5.0;
/// Radius of the Init and Unsafe balls.
pub const BALL_RADIUS: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    B1,
    B2,
    B3,
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::B1 => "b1",
            Self::B2 => "b2",
            Self::B3 => "b3",
        })
    }
}

impl FromStr for BenchmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b1" | "1" => Ok(Self::B1),
            "b2" | "2" => Ok(Self::B2),
            "b3" | "3" => Ok(Self::B3),
            other => Err(Error::InvalidBenchmark(format!("unknown benchmark `{other}`"))),
        }
    }
}

/// A benchmark with its state dimension. `b1` is three-dimensional; `b2`, `b3` need even `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BenchmarkId {
    pub kind: BenchmarkKind,
    pub n: usize,
}

impl BenchmarkId {
    pub fn new(kind: BenchmarkKind, n: usize) -> Result<Self> {
        match kind {
            BenchmarkKind::B1 if n != 3 => {
                Err(Error::InvalidBenchmark(format!("b1 is three-dimensional, got n = {n}")))
            }
            BenchmarkKind::B2 | BenchmarkKind::B3 if n == 0 || n % 2 != 0 => {
                Err(Error::InvalidBenchmark(format!("{kind} needs a positive even n, got {n}")))
            }
            _ => Ok(Self { kind, n }),
        }
    }

    pub fn b1() -> Self {
        Self { kind: BenchmarkKind::B1, n: 3 }
    }

    pub fn b2(n: usize) -> Result<Self> {
        Self::new(BenchmarkKind::B2, n)
    }

    pub fn b3(n: usize) -> Result<Self> {
        Self::new(BenchmarkKind::B3, n)
    }
}

/// ```text
/// ẋ₁ = −x₂ + x₁x₃
/// ẋ₂ =  x₁ + x₂x₃
/// ẋ₃ = −x₃ − (x₁² + x₂²) + x₃²
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct Benchmark1;

impl VectorField for Benchmark1 {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(3);
        self.eval_into(x.as_slice(), out.as_mut_slice());
        out
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        out[0] = -x2 + x1 * x3;
        out[1] = x1 + x2 * x3;
        out[2] = -x3 - (x1 * x1 + x2 * x2) + x3 * x3;
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        DMatrix::from_row_slice(3, 3, &[
            x3, -1.0, x1,
            1.0, x3, x2,
            -2.0 * x1, -2.0 * x2, -1.0 + 2.0 * x3,
        ])
    }
}

/// Block-diagonal rotation generator with `n/2` copies of `[[0, 1], [−1, 0]]`.
pub fn rotation_blocks(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for k in (0..n).step_by(2) {
        a[(k, k + 1)] = 1.0;
        a[(k + 1, k)] = -1.0;
    }
    a
}

/// `ẋ = A x + sin(xʳ)` where `A` is [`rotation_blocks`] and component `i` of the
/// nonlinear term is `sin(x_{n−1−i})` (zero-based): the state read in reverse order.
#[derive(Debug, Clone)]
pub struct Benchmark3 {
    n: usize,
}

impl Benchmark3 {
    pub fn new(n: usize) -> Result<Self> {
        BenchmarkId::b3(n)?;
        Ok(Self { n })
    }
}

impl VectorField for Benchmark3 {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.eval_into(x.as_slice(), out.as_mut_slice());
        out
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for k in (0..n).step_by(2) {
            out[k] = x[k + 1];
            out[k + 1] = -x[k];
        }
        for i in 0..n {
            out[i] += x[n - 1 - i].sin();
        }
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut j = rotation_blocks(n);
        for i in 0..n {
            j[(i, n - 1 - i)] += x[n - 1 - i].cos();
        }
        j
    }
}

pub fn make_benchmark(id: BenchmarkId) -> Result<Arc<dyn VectorField>> {
    let id = BenchmarkId::new(id.kind, id.n)?;
    Ok(match id.kind {
        BenchmarkKind::B1 => Arc::new(Benchmark1),
        BenchmarkKind::B2 => Arc::new(LinearField::new(rotation_blocks(id.n))?),
        BenchmarkKind::B3 => Arc::new(Benchmark3::new(id.n)?),
    })
}

/// A ready-to-solve problem with its standard starting point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: Problem,
    pub chi0: ShootingVector,
    pub lambda0: Multipliers,
}

impl Instance {
    pub fn solve(&self, config: &SolverConfig) -> RunReport {
        solve(&self.problem, self.chi0.clone(), self.lambda0.clone(), config)
    }

    /// The reference trajectory split at `5i/N` without the shift `u`. `x₀¹ = c_I`.
    pub fn unperturbed_start(&self) -> Result<ShootingVector> {
        reference_split(&self.problem, self.chi0.segments(), false)
    }
}

/// `u = ½[−1, 1, −1, …]`.
pub fn perturbation(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| if i % 2 == 0 { -0.5 } else { 0.5 })
}

fn reference_split(problem: &Problem, segments: usize, shifted: bool) -> Result<ShootingVector> {
    let n = problem.n();
    let c_i = DVector::from_element(n, 1.0);
    let u = perturbation(n);
    let dt = HORIZON / segments as f64;
    let states = (0..segments)
        .map(|i| {
            // Each split point is integrated from c_I directly.
            let x = problem.segment(&c_i, dt * i as f64, false)?.endpoint;
            Ok(if shifted { x + &u } else { x })
        })
        .collect::<Result<Vec<_>>>()?;
    ShootingVector::new(&states, &vec![dt; segments])
}

pub fn make_instance(field: Arc<dyn VectorField>, segments: usize, tol: Tolerances) -> Result<Instance> {
    dim_check(segments >= 2, || format!("instances need N ≥ 2 segments, got {segments}"))?;
    let n = field.dim();
    let c_i = DVector::from_element(n, 1.0);
    let scratch = Problem::new(
        field.clone(),
        Ellipsoid::ball(c_i.clone(), BALL_RADIUS),
        Ellipsoid::ball(c_i.clone(), BALL_RADIUS),
    )?
    .with_tolerances(tol);
    let c_u = scratch.segment(&c_i, HORIZON, false)?.endpoint;
    let problem = Problem::new(
        field,
        Ellipsoid::ball(c_i, BALL_RADIUS),
        Ellipsoid::ball(c_u, BALL_RADIUS),
    )?
    .with_tolerances(tol);
    let chi0 = reference_split(&problem, segments, true)?;
    let lambda0 = Multipliers::ones(segments, n);
    Ok(Instance { problem, chi0, lambda0 })
}

pub fn benchmark_instance(id: BenchmarkId, segments: usize) -> Result<Instance> {
    make_instance(make_benchmark(id)?, segments, Tolerances::default())
}

/// Verification by one continuous simulation from `x₀¹`.
pub fn verify(chi: &ShootingVector, instance: &Instance) -> bool {
    instance.problem.verify(chi).verified
}

/// One suite cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub benchmark: BenchmarkKind,
    pub n: usize,
    #[serde(rename = "N", alias = "segments")]
    pub segments: usize,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub hessian: HessianScheme,
}

/// Summary of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub benchmark: BenchmarkKind,
    pub n: usize,
    #[serde(rename = "N")]
    pub segments: usize,
    pub method: Method,
    pub hessian: HessianScheme,
    pub nit: usize,
    /// `1`, `2`, `3`, or `A` for an abort.
    pub stop: String,
    pub verified: bool,
    pub grad_norm: f64,
    pub feas_norm: f64,
    pub restarts: usize,
    pub duration_spread: f64,
    pub error: Option<String>,
}

impl SuiteRow {
    fn failed(cell: &SuiteCell, e: Error) -> Self {
        Self {
            benchmark: cell.benchmark,
            n: cell.n,
            segments: cell.segments,
            method: cell.method,
            hessian: cell.hessian,
            nit: 0,
            stop: "A".into(),
            verified: false,
            grad_norm: f64::NAN,
            feas_norm: f64::NAN,
            restarts: 0,
            duration_spread: f64::NAN,
            error: Some(e.to_string()),
        }
    }
}

pub fn run_cell(cell: &SuiteCell, base: &SolverConfig) -> SuiteRow {
    let config = SolverConfig { method: cell.method, hessian_scheme: cell.hessian, ..base.clone() };
    let instance = match BenchmarkId::new(cell.benchmark, cell.n)
        .and_then(|id| benchmark_instance(id, cell.segments))
    {
        Ok(i) => i,
        Err(e) => return SuiteRow::failed(cell, e),
    };
    let r = instance.solve(&config);
    SuiteRow {
        benchmark: cell.benchmark,
        n: cell.n,
        segments: cell.segments,
        method: cell.method,
        hessian: cell.hessian,
        nit: r.nit,
        stop: r.stop_code.table_code().into(),
        verified: r.verified,
        grad_norm: r.grad_norm,
        feas_norm: r.feas_norm,
        restarts: r.restarts,
        duration_spread: r.duration_spread,
        error: r.abort_reason,
    }
}

/// Runs every cell; rows come back in cell order whatever `jobs` is.
pub fn run_suite(cells: &[SuiteCell], base: &SolverConfig, jobs: usize) -> Result<Vec<SuiteRow>> {
    if jobs <= 1 {
        return Ok(cells.iter().map(|c| run_cell(c, base)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|c| run_cell(c, base)).collect()))
}

pub const GRID_NAMES: [&str; 8] =
    ["table1", "table2", "table3", "table4", "table5", "table6", "table7", "table8"];

/// Built-in grids: `table1`–`table3` are b1 with BFGS, SR-1 and finite differences;
/// `table4`–`table6` are b2 with BFGS, SR-1 and the analytic Hessian; `table7`,
/// `table8` are b3 with BFGS and SR-1.
pub fn grid(name: &str, method: Method) -> Result<Vec<SuiteCell>> {
    use BenchmarkKind::*;
    use HessianScheme::*;
    let (benchmark, hessian) = match name {
        "table1" => (B1, Bfgs),
        "table2" => (B1, Sr1),
        "table3" => (B1, Fd),
        "table4" => (B2, Bfgs),
        "table5" => (B2, Sr1),
        "table6" => (B2, Analytic),
        "table7" => (B3, Bfgs),
        "table8" => (B3, Sr1),
        other => {
            return Err(Error::Config(format!(
                "unknown grid `{other}`, expected one of {}",
                GRID_NAMES.join(", ")
            )))
        }
    };
    let dims: &[usize] = if benchmark == B1 { &[3] } else { &[10, 20, 30, 40] };
    Ok(dims
        .iter()
        .flat_map(|&n| {
            (1..=6).map(move |k| SuiteCell { benchmark, n, segments: 5 * k, method, hessian })
        })
        .collect())
}

pub const CSV_HEADER: [&str; 11] = [
    "benchmark", "n", "N", "method", "hessian", "nit", "stop", "verified", "grad_norm",
    "feas_norm", "restarts",
];

/// CSV with [`CSV_HEADER`]; unverified rows carry `F` in the `verified` column.
pub fn write_csv<W: Write>(rows: &[SuiteRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.benchmark.to_string(),
            r.n.to_string(),
            r.segments.to_string(),
            r.method.to_string(),
            r.hessian.to_string(),
            r.nit.to_string(),
            r.stop.clone(),
            if r.verified { "T".into() } else { "F".into() },
            format!("{:.3e}", r.grad_norm),
            format!("{:.3e}", r.feas_norm),
            r.restarts.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(rows: &[SuiteRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Structure report for the KKT system at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    #[serde(rename = "N")]
    pub segments: usize,
    /// `N(n+1) + (N−1)n + 2`.
    pub kkt_order: usize,
    pub kkt_nnz: usize,
    pub btb_order: usize,
    /// Half-bandwidth of the band storage.
    pub btb_half_bandwidth: usize,
    /// Largest `|i − j|` with a nonzero entry.
    pub btb_occupied_bandwidth: usize,
    pub cholesky_nnz: usize,
    pub hessian: HessianScheme,
    pub hessian_singular_values: Vec<f64>,
    pub hessian_nullity: usize,
    /// `(N−2)(n−1)`, saturating at zero.
    pub nullity_lower_bound: usize,
    pub nullity_bound_holds: bool,
}

/// Structure of the KKT matrix and Hessian at `(chi, lambda)`. The Hessian is the
/// analytic one (closed form for linear fields, mixed otherwise).
pub fn diagnose(problem: &Problem, chi: &ShootingVector, lambda: &Multipliers) -> Result<Diagnostics> {
    use crate::dynamics::FieldKind;
    use crate::kkt::{assemble_btb, HessianOperator, SaddleSystem};
    use crate::linalg::{numerical_nullity, singular_values, RANK_REL_TOL};

    let eval = problem.evaluate(chi)?;
    let h = match problem.field.kind() {
        FieldKind::Linear(_) => problem.analytic_hessian_linear(chi, lambda, &eval)?,
        FieldKind::Nonlinear => problem.analytic_hessian_mixed(chi, lambda, &eval)?,
    };
    let zeros = DVector::zeros(chi.len());
    let sys = SaddleSystem {
        hessian: &h,
        jacobian: &eval.jacobian,
        rhs_x: zeros,
        rhs_l: DVector::zeros(eval.constraints.len()),
    };
    let k = sys.to_dense();
    let btb = assemble_btb(&eval.jacobian);
    let factor = btb.cholesky()?;
    let hd = HessianOperator::to_dense(&h);
    let nullity = numerical_nullity(&hd, RANK_REL_TOL);
    let (n, big_n) = (chi.n(), chi.segments());
    let bound = big_n.saturating_sub(2) * n.saturating_sub(1);
    Ok(Diagnostics {
        n,
        segments: big_n,
        kkt_order: k.nrows(),
        kkt_nnz: k.iter().filter(|v| **v != 0.0).count(),
        btb_order: btb.order(),
        btb_half_bandwidth: btb.half_bandwidth(),
        btb_occupied_bandwidth: btb.occupied_bandwidth(),
        cholesky_nnz: factor.nnz(),
        hessian: HessianScheme::Analytic,
        hessian_singular_values: singular_values(&hd),
        hessian_nullity: nullity,
        nullity_lower_bound: bound,
        nullity_bound_holds: nullity >= bound,
    })
}
