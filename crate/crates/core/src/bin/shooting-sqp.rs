use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shooting_sqp::bench::{
    self, benchmark_instance, diagnose, grid, make_instance, run_suite, BenchmarkId, BenchmarkKind,
    Instance, SuiteCell, SuiteRow,
};
use shooting_sqp::{Error, HessianScheme, LinearField, Method, RunReport, SolverConfig, Tolerances};

/// Multiple-shooting SQP: find a trajectory from an Init ball to an Unsafe ball.
#[derive(Parser)]
#[command(name = "shooting-sqp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and write its run report.
    Solve(SolveArgs),
    /// Run a table grid or a JSON list of cells; writes one row per run.
    Suite(SuiteArgs),
    /// KKT and Hessian structure at the starting point of an instance.
    Diagnose(DiagnoseArgs),
    /// Re-verify a saved JSON run report by simulation.
    Verify(VerifyArgs),
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct SourceArgs {
    /// Built-in benchmark.
    #[arg(long, env = "SHOOTING_SQP_BENCHMARK", group = "source")]
    benchmark: Option<BenchmarkKind>,
    /// Plain-text matrix `A` of a linear field `ẋ = Ax`.
    #[arg(long, env = "SHOOTING_SQP_MATRIX", group = "source")]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct ProblemArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// State dimension (b1: 3; b2, b3: even, default 10; matrix: must match the file).
    #[arg(long, env = "SHOOTING_SQP_N")]
    n: Option<usize>,
    /// Number of shooting segments N.
    #[arg(long, env = "SHOOTING_SQP_SEGMENTS")]
    segments: usize,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, env = "SHOOTING_SQP_METHOD", default_value_t = Method::LineSearch)]
    method: Method,
    #[arg(long, env = "SHOOTING_SQP_HESSIAN", default_value_t = HessianScheme::Bfgs)]
    hessian: HessianScheme,
    #[arg(long, env = "SHOOTING_SQP_MAX_ITER", default_value_t = 400)]
    max_iter: usize,
    #[arg(long, env = "SHOOTING_SQP_TOL_GRAD", default_value_t = 1e-3)]
    tol_grad: f64,
    #[arg(long, env = "SHOOTING_SQP_TOL_FEAS", default_value_t = 1e-8)]
    tol_feas: f64,
    #[arg(long, env = "SHOOTING_SQP_MIN_STEP", default_value_t = 1e-8)]
    min_step: f64,
    #[arg(long, env = "SHOOTING_SQP_SIGMA", default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, env = "SHOOTING_SQP_ARMIJO_DELTA", default_value_t = 1e-4)]
    armijo_delta: f64,
    #[arg(long, env = "SHOOTING_SQP_DESCENT_COEFF", default_value_t = 1e-5)]
    descent_coeff: f64,
    #[arg(long, env = "SHOOTING_SQP_DOGLEG_THETA", default_value_t = 0.8)]
    dogleg_theta: f64,
    #[arg(long, env = "SHOOTING_SQP_TR_RADIUS0", default_value_t = 1.0)]
    tr_radius0: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            method: self.method,
            hessian_scheme: self.hessian,
            max_iter: self.max_iter,
            tol_grad: self.tol_grad,
            tol_feas: self.tol_feas,
            min_step: self.min_step,
            sigma: self.sigma,
            armijo_delta: self.armijo_delta,
            descent_coeff: self.descent_coeff,
            dogleg_theta: self.dogleg_theta,
            tr_radius0: self.tr_radius0,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long, short, env = "SHOOTING_SQP_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, value_enum, env = "SHOOTING_SQP_FORMAT")]
    format: Option<Format>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct SuiteArgs {
    /// Built-in grid, `table1` … `table8`.
    #[arg(long, env = "SHOOTING_SQP_GRID", conflicts_with = "spec", required_unless_present = "spec")]
    grid: Option<String>,
    /// JSON array of cells `{"benchmark", "n", "N", "method", "hessian"}`.
    #[arg(long, env = "SHOOTING_SQP_SPEC")]
    spec: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, env = "SHOOTING_SQP_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// JSON report written by `solve`.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    problem: ProblemArgs,
}

fn instance(p: &ProblemArgs) -> shooting_sqp::Result<Instance> {
    match (&p.source.benchmark, &p.source.matrix) {
        (Some(kind), None) => {
            let n = p.n.unwrap_or(if *kind == BenchmarkKind::B1 { 3 } else { 10 });
            benchmark_instance(BenchmarkId::new(*kind, n)?, p.segments)
        }
        (None, Some(path)) => {
            let field = LinearField::from_path(path)?;
            if let Some(n) = p.n {
                if n != field.matrix().nrows() {
                    return Err(Error::Dimension(format!(
                        "--n {n} but the matrix is {}x{}",
                        field.matrix().nrows(),
                        field.matrix().ncols()
                    )));
                }
            }
            make_instance(Arc::new(field), p.segments, Tolerances::default())
        }
        _ => Err(Error::Config("give exactly one of --benchmark and --matrix".into())),
    }
}

fn sink(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn to_io(e: serde_json::Error) -> Error {
    Error::Io(io::Error::other(e))
}

fn report_row(p: &ProblemArgs, inst: &Instance, config: &SolverConfig, r: &RunReport) -> SuiteRow {
    SuiteRow {
        benchmark: p.source.benchmark.unwrap_or(BenchmarkKind::B2),
        n: inst.problem.n(),
        segments: p.segments,
        method: config.method,
        hessian: config.hessian_scheme,
        nit: r.nit,
        stop: r.stop_code.table_code().into(),
        verified: r.verified,
        grad_norm: r.grad_norm,
        feas_norm: r.feas_norm,
        restarts: r.restarts,
        duration_spread: r.duration_spread,
        error: r.abort_reason.clone(),
    }
}

/// `Ok(true)` maps to exit 0, `Ok(false)` to 1, `Err` to 2.
fn run(cli: Cli) -> shooting_sqp::Result<bool> {
    match cli.command {
        Command::Solve(a) => {
            let config = a.solver.config();
            config.validate()?;
            let inst = instance(&a.problem)?;
            let r = inst.solve(&config);
            let mut w = sink(a.out.output.as_deref())?;
            match a.out.format.unwrap_or(Format::Json) {
                Format::Json => serde_json::to_writer_pretty(&mut w, &r).map_err(to_io)?,
                Format::Csv => bench::write_csv(&[report_row(&a.problem, &inst, &config, &r)], &mut w)?,
            }
            writeln!(w)?;
            w.flush()?;
            eprintln!(
                "stop {} after {} iterations, ‖∇L‖ = {:.3e}, ‖c‖ = {:.3e}, verified = {}",
                r.stop_code, r.nit, r.grad_norm, r.feas_norm, r.verified
            );
            if let Some(reason) = &r.abort_reason {
                eprintln!("aborted: {reason}");
            }
            Ok(r.verified && r.stop_code != shooting_sqp::StopCode::Abort)
        }
        Command::Suite(a) => {
            let config = a.solver.config();
            config.validate()?;
            let cells: Vec<SuiteCell> = match (&a.grid, &a.spec) {
                (Some(g), _) => grid(g, config.method)?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(path)?;
                    if text.trim().is_empty() {
                        Vec::new()
                    } else {
                        serde_json::from_str(&text).map_err(|e| Error::Config(format!("suite spec: {e}")))?
                    }
                }
                (None, None) => unreachable!("clap enforces a grid or a spec"),
            };
            let rows = run_suite(&cells, &config, a.jobs.max(1))?;
            let w = sink(a.out.output.as_deref())?;
            match a.out.format.unwrap_or(Format::Csv) {
                Format::Csv => bench::write_csv(&rows, w)?,
                Format::Json => bench::write_json(&rows, w)?,
            }
            let failed = rows.iter().filter(|r| !r.verified).count();
            eprintln!("{} runs, {} not verified", rows.len(), failed);
            Ok(true)
        }
        Command::Diagnose(a) => {
            let inst = instance(&a.problem)?;
            let d = diagnose(&inst.problem, &inst.chi0, &inst.lambda0)?;
            let mut w = sink(a.out.output.as_deref())?;
            match a.out.format.unwrap_or(Format::Json) {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut w, &d).map_err(to_io)?;
                    writeln!(w)?;
                }
                Format::Csv => {
                    writeln!(w, "kkt_order,kkt_nnz,btb_order,btb_half_bandwidth,btb_occupied_bandwidth,cholesky_nnz,hessian_nullity,nullity_lower_bound")?;
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        d.kkt_order,
                        d.kkt_nnz,
                        d.btb_order,
                        d.btb_half_bandwidth,
                        d.btb_occupied_bandwidth,
                        d.cholesky_nnz,
                        d.hessian_nullity,
                        d.nullity_lower_bound
                    )?;
                }
            }
            w.flush()?;
            Ok(true)
        }
        Command::Verify(a) => {
            let inst = instance(&a.problem)?;
            let text = std::fs::read_to_string(&a.report)?;
            let r: RunReport =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("report: {e}")))?;
            let v = inst.problem.verify(&r.final_chi);
            println!("{}", serde_json::to_string_pretty(&v).map_err(to_io)?);
            if v.verified != r.verified {
                eprintln!("warning: report says verified = {}, re-verification gives {}", r.verified, v.verified);
            }
            Ok(v.verified)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
