//! Line-search SQP with BFGS on benchmark 1 for N = 5 … 30.
use shooting_sqp::bench::{benchmark_instance, BenchmarkId};
use shooting_sqp::{HessianScheme, Method, SolverConfig};

fn main() -> shooting_sqp::Result<()> {
    let config = SolverConfig::new(Method::LineSearch, HessianScheme::Bfgs);
    println!("{:>3} {:>4} {:>5} {:>9} {:>9} {:>8}", "N", "NIT", "stop", "‖∇L‖", "‖c‖", "verified");
    for segments in (5..=30).step_by(5) {
        let instance = benchmark_instance(BenchmarkId::b1(), segments)?;
        let r = instance.solve(&config);
        println!(
            "{:>3} {:>4} {:>5} {:>9.2e} {:>9.2e} {:>8}",
            segments, r.nit, r.stop_code, r.grad_norm, r.feas_norm, r.verified
        );
    }
    Ok(())
}
