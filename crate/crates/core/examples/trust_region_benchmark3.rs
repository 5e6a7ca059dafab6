//! Trust-region SQP on benchmark 3, printing the radius, the ratio ρ and the dog-leg branch
//! of every iteration.
use shooting_sqp::bench::{benchmark_instance, BenchmarkId};
use shooting_sqp::{HessianScheme, Method, SolverConfig};

fn main() -> shooting_sqp::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let segments = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let inst = benchmark_instance(BenchmarkId::b3(n)?, segments)?;
    let r = inst.solve(&SolverConfig::new(Method::TrustRegion, HessianScheme::Bfgs));

    println!("{:>4} {:>10} {:>10} {:>9} {:>9} {:>4} {:>12}", "it", "‖∇L‖", "‖c‖", "Δ", "ρ", "acc", "vertical");
    for t in &r.trace {
        println!(
            "{:>4} {:>10.3e} {:>10.3e} {:>9.2e} {:>9} {:>4} {:>12}",
            t.iter,
            t.grad_norm,
            t.feas_norm,
            t.radius.unwrap_or(f64::NAN),
            t.rho.map_or("-".into(), |r| format!("{r:.3}")),
            if t.accepted { "y" } else { "n" },
            t.vertical_branch.map_or("-".into(), |b| format!("{b:?}").to_lowercase()),
        );
    }
    println!("\nstop {} after {} iterations, verified: {}", r.stop_code, r.nit, r.verified);
    Ok(())
}
