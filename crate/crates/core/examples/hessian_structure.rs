//! Structure of the exact Hessian of the Lagrangian for a linear field: block diagonal,
//! with a large null space, which is why the KKT system is solved in the range of B.
use shooting_sqp::bench::{benchmark_instance, diagnose, BenchmarkId};
use shooting_sqp::{HessianScheme, Method, SolverConfig};

fn main() -> shooting_sqp::Result<()> {
    for (n, segments) in [(4, 5), (10, 10), (10, 40)] {
        let inst = benchmark_instance(BenchmarkId::b2(n)?, segments)?;
        let d = diagnose(&inst.problem, &inst.chi0, &inst.lambda0)?;
        println!(
            "n = {n:>2}, N = {segments:>2}: K {}x{} with {} nonzeros, nullity(H) = {} (≥ {})",
            d.kkt_order, d.kkt_order, d.kkt_nnz, d.hessian_nullity, d.nullity_lower_bound
        );
    }

    let inst = benchmark_instance(BenchmarkId::b2(4)?, 5)?;
    let r = inst.solve(&SolverConfig::new(Method::LineSearch, HessianScheme::Analytic));
    let d = diagnose(&inst.problem, &r.final_chi, &r.final_lambda)?;
    println!("\nat the solution of (4, 5) after {} iterations:", r.nit);
    let shown: Vec<String> = d.hessian_singular_values.iter().map(|s| format!("{s:.2e}")).collect();
    println!("singular values of H: {}", shown.join(" "));
    Ok(())
}
