//! The normal matrix BᵀB of a multiple-shooting Jacobian is banded with half-bandwidth 2n
//! no matter how many segments there are, so its Cholesky factor stays sparse.
use nalgebra::DVector;
use shooting_sqp::bench::{benchmark_instance, BenchmarkId};
use shooting_sqp::kkt::{assemble_btb, ConstraintJacobian, ConstraintPreconditioner};

fn main() -> shooting_sqp::Result<()> {
    println!("{:>3} {:>4} {:>6} {:>4} {:>9} {:>10} {:>12}", "n", "N", "order", "kd", "occupied", "nnz(L)", "dense nnz");
    for (n, segments) in [(4, 10), (10, 10), (10, 40), (10, 80), (20, 40)] {
        let inst = benchmark_instance(BenchmarkId::b2(n)?, segments)?;
        let jac = inst.problem.jacobian(&inst.chi0)?;
        let btb = assemble_btb(&jac);
        let chol = btb.cholesky()?;
        let m = btb.order();
        println!(
            "{n:>3} {segments:>4} {m:>6} {:>4} {:>9} {:>10} {:>12}",
            btb.half_bandwidth(),
            btb.occupied_bandwidth(),
            chol.nnz(),
            m * (m + 1) / 2
        );
    }

    // The minimum-norm step onto the linearized constraints Bᵀd = −c.
    let inst = benchmark_instance(BenchmarkId::b2(10)?, 40)?;
    let eval = inst.problem.evaluate(&inst.chi0)?;
    let pre = ConstraintPreconditioner::new(&eval.jacobian)?;
    let d = pre.min_norm_step(&eval.constraints);
    let resid: DVector<f64> = eval.jacobian.tr_mul(&d) + &eval.constraints;
    println!("\n‖c‖ = {:.3e}, ‖d‖ = {:.3e}, ‖Bᵀd + c‖ = {:.1e}", eval.constraints.norm(), d.norm(), resid.norm());
    Ok(())
}
