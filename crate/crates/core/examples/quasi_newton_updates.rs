//! Block BFGS and SR-1 on a fixed quadratic. SR-1 recovers the true block after n
//! independent steps, BFGS only approaches it; both skip pairs that would wreck the
//! approximation.
use nalgebra::{DMatrix, DVector};
use shooting_sqp::hessian::{bfgs_update_block, sr1_update_block, UpdateOutcome};

fn main() {
    let truth = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 2.0]);
    let steps = [
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
        DVector::from_vec(vec![1.0, -1.0, 0.5]),
    ];

    for (name, update) in [
        ("bfgs", bfgs_update_block as fn(&mut DMatrix<f64>, &DVector<f64>, &DVector<f64>) -> UpdateOutcome),
        ("sr1", sr1_update_block),
    ] {
        let mut h = DMatrix::identity(3, 3);
        println!("{name}:");
        for s in &steps {
            let y = &truth * s;
            let outcome = update(&mut h, s, &y);
            println!("  {outcome:?}, ‖H − H*‖ = {:.3e}", (&h - &truth).norm());
        }
    }

    let mut h = DMatrix::identity(3, 3);
    let s = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    println!("\nnegative curvature pair, bfgs: {:?}", bfgs_update_block(&mut h, &s, &(-&s)));
    println!("y = Hs, sr1: {:?}", sr1_update_block(&mut h, &s, &s));
}
