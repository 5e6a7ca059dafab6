//! A user-supplied linear system: a damped oscillator coupled to a slow drift, with
//! hand-picked Init and Unsafe balls.
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use shooting_sqp::problem::equal_length_split;
use shooting_sqp::{
    Ellipsoid, HessianScheme, LinearField, Method, Multipliers, Problem, ShootingVector, SolverConfig, StopCode,
};

fn main() -> shooting_sqp::Result<()> {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(3, 3, &[
        -0.1,  1.0, 0.0,
        -1.0, -0.1, 0.0,
         0.0,  0.0, 0.2,
    ]);
    let field = Arc::new(LinearField::new(a)?);
    let init = Ellipsoid::ball(DVector::from_vec(vec![1.0, 0.0, 0.5]), 0.2);
    let unsafe_set = Ellipsoid::ball(DVector::from_vec(vec![-0.5, 0.4, 1.0]), 0.3);
    let problem = Problem::new(field, init, unsafe_set)?;

    // Naive start: every segment begins at the same point of the Init boundary and lasts one
    // time unit. (The center itself is a poor start: the Init constraint has zero gradient
    // there and B loses rank.)
    let segments = 6;
    let durations = equal_length_split(6.0, segments)?;
    let states = vec![DVector::from_vec(vec![1.2, 0.0, 0.5]); segments];
    let chi0 = ShootingVector::new(&states, durations.as_slice())?;
    let lambda0 = Multipliers::ones(segments, 3);

    for (method, scheme) in [
        (Method::LineSearch, HessianScheme::Analytic),
        (Method::LineSearch, HessianScheme::Bfgs),
        (Method::TrustRegion, HessianScheme::Bfgs),
    ] {
        let r = shooting_sqp::solve(&problem, chi0.clone(), lambda0.clone(), &SolverConfig::new(method, scheme));
        let total: f64 = r.final_chi.durations().iter().sum();
        println!(
            "{method:>12} {scheme:>8}: stop {} in {:>3} iterations, T = {total:.4}, verified {}",
            r.stop_code, r.nit, r.verified
        );
        if let Some(why) = &r.abort_reason {
            println!("  aborted: {why}");
        }
        if r.stop_code == StopCode::S1 && method == Method::TrustRegion {
            let v = problem.verify(&r.final_chi);
            println!("  endpoint ‖·‖²_E in Init {:.4}, Unsafe {:.4}", v.init_norm_sq, v.unsafe_norm_sq);
        }
    }
    Ok(())
}
