//! Adaptive flows and their sensitivities: the harmonic oscillator against its closed form,
//! and the two sensitivity methods side by side on benchmark 1.
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use shooting_sqp::bench::Benchmark1;
use shooting_sqp::dynamics::{flow, flow_with_sensitivity, mat_exp};
use shooting_sqp::{LinearField, SensitivityMethod, Tolerances};

fn main() -> shooting_sqp::Result<()> {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let oscillator = LinearField::new(a.clone())?;
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let tol = Tolerances::default();

    println!("oscillator, x0 = (1, 0)");
    for t in [PI / 2.0, PI, 2.0 * PI] {
        let r = flow_with_sensitivity(&oscillator, &x0, t, SensitivityMethod::Variational, tol)?;
        let s = r.sensitivity.unwrap();
        println!(
            "  t = {t:.4}: x = ({:+.8}, {:+.8}), {:>3} steps, |S − e^(At)| = {:.1e}",
            r.endpoint[0],
            r.endpoint[1],
            r.steps_taken,
            (s - mat_exp(&a, t)).amax()
        );
    }

    let x0 = DVector::from_element(3, 1.0);
    let end = flow(&Benchmark1, &x0, 5.0, tol)?.endpoint;
    println!("\nbenchmark 1 from (1, 1, 1) over t = 5: {:.6?}", end.as_slice());
    let v = flow_with_sensitivity(&Benchmark1, &x0, 1.0, SensitivityMethod::Variational, tol)?;
    let f = flow_with_sensitivity(&Benchmark1, &x0, 1.0, SensitivityMethod::FiniteDifference, tol)?;
    let (sv, sf) = (v.sensitivity.unwrap(), f.sensitivity.unwrap());
    println!("sensitivity at t = 1 (variational):{sv:.6}");
    println!("variational vs internal differences: {:.1e}", (sv - sf).amax());
    Ok(())
}
