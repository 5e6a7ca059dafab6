//! Multiple-shooting SQP for reaching an unsafe ellipsoid from an initial ellipsoid
//! along the flow of an ODE.
//!
//! The decision vector stacks segment start states and durations; the constraints glue
//! consecutive segments and pin the first start and last end to the two ellipsoids. The
//! objective is `½ Σ tᵢ²`, whose minimizers spread the total time evenly. Steps come from
//! a banded, block-structured KKT solve (line search) or Byrd–Omojokun composite steps
//! (trust region).

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod hessian;
pub mod kkt;
pub mod linalg;
pub mod problem;
pub mod sqp;

pub use dynamics::{LinearField, SensitivityMethod, Tolerances, VectorField};
pub use error::{Error, Result};
pub use hessian::HessianScheme;
pub use problem::{Ellipsoid, Multipliers, Problem, ShootingVector, Verification};
pub use sqp::{solve, Method, RunReport, SolverConfig, SolverState, StopCode};
