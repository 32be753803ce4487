//! Reduced-order axisymmetric screening-current solver.
//!
//! Every tape is a thin superconducting sheet split into coaxial loops. The
//! loops are coupled through a dense inductance matrix (including the image
//! of the lower half for midplane-mirrored models) and carry a resistive
//! voltage given by the E-J power law. Each tape is one turn of the winding,
//! so the sum of its loop currents is pinned to the transport current by a
//! per-turn voltage multiplier:
//!
//! ```text
//! L dI/dt + 2 pi r E(I / A) = V_turn,    sum_{loops in turn} I = I_op(t)
//! ```
//!
//! Time integration is backward Euler with a damped Newton iteration on the
//! augmented (currents, turn voltages) system.

mod elliptic;
mod history;
mod inductance;
mod powerlaw;
mod stepper;

use thiserror::Error;

pub use elliptic::{ellip_ke, ellip_ke_complement};
pub use history::{dissipation_power, magnetization_loss, CurrentDensityHistory, StepRecord};
pub use inductance::{
    assemble_inductance_matrix, mutual_inductance, self_inductance, strip_mutual_inductance,
    InductanceMatrix, Loop, Strip, MU_0, SEGMENT_GMD_RATIO,
};
pub use powerlaw::{power_law_efield, PowerLawParams};
pub use stepper::{solve_ramp, NewtonOptions, RampOptions, SolverState, StepStats, TapeCircuit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error("coincident loops at r = {r}, z = {z}; use the self inductance")]
    CoincidentLoops { r: f64, z: f64 },
    #[error("jacobian is not positive definite at t = {time}")]
    SingularJacobian { time: f64 },
    #[error("Newton iteration did not converge at t = {time} (dt = {dt}, residual {residual:e} after {iterations} iterations)")]
    NewtonFailure {
        time: f64,
        dt: f64,
        iterations: usize,
        residual: f64,
    },
    #[error("time stepping failed at t = {time}: step size {dt:e} below minimum")]
    StepSizeUnderflow { time: f64, dt: f64 },
    #[error("need at least two snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SolverError {
    fn from(err: std::io::Error) -> Self {
        SolverError::Io(err.to_string())
    }
}
