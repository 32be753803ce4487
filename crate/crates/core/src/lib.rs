//! Screening-current surrogate modeling for REBCO pancake solenoids.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: solenoid configuration and its discretization into
//!   axisymmetric current loops.
//! - [`emsolver`]: thin-strip integral solver (loop inductances, E-J power
//!   law, implicit time stepping) that produces reference current-density
//!   histories and magnetization losses.
//! - [`dataset`]: normalization of solver output into training rows, split
//!   plans and the binary dataset format.
//! - [`autonet`]: dense plain/residual networks with SiLU, MSE, Adam and a
//!   step-decay learning-rate schedule.
//! - [`trainer`]: mini-batch training with dual-loss checkpointing and
//!   multi-seed architecture sweeps.
//! - [`analysis`]: surrogate evaluation, error maps, loss-error surfaces,
//!   timing benchmarks and plain CSV/SVG emitters.

pub mod analysis;
pub mod autonet;
pub mod dataset;
pub mod emsolver;
pub mod geometry;
pub mod trainer;

pub use analysis::{EvalReport, ErrorMap, LossErrorEntry, TimingRow};
pub use autonet::{AdamState, NetworkArch, NetworkKind, NetworkParams};
pub use dataset::{DatasetManifest, Normalization, SampleRecord, SplitKind, SplitPlan};
pub use emsolver::{
    CurrentDensityHistory, InductanceMatrix, PowerLawParams, RampOptions, SolverError, SolverState,
};
pub use geometry::{ElementMesh, GeometryError, SolenoidConfig, SolenoidGeometry, Symmetry};
pub use trainer::{SweepReport, TrainHyper, TrainRun, TrainedModel};
