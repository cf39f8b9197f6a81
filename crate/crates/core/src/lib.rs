//! Suboptimal nonlinear model predictive control for station-keeping on
//! near-rectilinear halo orbits.
//!
//! The crate is layered bottom-up:
//!
//! * [`dynamics`]: restricted three-body vector fields in the rotating /
//!   pulsating frame, the pseudo-potential and its derivatives.
//! * [`integrator`]: the fixed-step RK4 prediction model together with its
//!   exact discrete sensitivities, and the plant propagator.
//! * [`orbits`]: single-shooting halo orbit generation, family sweeps and the
//!   periodized reference trajectory.
//! * [`ocp`]: the horizon-N tracking problem and its QP linearization.
//! * [`qpsolver`]: a proximally stabilized semismooth Newton QP solver with a
//!   banded stage-structured linear algebra kernel.
//! * [`nmpc`]: the time-distributed SQP controller.
//! * [`sim`]: closed-loop simulation, Monte Carlo and iteration-count sweeps.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod nmpc;
pub mod ocp;
pub mod orbits;
pub mod qpsolver;
pub mod sim;

pub use dynamics::{ControlInput, SpacecraftState, ThreeBodyParams};
pub use error::{Error, Result};
pub use integrator::DiscreteStepResult;
pub use nmpc::{ControlDiagnostics, Controller, ControllerConfig, ControllerState};
pub use ocp::{OcpConfig, PrimalDualPoint, QpData};
pub use orbits::{PeriodicOrbit, ReferenceOrbit};
pub use qpsolver::{QpSolution, QpSolverConfig, QpStatus};
pub use sim::{HypercubeSpec, InitialCondition, SimConfig, SimLog};

pub use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};
