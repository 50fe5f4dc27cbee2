//! Economic model predictive control with a self-tuning prediction horizon.
//!
//! The controller minimizes an economic stage cost while an auxiliary cost,
//! bounded by a shrinking filter sequence, forces convergence to the optimal
//! steady state. Once the state enters a small neighborhood of that steady
//! state a local linear feedback takes over.

pub mod controller;
pub mod costs;
pub mod error;
pub mod filters;
pub mod model;
pub mod ocp;
pub mod problem;
pub mod stats;
pub mod terminal;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use controller::{run_closed_loop, ClosedLoopTrace, ControllerConfig, ConvergenceCertificate, StepRecord};
pub use error::{Error, Result};
pub use filters::{FilterKind, FilterSpec, HorizonSchedule};
pub use problem::{ControlProblem, PlantKind, ProblemConfig};
