//! Safe distributed control of multi-robot systems under communication delays.
//!
//! The numerical core (dynamics, channel, autodiff, networks) is generic over
//! the float type; simulation, training and evaluation run in `f64`.

pub mod autodiff;
pub mod comms;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Float type of the simulation, training and evaluation layers.
pub type Real = f64;
pub type State = dynamics::RobotState<Real>;
pub type Input = dynamics::ControlInput<Real>;
pub type Diff = dynamics::StateDiff<Real>;
pub type ModelSet = models::Models<Real>;
