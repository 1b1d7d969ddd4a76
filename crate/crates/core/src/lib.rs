//! Parameter estimation for nonlinear state-space network models.
//!
//! The core pieces are an extended Kalman filter with an exact reverse-mode
//! gradient of its innovation objective, a Nadam optimizer driving minibatch
//! training over short filter segments, and joint-filtering baselines that
//! estimate parameters by state augmentation.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backprop;
pub mod ekf;
pub mod error;
pub mod harness;
pub mod joint;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod simgen;
pub mod table;

pub use backprop::{Backpropagate, GradientReport};
pub use ekf::{filter_segment, FilterTrajectory, ObservationSetup};
pub use error::{Error, Result};
pub use model::{EiBrainModel, NetworkModel, Nonlinearity, ParameterVector, TransitionModel};
