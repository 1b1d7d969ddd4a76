//! State-space model families shared by every estimator.
//!
//! All models advance the state as `x_t = f(x_{t-1}; θ) + w_t` where `θ` is the
//! flat vector of trainable parameters described by a [`ParameterLayout`].

mod ei_brain;
mod io;
mod network;
mod params;

pub use ei_brain::EiBrainModel;
pub use io::{load_model, save_model, ModelFile, Provenance};
pub use network::NetworkModel;
pub use params::{ParameterBlock, ParameterLayout, ParameterVector};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Elementwise C² map applied inside network models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => u.tanh(),
            Nonlinearity::Identity => u,
        }
    }

    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Nonlinearity::Identity => 0.0,
        }
    }
}

/// A differentiable state-transition map with a trainable parameter vector.
///
/// Besides `f` and its state Jacobian `F = ∂f/∂x`, implementors expose the
/// first-order sensitivities needed by the general backward pass: `∂f/∂θ` and
/// the derivatives of `F` along single state / parameter coordinates.
pub trait TransitionModel: Clone + Send + Sync {
    fn state_dim(&self) -> usize;

    fn layout(&self) -> ParameterLayout;

    fn pack_parameters(&self) -> ParameterVector;

    /// New model with the trainable coordinates replaced by `values`.
    fn unpack_parameters(&self, values: &DVector<f64>) -> Result<Self>;

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `∂f/∂θ` as an `n × q` matrix.
    fn param_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `∂F/∂x_i`, the derivative of the state Jacobian along state coordinate `i`.
    fn jacobian_state_derivative(&self, x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>>;

    /// `∂F/∂θ_j`.
    fn jacobian_param_derivative(&self, x: &DVector<f64>, j: usize) -> Result<DMatrix<f64>>;

    fn param_count(&self) -> usize {
        self.layout().len()
    }
}

pub(crate) fn check_state(x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(crate::error::invalid(format!(
            "state has length {} but model dimension is {}",
            x.len(),
            n
        )));
    }
    Ok(())
}
