//! Reverse-mode gradient of the filter objective with respect to the model
//! parameters, accumulated backwards through a recorded [`FilterTrajectory`].
//!
//! Per step `t` (from `k` down to `1`), with `a = ∂Ω/∂x̂_t`, `D = ∂Ω/∂P̂_t`:
//!
//! ```text
//! ∂Ω/∂x̂_{t|t-1} = Gᵀ a − 2c Hᵀ M z               (c = 1/N after warmup, else 0)
//! ∂Ω/∂P̂_{t|t-1} = sym(Gᵀ a (S⁻¹z)ᵀ H + Gᵀ D G)
//! Z_t            = 2 (∂Ω/∂P̂_{t|t-1}) F'
//! ∂Ω/∂P̂_{t-1}   = ½ F'ᵀ Z_t
//! ∂Ω/∂x̂_{t-1}   = F'ᵀ ∂Ω/∂x̂_{t|t-1} + ⟨Z_t P̂_{t-1}, ∂F'/∂x⟩
//! ∂Ω/∂θ         += (∂f/∂θ)ᵀ ∂Ω/∂x̂_{t|t-1} + ⟨Z_t P̂_{t-1}, ∂F'/∂θ⟩
//! ```
//!
//! This is the exact adjoint of [`filter_segment`](crate::ekf::filter_segment),
//! including its `P̂_t = G_t P̂_{t|t-1}` update and per-step resymmetrization.
//! [`backward_general`] evaluates the two contractions slice by slice through
//! the [`TransitionModel`] sensitivities; [`backward_network`] uses the closed
//! Hadamard forms available for [`NetworkModel`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::ekf::{FilterTrajectory, ObservationSetup};
use crate::error::{invalid, Result};
use crate::linalg::{all_finite, all_finite_matrix, symmetrize};
use crate::model::{EiBrainModel, NetworkModel, ParameterVector, Provenance, TransitionModel};
use crate::table;

/// Adjoint quantities at one step, recorded for debugging dumps.
#[derive(Debug, Clone)]
pub struct AdjointState {
    /// `∂Ω/∂x̂_t`
    pub d_x: DVector<f64>,
    /// `∂Ω/∂P̂_t`
    pub d_p: DMatrix<f64>,
    /// `∂Ω/∂x̂_{t|t-1}`
    pub d_x_pred: DVector<f64>,
    /// Innovation-gain source `Gᵀ a (S⁻¹z)ᵀ H` of the covariance adjoint.
    pub u: DMatrix<f64>,
    /// `Z_t`
    pub z_mat: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentInfo {
    pub start: usize,
    pub len: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub objective: f64,
    /// Gradient over the trainable coordinates only.
    pub grad: ParameterVector,
    /// Dense `∂Ω/∂A` (network path only).
    pub grad_a: Option<DMatrix<f64>>,
    /// Dense `∂Ω/∂B` including masked coordinates (network path only).
    pub grad_b: Option<DMatrix<f64>>,
    /// `∂Ω/∂c` for the activation offset (network path only).
    pub grad_c: Option<DVector<f64>>,
    pub segment: SegmentInfo,
}

impl GradientReport {
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.grad.block(name)
    }

    pub fn with_start(mut self, start: usize) -> Self {
        self.segment.start = start;
        self
    }
}

trait Contraction {
    /// `⟨C, ∂F'/∂x⟩` at `x_prev`.
    fn state_term(&self, x_prev: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>>;
    /// Adds the step-`t` parameter contribution.
    fn accumulate(&mut self, x_prev: &DVector<f64>, d_x_pred: &DVector<f64>, c: &DMatrix<f64>) -> Result<()>;
}

fn check_inputs<M: TransitionModel>(
    traj: &FilterTrajectory,
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
) -> Result<()> {
    let n = model.state_dim();
    if traj.x0.len() != n || obs.state_dim() != n {
        return Err(invalid("trajectory, model and measurement setup disagree on the state dimension"));
    }
    if y.len() != traj.len() || traj.is_empty() {
        return Err(invalid(format!(
            "trajectory has {} steps but {} measurements were supplied",
            traj.len(),
            y.len()
        )));
    }
    if traj.warmup >= traj.len() {
        return Err(invalid("trajectory warmup covers the whole segment"));
    }
    if y.iter().any(|v| v.len() != obs.measurement_dim()) {
        return Err(invalid("measurement dimension mismatch"));
    }
    Ok(())
}

fn run_backward(
    traj: &FilterTrajectory,
    obs: &ObservationSetup,
    rule: &mut dyn Contraction,
    mut trace: Option<&mut Vec<AdjointState>>,
) -> Result<()> {
    let n = traj.x0.len();
    let h = obs.h();
    let hm = h.transpose() * obs.m();
    let scale = 1.0 / traj.scored_steps() as f64;

    let mut d_x = DVector::<f64>::zeros(n);
    let mut d_p = DMatrix::<f64>::zeros(n, n);

    for t in (0..traj.len()).rev() {
        let step = &traj.steps[t];
        let (x_prev, p_prev) = traj.prior(t);
        let gt = step.g.transpose();

        let mut d_x_pred = &gt * &d_x;
        if t >= traj.warmup {
            d_x_pred -= (2.0 * scale) * (&hm * &step.innovation);
        }

        let ga = &gt * &d_x;
        let u = &ga * (h.transpose() * &step.whitened).transpose();
        let mut d_p_pred = &u + &gt * &d_p * &step.g;
        symmetrize(&mut d_p_pred);

        let f = &step.jacobian;
        let z_mat = 2.0 * &d_p_pred * f;
        let c = &z_mat * p_prev;
        let mut d_p_prev = f.transpose() * &d_p_pred * f;
        symmetrize(&mut d_p_prev);
        let d_x_prev = f.transpose() * &d_x_pred + rule.state_term(x_prev, &c)?;
        rule.accumulate(x_prev, &d_x_pred, &c)?;

        if !all_finite(&d_x_prev) || !all_finite_matrix(&d_p_prev) {
            return Err(invalid(format!("non-finite adjoint at step {}", t + 1)));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(AdjointState {
                d_x: d_x.clone(),
                d_p: d_p.clone(),
                d_x_pred: d_x_pred.clone(),
                u,
                z_mat,
            });
        }
        d_x = d_x_prev;
        d_p = d_p_prev;
    }
    if let Some(tr) = trace {
        tr.reverse();
    }
    Ok(())
}

struct GeneralRule<'a, M> {
    model: &'a M,
    grad: DVector<f64>,
}

impl<M: TransitionModel> Contraction for GeneralRule<'_, M> {
    fn state_term(&self, x_prev: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>> {
        let n = self.model.state_dim();
        let mut out = DVector::zeros(n);
        for i in 0..n {
            // Tr(Cᵀ ∂F'/∂x_i) = vec(C)ᵀ vec(∂F'/∂x_i)
            out[i] = c.dot(&self.model.jacobian_state_derivative(x_prev, i)?);
        }
        Ok(out)
    }

    fn accumulate(&mut self, x_prev: &DVector<f64>, d_x_pred: &DVector<f64>, c: &DMatrix<f64>) -> Result<()> {
        let jac = self.model.param_jacobian(x_prev)?;
        self.grad += jac.transpose() * d_x_pred;
        for j in 0..self.grad.len() {
            self.grad[j] += c.dot(&self.model.jacobian_param_derivative(x_prev, j)?);
        }
        Ok(())
    }
}

struct NetworkRule<'a> {
    model: &'a NetworkModel,
    grad_a: DMatrix<f64>,
    grad_b: DMatrix<f64>,
    grad_c: DVector<f64>,
    grad_bias: DVector<f64>,
}

impl NetworkRule<'_> {
    /// `(B ∘ C)ᵀ 1`
    fn weighted_column_sums(&self, c: &DMatrix<f64>) -> DVector<f64> {
        let b = self.model.b_matrix();
        DVector::from_iterator(b.ncols(), b.column_iter().zip(c.column_iter()).map(|(bc, cc)| bc.dot(&cc)))
    }
}

impl Contraction for NetworkRule<'_> {
    fn state_term(&self, x_prev: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d2 = self.model.activation_second_derivative(x_prev)?;
        Ok(self.weighted_column_sums(c).component_mul(&d2))
    }

    fn accumulate(&mut self, x_prev: &DVector<f64>, d_x_pred: &DVector<f64>, c: &DMatrix<f64>) -> Result<()> {
        let (phi, d1, d2) = self.model.activations(x_prev);
        let gain = self.model.gain();
        let slope = d1.component_mul(gain);

        self.grad_a += d_x_pred * x_prev.transpose() + c;

        let mut c_slope = c.clone();
        for (k, mut col) in c_slope.column_iter_mut().enumerate() {
            col.scale_mut(slope[k]);
        }
        self.grad_b += d_x_pred * phi.transpose() + c_slope;

        let sums = self.weighted_column_sums(c);
        self.grad_c += (self.model.b_matrix().transpose() * d_x_pred).component_mul(&d1)
            + sums.component_mul(&d2).component_mul(gain);
        self.grad_bias += d_x_pred;
        Ok(())
    }
}

fn general<M: TransitionModel>(
    traj: &FilterTrajectory,
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    trace: Option<&mut Vec<AdjointState>>,
) -> Result<GradientReport> {
    check_inputs(traj, model, obs, y)?;
    let mut rule = GeneralRule {
        model,
        grad: DVector::zeros(model.param_count()),
    };
    run_backward(traj, obs, &mut rule, trace)?;
    let objective = objective_of(traj, obs);
    Ok(GradientReport {
        objective,
        grad: ParameterVector::new(rule.grad, model.layout())?,
        grad_a: None,
        grad_b: None,
        grad_c: None,
        segment: SegmentInfo {
            start: 0,
            len: traj.len(),
            warmup: traj.warmup,
        },
    })
}

fn network(
    traj: &FilterTrajectory,
    model: &NetworkModel,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    trace: Option<&mut Vec<AdjointState>>,
) -> Result<GradientReport> {
    check_inputs(traj, model, obs, y)?;
    let n = model.n();
    let mut rule = NetworkRule {
        model,
        grad_a: DMatrix::zeros(n, n),
        grad_b: DMatrix::zeros(n, n),
        grad_c: DVector::zeros(n),
        grad_bias: DVector::zeros(n),
    };
    run_backward(traj, obs, &mut rule, trace)?;

    let mut values: Vec<f64> = model
        .free_entries()
        .into_iter()
        .map(|(i, j)| rule.grad_b[(i, j)])
        .collect();
    if model.trains_offset() {
        values.extend(rule.grad_c.iter());
    }
    if model.trains_bias() {
        values.extend(rule.grad_bias.iter());
    }
    Ok(GradientReport {
        objective: objective_of(traj, obs),
        grad: ParameterVector::new(DVector::from_vec(values), model.layout())?,
        grad_a: Some(rule.grad_a),
        grad_b: Some(rule.grad_b),
        grad_c: Some(rule.grad_c),
        segment: SegmentInfo {
            start: 0,
            len: traj.len(),
            warmup: traj.warmup,
        },
    })
}

fn objective_of(traj: &FilterTrajectory, obs: &ObservationSetup) -> f64 {
    let scale = 1.0 / traj.scored_steps() as f64;
    traj.steps[traj.warmup..]
        .iter()
        .map(|s| scale * crate::ekf::mahalanobis(&s.innovation, obs.m()))
        .sum()
}

/// Gradient through the general sensitivities of any [`TransitionModel`].
pub fn backward_general<M: TransitionModel>(
    traj: &FilterTrajectory,
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
) -> Result<GradientReport> {
    general(traj, model, obs, y, None)
}

pub fn backward_general_traced<M: TransitionModel>(
    traj: &FilterTrajectory,
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
) -> Result<(GradientReport, Vec<AdjointState>)> {
    let mut trace = Vec::with_capacity(traj.len());
    let report = general(traj, model, obs, y, Some(&mut trace))?;
    Ok((report, trace))
}

/// Gradient through the closed network-form contractions.
pub fn backward_network(
    traj: &FilterTrajectory,
    model: &NetworkModel,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
) -> Result<GradientReport> {
    network(traj, model, obs, y, None)
}

pub fn backward_network_traced(
    traj: &FilterTrajectory,
    model: &NetworkModel,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
) -> Result<(GradientReport, Vec<AdjointState>)> {
    let mut trace = Vec::with_capacity(traj.len());
    let report = network(traj, model, obs, y, Some(&mut trace))?;
    Ok((report, trace))
}

/// One row per step: `t`, `d_x*`, `d_x_pred*`, `diag(d_p)*`.
pub fn write_adjoints_csv(path: &Path, provenance: &Provenance, trace: &[AdjointState]) -> Result<()> {
    let n = trace.first().map_or(0, |a| a.d_x.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("d_x{i}")));
    header.extend((0..n).map(|i| format!("d_x_pred{i}")));
    header.extend((0..n).map(|i| format!("d_p_diag{i}")));
    let rows: Vec<Vec<f64>> = trace
        .iter()
        .enumerate()
        .map(|(t, a)| {
            let mut row = vec![(t + 1) as f64];
            row.extend(a.d_x.iter());
            row.extend(a.d_x_pred.iter());
            row.extend(a.d_p.diagonal().iter());
            row
        })
        .collect();
    table::write_numeric(path, provenance, &header, &rows)
}

/// Models that know their preferred backward path.
pub trait Backpropagate: TransitionModel {
    fn backward(&self, traj: &FilterTrajectory, obs: &ObservationSetup, y: &[DVector<f64>]) -> Result<GradientReport>;
}

impl Backpropagate for NetworkModel {
    fn backward(&self, traj: &FilterTrajectory, obs: &ObservationSetup, y: &[DVector<f64>]) -> Result<GradientReport> {
        backward_network(traj, self, obs, y)
    }
}

impl Backpropagate for EiBrainModel {
    fn backward(&self, traj: &FilterTrajectory, obs: &ObservationSetup, y: &[DVector<f64>]) -> Result<GradientReport> {
        backward_general(traj, self, obs, y)
    }
}
