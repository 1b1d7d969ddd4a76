//! Forward extended Kalman filter over a measurement segment.
//!
//! Every intermediate quantity the backward pass consumes is kept in a
//! [`FilterTrajectory`]. The prediction-error objective is the mean
//! Mahalanobis distance `zᵀ M z` over the post-warmup steps with the fixed
//! weight `M = (H Q Hᵀ + R)⁻¹`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, all_finite_matrix, is_symmetric_psd, spd_inverse, symmetrize, symmetrized};
use crate::model::{Provenance, TransitionModel};
use crate::table;

/// Measurement operator and noise covariances, plus the precomputed
/// Mahalanobis weight `M = (H Q Hᵀ + R)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSetup {
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    m: DMatrix<f64>,
}

impl ObservationSetup {
    pub fn new(h: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (p, n) = h.shape();
        if p == 0 || n == 0 {
            return Err(invalid("measurement matrix must be non-empty"));
        }
        if !all_finite_matrix(&h) {
            return Err(invalid("measurement matrix must be finite"));
        }
        if q.shape() != (n, n) || !is_symmetric_psd(&q, 1e-10) {
            return Err(invalid("Q must be a symmetric positive semidefinite n x n matrix"));
        }
        if r.shape() != (p, p) || !is_symmetric_psd(&r, 1e-10) {
            return Err(invalid("R must be a symmetric positive definite p x p matrix"));
        }
        let q = symmetrized(q);
        let r = symmetrized(r);
        if r.clone().cholesky().is_none() {
            return Err(invalid("R must be positive definite"));
        }
        let m = spd_inverse(&(&h * &q * h.transpose() + &r))
            .ok_or_else(|| invalid("H Q Hᵀ + R is not invertible"))?;
        Ok(Self { h, q, r, m })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Same operator with `M` scaled by `factor` (used to check objective linearity).
    pub fn with_weight_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.m *= factor;
        out
    }
}

/// Quantities recorded for one filter step `t`.
#[derive(Debug, Clone)]
pub struct FilterStep {
    /// `x̂_{t|t-1}`
    pub x_pred: DVector<f64>,
    /// `P̂_{t|t-1}`
    pub p_pred: DMatrix<f64>,
    /// `F'_t`, evaluated at `x̂_{t-1}`
    pub jacobian: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub k_gain: DMatrix<f64>,
    /// `G_t = I − K_t H`
    pub g: DMatrix<f64>,
    /// `z_t = y_t − H x̂_{t|t-1}`
    pub innovation: DVector<f64>,
    /// `S_t⁻¹ z_t`
    pub whitened: DVector<f64>,
    pub x_post: DVector<f64>,
    pub p_post: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub warmup: usize,
    pub steps: Vec<FilterStep>,
}

impl FilterTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of steps that contribute to the objective.
    pub fn scored_steps(&self) -> usize {
        self.steps.len() - self.warmup
    }

    /// `(x̂_{t-1}, P̂_{t-1})` feeding step `t` (0-based).
    pub fn prior(&self, t: usize) -> (&DVector<f64>, &DMatrix<f64>) {
        if t == 0 {
            (&self.x0, &self.p0)
        } else {
            (&self.steps[t - 1].x_post, &self.steps[t - 1].p_post)
        }
    }

    pub fn posterior_means(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.x_post.clone()).collect()
    }

    /// One row per step: `x_pred`, `x_post`, `z`, `diag(P_post)`.
    pub fn write_csv(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let n = self.x0.len();
        let p = self.steps.first().map_or(0, |s| s.innovation.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_pred{i}")));
        header.extend((0..n).map(|i| format!("x_post{i}")));
        header.extend((0..p).map(|i| format!("z{i}")));
        header.extend((0..n).map(|i| format!("p_diag{i}")));
        let rows: Vec<Vec<f64>> = self
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let mut row = vec![(t + 1) as f64];
                row.extend(s.x_pred.iter());
                row.extend(s.x_post.iter());
                row.extend(s.innovation.iter());
                row.extend(s.p_post.diagonal().iter());
                row
            })
            .collect();
        table::write_numeric(path, provenance, &header, &rows)
    }
}

/// `zᵀ M z`.
pub fn mahalanobis(z: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    z.dot(&(m * z))
}

/// `α·I`, the default initial covariance.
pub fn initial_covariance(n: usize, alpha: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n) * alpha
}

/// Runs the EKF over `y` (one measurement per step) starting from `(x0, p0)`.
///
/// Returns the trajectory and the objective
/// `(1/(k − warmup)) Σ_{t > warmup} z_tᵀ M z_t`.
pub fn filter_segment<M: TransitionModel>(
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    warmup: usize,
) -> Result<(FilterTrajectory, f64)> {
    let n = model.state_dim();
    let k = y.len();
    if k == 0 {
        return Err(invalid("segment must contain at least one measurement"));
    }
    if warmup >= k {
        return Err(invalid(format!("warmup {warmup} must be shorter than the segment ({k})")));
    }
    if obs.state_dim() != n {
        return Err(invalid("measurement matrix does not match the model dimension"));
    }
    if x0.len() != n || p0.shape() != (n, n) {
        return Err(invalid("initial mean/covariance have the wrong dimension"));
    }
    let p_dim = obs.measurement_dim();
    if let Some(bad) = y.iter().position(|v| v.len() != p_dim) {
        return Err(invalid(format!("measurement {bad} has the wrong length")));
    }

    let h = obs.h();
    let ht = h.transpose();
    let identity = DMatrix::<f64>::identity(n, n);
    let scale = 1.0 / (k - warmup) as f64;

    let mut steps: Vec<FilterStep> = Vec::with_capacity(k);
    let mut objective = 0.0;
    let p0 = symmetrized(p0.clone());

    for (t, y_t) in y.iter().enumerate() {
        let (x_prev, p_prev) = match steps.last() {
            Some(s) => (&s.x_post, &s.p_post),
            None => (x0, &p0),
        };
        let jacobian = model.jacobian(x_prev)?;
        let x_pred = model.step(x_prev)?;
        let mut p_pred = &jacobian * p_prev * jacobian.transpose();
        symmetrize(&mut p_pred);
        p_pred += obs.q();

        let hp = h * &p_pred;
        let mut s = &hp * &ht + obs.r();
        symmetrize(&mut s);
        let chol = s
            .clone()
            .cholesky()
            .ok_or(Error::SingularInnovation { step: t + 1 })?;
        let k_gain = chol.solve(&hp).transpose();
        let innovation = y_t - h * &x_pred;
        let whitened = chol.solve(&innovation);
        let x_post = &x_pred + &k_gain * &innovation;
        let g = &identity - &k_gain * h;
        let mut p_post = &g * &p_pred;
        symmetrize(&mut p_post);

        if !all_finite(&x_post) || !all_finite_matrix(&p_post) {
            return Err(Error::FilterDiverged { step: t + 1 });
        }
        if t >= warmup {
            objective += scale * mahalanobis(&innovation, obs.m());
        }
        steps.push(FilterStep {
            x_pred,
            p_pred,
            jacobian,
            s,
            k_gain,
            g,
            innovation,
            whitened,
            x_post,
            p_post,
        });
    }
    if !objective.is_finite() {
        return Err(Error::FilterDiverged { step: k });
    }
    Ok((
        FilterTrajectory {
            x0: x0.clone(),
            p0,
            warmup,
            steps,
        },
        objective,
    ))
}
