//! Joint-filter baselines over the augmented state `[x; θ]`, plus a
//! state-only unscented filter for held-out scoring.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::ObservationSetup;
use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, cholesky_rank_one, lower_factor_from_compound, psd_factor, symmetrize};
use crate::model::TransitionModel;

/// Sigma-point scaling `(α, β, κ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfScaling {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfScaling {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Sigma-point spread and weights for dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaWeights {
    pub gamma: f64,
    pub mean0: f64,
    pub cov0: f64,
    pub rest: f64,
}

impl UkfScaling {
    pub fn weights(&self, d: usize) -> Result<SigmaWeights> {
        let d = d as f64;
        let lambda = self.alpha * self.alpha * (d + self.kappa) - d;
        if !(d + lambda > 0.0) {
            return Err(invalid("sigma-point scaling gives a non-positive spread"));
        }
        Ok(SigmaWeights {
            gamma: (d + lambda).sqrt(),
            mean0: lambda / (d + lambda),
            cov0: lambda / (d + lambda) + 1.0 - self.alpha * self.alpha + self.beta,
            rest: 0.5 / (d + lambda),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTuning {
    pub param_init_var: f64,
    pub param_process_var: f64,
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub resym_every: usize,
    /// Number of measurements consumed (`None` uses all supplied data).
    pub horizon: Option<usize>,
    pub ukf: UkfScaling,
    /// Initial state covariance `state_init_var · I`; initial state mean is zero.
    pub state_init_var: f64,
}

impl Default for JointTuning {
    fn default() -> Self {
        Self {
            param_init_var: 0.01,
            param_process_var: 1e-5,
            anneal_every: 50,
            anneal_factor: 0.995,
            resym_every: 50,
            horizon: None,
            ukf: UkfScaling::default(),
            state_init_var: 1.0,
        }
    }
}

impl JointTuning {
    pub fn validate(&self) -> Result<()> {
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(invalid("anneal_factor must lie in (0, 1]"));
        }
        if !(self.param_init_var > 0.0) || !(self.param_process_var >= 0.0) || !(self.state_init_var > 0.0) {
            return Err(invalid("joint-filter variances must be positive"));
        }
        if self.anneal_every == 0 || self.resym_every == 0 {
            return Err(invalid("anneal_every and resym_every must be positive"));
        }
        Ok(())
    }

    /// Parameter process variance in force after `steps` completed steps.
    pub fn annealed_variance(&self, steps: usize) -> f64 {
        self.param_process_var * self.anneal_factor.powi((steps / self.anneal_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct JointOutput<M> {
    pub model: M,
    pub params: DVector<f64>,
    /// Posterior state means `x̂_1 … x̂_T`.
    pub states: Vec<DVector<f64>>,
    /// Parameter process variance at the end of the run.
    pub param_process_var: f64,
    /// Wall-clock seconds of every step.
    pub step_seconds: Vec<f64>,
    /// Square-root downdates that fell back to re-factorization.
    pub refactorizations: usize,
}

impl<M> JointOutput<M> {
    /// Median per-step seconds with the first 10% discarded.
    pub fn seconds_per_step(&self) -> f64 {
        let skip = self.step_seconds.len() / 10;
        let mut v = self.step_seconds[skip..].to_vec();
        crate::metrics::median(&mut v).unwrap_or(f64::NAN)
    }
}

/// `[f(x; θ); θ]` with parameters taken from the tail of the augmented state.
struct Augmented<'a, M> {
    template: &'a M,
    n: usize,
    q: usize,
}

impl<'a, M: TransitionModel> Augmented<'a, M> {
    fn new(template: &'a M, with_params: bool) -> Self {
        Self {
            template,
            n: template.state_dim(),
            q: if with_params { template.param_count() } else { 0 },
        }
    }

    fn dim(&self) -> usize {
        self.n + self.q
    }

    fn model_at(&self, z: &DVector<f64>) -> Result<std::borrow::Cow<'a, M>> {
        if self.q == 0 {
            Ok(std::borrow::Cow::Borrowed(self.template))
        } else {
            let theta = z.rows(self.n, self.q).into_owned();
            Ok(std::borrow::Cow::Owned(self.template.unpack_parameters(&theta)?))
        }
    }

    fn step(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let model = self.model_at(z)?;
        let x = z.rows(0, self.n).into_owned();
        let mut out = z.clone();
        out.rows_mut(0, self.n).copy_from(&model.step(&x)?);
        Ok(out)
    }

    fn initial(&self, tuning: &JointTuning) -> (DVector<f64>, DVector<f64>) {
        let mut mean = DVector::zeros(self.dim());
        if self.q > 0 {
            mean.rows_mut(self.n, self.q).copy_from(&self.template.pack_parameters().values);
        }
        let mut var = DVector::from_element(self.dim(), tuning.state_init_var);
        var.rows_mut(self.n, self.q).fill(tuning.param_init_var);
        (mean, var)
    }

    fn finish(&self, mean: &DVector<f64>) -> Result<(M, DVector<f64>)> {
        let theta = mean.rows(self.n, self.q).into_owned();
        let model = if self.q == 0 {
            self.template.clone()
        } else {
            self.template.unpack_parameters(&theta)?
        };
        Ok((model, theta))
    }
}

fn horizon(y: &[DVector<f64>], tuning: &JointTuning) -> Result<usize> {
    let t = tuning.horizon.map_or(y.len(), |h| h.min(y.len()));
    if t == 0 {
        return Err(invalid("joint filters need at least one measurement"));
    }
    Ok(t)
}

fn check_dims<M: TransitionModel>(template: &M, obs: &ObservationSetup, y: &[DVector<f64>]) -> Result<()> {
    if obs.state_dim() != template.state_dim() {
        return Err(invalid("measurement matrix does not match the model dimension"));
    }
    if y.iter().any(|v| v.len() != obs.measurement_dim()) {
        return Err(invalid("measurement has the wrong dimension"));
    }
    Ok(())
}

/// Joint extended Kalman filter on `[x; θ]`.
///
/// The augmented Jacobian is `[[∂f/∂x, ∂f/∂θ], [0, I]]`; its block structure is
/// exploited so a step costs `O((n+q)² (n+p))`.
pub fn jekf_run<M: TransitionModel>(template: &M, obs: &ObservationSetup, y: &[DVector<f64>], tuning: &JointTuning) -> Result<JointOutput<M>> {
    tuning.validate()?;
    check_dims(template, obs, y)?;
    let aug = Augmented::new(template, true);
    let t_max = horizon(y, tuning)?;
    let (n, q, d) = (aug.n, aug.q, aug.dim());
    let (mut mean, var) = aug.initial(tuning);
    let mut p = DMatrix::from_diagonal(&var);
    let mut q_theta = tuning.param_process_var;
    let h = obs.h();
    let mut states = Vec::with_capacity(t_max);
    let mut step_seconds = Vec::with_capacity(t_max);

    for (t, yt) in y.iter().take(t_max).enumerate() {
        let clock = Instant::now();
        let model = aug.model_at(&mean)?;
        let x = mean.rows(0, n).into_owned();
        let fx = model.jacobian(&x)?;
        let ftheta = model.param_jacobian(&x)?;

        // rows of F P for the state block: Fx P[x,:] + Fθ P[θ,:]
        let mut fp = &fx * p.rows(0, n);
        if q > 0 {
            fp += &ftheta * p.rows(n, q);
        }
        let mut pxx = fp.columns(0, n) * fx.transpose();
        if q > 0 {
            pxx += fp.columns(n, q) * ftheta.transpose();
        }
        pxx += obs.q();
        let mut p_pred = p.clone();
        p_pred.view_mut((0, 0), (n, n)).copy_from(&pxx);
        if q > 0 {
            let pxt = fp.columns(n, q).into_owned();
            p_pred.view_mut((0, n), (n, q)).copy_from(&pxt);
            p_pred.view_mut((n, 0), (q, n)).copy_from(&pxt.transpose());
            for i in n..d {
                p_pred[(i, i)] += q_theta;
            }
        }
        let mut x_pred = mean.clone();
        x_pred.rows_mut(0, n).copy_from(&model.step(&x)?);

        let pht = p_pred.columns(0, n) * h.transpose();
        let s = h * pht.rows(0, n) + obs.r();
        let chol = crate::linalg::symmetrized(s).cholesky().ok_or(Error::SingularInnovation { step: t + 1 })?;
        let innovation = yt - h * x_pred.rows(0, n);
        let gain = chol.solve(&pht.transpose()).transpose();
        mean = &x_pred + &gain * innovation;
        p = p_pred - &gain * pht.transpose();
        if !all_finite(&mean) || !crate::linalg::all_finite_matrix(&p) {
            return Err(Error::FilterDiverged { step: t + 1 });
        }
        if (t + 1) % tuning.resym_every == 0 {
            symmetrize(&mut p);
        }
        if (t + 1) % tuning.anneal_every == 0 {
            q_theta *= tuning.anneal_factor;
        }
        states.push(mean.rows(0, n).into_owned());
        step_seconds.push(clock.elapsed().as_secs_f64());
    }
    let (model, params) = aug.finish(&mean)?;
    Ok(JointOutput {
        model,
        params,
        states,
        param_process_var: q_theta,
        step_seconds,
        refactorizations: 0,
    })
}

/// Square-root unscented filter state: mean and lower factor of the covariance.
struct SrUkf {
    mean: DVector<f64>,
    sqrt_cov: DMatrix<f64>,
    weights: SigmaWeights,
    refactorizations: usize,
}

impl SrUkf {
    fn predict<M: TransitionModel>(&mut self, aug: &Augmented<'_, M>, sqrt_q: &DMatrix<f64>) -> Result<()> {
        let d = aug.dim();
        let w = self.weights;
        let mut sigma = Vec::with_capacity(2 * d + 1);
        sigma.push(aug.step(&self.mean)?);
        for sign in [1.0, -1.0] {
            for j in 0..d {
                let point = &self.mean + self.sqrt_cov.column(j) * (sign * w.gamma);
                sigma.push(aug.step(&point)?);
            }
        }
        let mut mean = sigma[0].clone() * w.mean0;
        for s in &sigma[1..] {
            mean.axpy(w.rest, s, 1.0);
        }
        let mut compound = DMatrix::zeros(d, 2 * d + sqrt_q.ncols());
        let sw = w.rest.sqrt();
        for (j, s) in sigma[1..].iter().enumerate() {
            compound.set_column(j, &((s - &mean) * sw));
        }
        compound.view_mut((0, 2 * d), (d, sqrt_q.ncols())).copy_from(sqrt_q);
        let mut sqrt_cov = lower_factor_from_compound(&compound);
        let dev0 = (&sigma[0] - &mean) * w.cov0.abs().sqrt();
        let base = sqrt_cov.clone();
        if !cholesky_rank_one(&mut sqrt_cov, &dev0, w.cov0 < 0.0) {
            let sign = w.cov0.signum();
            sqrt_cov = self.refactor(&base, &[dev0], sign)?;
        }
        self.mean = mean;
        self.sqrt_cov = sqrt_cov;
        Ok(())
    }

    /// Linear-measurement update in square-root form.
    fn update(&mut self, h_aug: &DMatrix<f64>, sqrt_r: &DMatrix<f64>, y: &DVector<f64>, step: usize) -> Result<()> {
        let p = h_aug.nrows();
        let hs = h_aug * &self.sqrt_cov;
        let mut compound = DMatrix::zeros(p, hs.ncols() + sqrt_r.ncols());
        compound.view_mut((0, 0), (p, hs.ncols())).copy_from(&hs);
        compound.view_mut((0, hs.ncols()), (p, sqrt_r.ncols())).copy_from(sqrt_r);
        let sy = lower_factor_from_compound(&compound);
        let pxy = &self.sqrt_cov * hs.transpose();
        // K = Pxy Sy⁻ᵀ Sy⁻¹, so Kᵀ solves Sy Syᵀ Kᵀ = Pxyᵀ
        let sy_t = sy.transpose();
        let tmp = sy
            .solve_lower_triangular(&pxy.transpose())
            .ok_or(Error::SingularInnovation { step })?;
        let k_t = sy_t.solve_upper_triangular(&tmp).ok_or(Error::SingularInnovation { step })?;
        let gain = k_t.transpose();
        let innovation = y - h_aug * &self.mean;
        self.mean += &gain * innovation;
        let u = &gain * &sy;
        let base = self.sqrt_cov.clone();
        let mut ok = true;
        for j in 0..u.ncols() {
            if !cholesky_rank_one(&mut self.sqrt_cov, &u.column(j).into_owned(), true) {
                ok = false;
                break;
            }
        }
        if !ok {
            let cols: Vec<DVector<f64>> = (0..u.ncols()).map(|j| u.column(j).into_owned()).collect();
            self.sqrt_cov = self.refactor(&base, &cols, -1.0)?;
        }
        if !all_finite(&self.mean) || !crate::linalg::all_finite_matrix(&self.sqrt_cov) {
            return Err(Error::FilterDiverged { step });
        }
        Ok(())
    }

    /// Dense fallback: factor `S Sᵀ + sign Σ v vᵀ` with increasing jitter.
    fn refactor(&mut self, base: &DMatrix<f64>, vecs: &[DVector<f64>], sign: f64) -> Result<DMatrix<f64>> {
        self.refactorizations += 1;
        let mut cov = base * base.transpose();
        for v in vecs {
            cov += v * v.transpose() * sign;
        }
        symmetrize(&mut cov);
        let d = cov.nrows();
        let scale = cov.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        for _ in 0..12 {
            let trial = &cov + DMatrix::identity(d, d) * jitter;
            if let Some(ch) = trial.cholesky() {
                log::warn!("square-root downdate lost definiteness; re-factorized with jitter {jitter:e}");
                return Ok(ch.l());
            }
            jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
        }
        log::warn!("square-root downdate lost definiteness; clipped eigenvalues");
        Ok(lower_factor_from_compound(&psd_factor(&cov)))
    }
}

/// Final filter, posterior means, per-step seconds and elapsed seconds.
type UkfRun = (SrUkf, Vec<DVector<f64>>, Vec<f64>, f64);

fn run_ukf<M: TransitionModel>(
    aug: &Augmented<'_, M>,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    mean: DVector<f64>,
    sqrt_cov: DMatrix<f64>,
    tuning: &JointTuning,
    t_max: usize,
) -> Result<UkfRun> {
    let (n, q, d) = (aug.n, aug.q, aug.dim());
    let mut ukf = SrUkf {
        mean,
        sqrt_cov,
        weights: tuning.ukf.weights(d)?,
        refactorizations: 0,
    };
    let sqrt_qx = psd_factor(obs.q());
    let mut sqrt_q = DMatrix::zeros(d, d);
    sqrt_q.view_mut((0, 0), (n, n)).copy_from(&sqrt_qx);
    let mut q_theta = tuning.param_process_var;
    let sqrt_r = psd_factor(obs.r());
    let mut h_aug = DMatrix::zeros(obs.measurement_dim(), d);
    h_aug.view_mut((0, 0), (obs.measurement_dim(), n)).copy_from(obs.h());
    let mut states = Vec::with_capacity(t_max);
    let mut step_seconds = Vec::with_capacity(t_max);
    for (t, yt) in y.iter().take(t_max).enumerate() {
        let clock = Instant::now();
        for i in n..d {
            sqrt_q[(i, i)] = q_theta.sqrt();
        }
        ukf.predict(aug, &sqrt_q).map_err(|e| match e {
            Error::InvalidInput(_) => Error::FilterDiverged { step: t + 1 },
            other => other,
        })?;
        ukf.update(&h_aug, &sqrt_r, yt, t + 1)?;
        if q > 0 && (t + 1) % tuning.anneal_every == 0 {
            q_theta *= tuning.anneal_factor;
        }
        states.push(ukf.mean.rows(0, n).into_owned());
        step_seconds.push(clock.elapsed().as_secs_f64());
    }
    Ok((ukf, states, step_seconds, q_theta))
}

/// Joint square-root unscented Kalman filter on `[x; θ]` with `2(n+q)+1` sigma points.
pub fn jukf_run<M: TransitionModel>(template: &M, obs: &ObservationSetup, y: &[DVector<f64>], tuning: &JointTuning) -> Result<JointOutput<M>> {
    tuning.validate()?;
    check_dims(template, obs, y)?;
    let aug = Augmented::new(template, true);
    let t_max = horizon(y, tuning)?;
    let (mean, var) = aug.initial(tuning);
    let sqrt_cov = DMatrix::from_diagonal(&var.map(f64::sqrt));
    let (ukf, states, step_seconds, q_theta) = run_ukf(&aug, obs, y, mean, sqrt_cov, tuning, t_max)?;
    if ukf.refactorizations > 0 {
        log::info!("jUKF needed {} re-factorizations", ukf.refactorizations);
    }
    let (model, params) = aug.finish(&ukf.mean)?;
    Ok(JointOutput {
        model,
        params,
        states,
        param_process_var: q_theta,
        step_seconds,
        refactorizations: ukf.refactorizations,
    })
}

/// Number of sigma points the jUKF uses for `template`.
pub fn sigma_point_count<M: TransitionModel>(template: &M) -> usize {
    2 * (template.state_dim() + template.param_count()) + 1
}

/// State-only square-root UKF with fixed parameters; returns posterior means.
pub fn ukf_filter<M: TransitionModel>(
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    scaling: UkfScaling,
) -> Result<Vec<DVector<f64>>> {
    check_dims(model, obs, y)?;
    if y.is_empty() {
        return Err(invalid("ukf_filter needs at least one measurement"));
    }
    let n = model.state_dim();
    if x0.len() != n || p0.shape() != (n, n) {
        return Err(invalid("initial mean/covariance have the wrong dimension"));
    }
    let aug = Augmented::new(model, false);
    let tuning = JointTuning {
        ukf: scaling,
        ..Default::default()
    };
    let sqrt_cov = lower_factor_from_compound(&psd_factor(p0));
    let (_, states, _, _) = run_ukf(&aug, obs, y, x0.clone(), sqrt_cov, &tuning, y.len())?;
    Ok(states)
}
