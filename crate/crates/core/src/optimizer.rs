//! Nadam minibatch training over randomly placed filter segments.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::Backpropagate;
use crate::ekf::{filter_segment, initial_covariance, ObservationSetup};
use crate::error::{invalid, Error, Result};
use crate::linalg::all_finite;
use crate::model::{NetworkModel, Provenance, TransitionModel};
use crate::table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NadamState {
    pub first_moment: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub step_count: u64,
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl NadamState {
    pub fn new(len: usize, rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(rate > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(invalid("Nadam requires rate > 0, betas in [0, 1) and epsilon > 0"));
        }
        Ok(Self {
            first_moment: DVector::zeros(len),
            second_moment: DVector::zeros(len),
            step_count: 0,
            rate,
            beta1,
            beta2,
            epsilon,
        })
    }
}

/// One Nadam update of `params` in place.
///
/// Uses the bias-corrected Nesterov form
/// `m̂ = β₁m/(1−β₁^{t+1}) + (1−β₁)g/(1−β₁^t)`, `n̂ = n/(1−β₂^t)`,
/// `θ ← θ − rate · m̂/(√n̂ + ε)`.
pub fn nadam_step(state: &mut NadamState, grad: &DVector<f64>, params: &mut DVector<f64>, iteration: usize) -> Result<()> {
    if grad.len() != params.len() || grad.len() != state.first_moment.len() {
        return Err(invalid("gradient, parameters and optimizer state differ in length"));
    }
    if !all_finite(grad) {
        return Err(Error::NonFiniteGradient { iteration });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1_now = 1.0 - b1.powi(t);
    let c1_next = 1.0 - b1.powi(t + 1);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = b1 * m / c1_next + (1.0 - b1) * g / c1_now;
        let v_hat = v / c2;
        params[i] -= state.rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateSchedule {
    #[default]
    Constant,
    /// `rate · factor^⌊iteration / every⌋`
    Geometric { factor: f64, every: usize },
}

impl RateSchedule {
    pub fn rate_at(&self, base: f64, iteration: usize) -> f64 {
        match *self {
            RateSchedule::Constant => base,
            RateSchedule::Geometric { factor, every } => base * factor.powi((iteration / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_iterations: usize,
    pub segment_length: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: RateSchedule,
    /// `P̂₀ = p0_scale · I` for every segment.
    pub p0_scale: f64,
    /// Segment initial means are drawn `N(0, x0_std²)`.
    pub x0_std: f64,
    /// Write a model checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_iterations: 20_000,
            segment_length: 16,
            warmup: 5,
            batch_size: 1,
            seed: 0,
            rate: 0.001,
            beta1: 0.98,
            beta2: 0.95,
            epsilon: 1e-8,
            schedule: RateSchedule::Constant,
            p0_scale: 100.0,
            x0_std: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length == 0 || self.warmup >= self.segment_length {
            return Err(invalid("warmup must be shorter than segment_length"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.p0_scale > 0.0) || !(self.x0_std >= 0.0) {
            return Err(invalid("p0_scale must be positive and x0_std nonnegative"));
        }
        if let RateSchedule::Geometric { factor, .. } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(invalid("geometric decay factor must lie in (0, 1]"));
            }
        }
        NadamState::new(0, self.rate, self.beta1, self.beta2, self.epsilon).map(|_| ())
    }
}

/// `batch_size` start indices drawn uniformly from `0..=horizon−k`.
pub fn sample_start_times<R: Rng + ?Sized>(horizon: usize, k: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if horizon < k || k == 0 {
        return Err(invalid(format!("horizon {horizon} is shorter than the segment length {k}")));
    }
    Ok((0..batch_size).map(|_| rng.random_range(0..=horizon - k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Batch-mean objective before the update.
    pub objective: f64,
    pub grad_norm: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<M> {
    pub model: M,
    pub history: Vec<HistoryRow>,
    pub optimizer: NadamState,
}

impl<M> TrainOutput<M> {
    pub fn final_objective(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.objective)
    }

    /// Median seconds per iteration, skipping the first 10% as warm-up.
    pub fn seconds_per_iteration(&self) -> f64 {
        let mut deltas: Vec<f64> = self
            .history
            .windows(2)
            .map(|w| w[1].wall_time - w[0].wall_time)
            .collect();
        let skip = deltas.len() / 10;
        deltas.drain(..skip);
        crate::metrics::median(&mut deltas).unwrap_or(f64::NAN)
    }
}

/// Writes `iteration, objective, grad_norm`; reproducible for a fixed seed.
pub fn write_history(path: &Path, provenance: &Provenance, history: &[HistoryRow]) -> Result<()> {
    let header: Vec<String> = ["iteration", "objective", "grad_norm"].map(String::from).to_vec();
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|h| vec![h.iteration as f64, h.objective, h.grad_norm])
        .collect();
    table::write_numeric(path, provenance, &header, &rows)
}

/// Writes `iteration, wall_time`, kept apart from the reproducible columns.
pub fn write_history_timing(path: &Path, provenance: &Provenance, history: &[HistoryRow]) -> Result<()> {
    let header: Vec<String> = ["iteration", "wall_time"].map(String::from).to_vec();
    let rows: Vec<Vec<f64>> = history.iter().map(|h| vec![h.iteration as f64, h.wall_time]).collect();
    table::write_numeric(path, provenance, &header, &rows)
}

/// Minibatch-mean gradient of the filter objective at `model`.
pub fn batch_gradient<M: Backpropagate>(
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    starts: &[usize],
    x0s: &[DVector<f64>],
    config: &TrainConfig,
) -> Result<(f64, DVector<f64>)> {
    let k = config.segment_length;
    let p0 = initial_covariance(model.state_dim(), config.p0_scale);
    let eval = |(t0, x0): (&usize, &DVector<f64>)| -> Result<(f64, DVector<f64>)> {
        let seg = &y[*t0..*t0 + k];
        let (traj, objective) = filter_segment(model, obs, seg, x0, &p0, config.warmup)?;
        let report = model.backward(&traj, obs, seg)?;
        Ok((objective, report.grad.values))
    };
    let parts: Vec<Result<(f64, DVector<f64>)>> = if starts.len() > 1 {
        starts.par_iter().zip(x0s.par_iter()).map(eval).collect()
    } else {
        starts.iter().zip(x0s.iter()).map(eval).collect()
    };
    let scale = 1.0 / starts.len() as f64;
    let mut objective = 0.0;
    let mut grad = DVector::zeros(model.param_count());
    for part in parts {
        let (o, g) = part?;
        objective += scale * o;
        grad += g * scale;
    }
    Ok((objective, grad))
}

/// Mean objective over `segments` evenly spaced segments, each started from
/// `x̂₀ = 0`; a filter failure gives `NaN`.
pub fn mean_objective<M: TransitionModel>(model: &M, obs: &ObservationSetup, y: &[DVector<f64>], segments: usize, config: &TrainConfig) -> f64 {
    let k = config.segment_length;
    if y.len() < k || segments == 0 {
        return f64::NAN;
    }
    let span = y.len() - k;
    let n = model.state_dim();
    let x0 = DVector::zeros(n);
    let p0 = initial_covariance(n, config.p0_scale);
    let mut total = 0.0;
    for i in 0..segments {
        let t0 = if segments == 1 { 0 } else { i * span / (segments - 1) };
        match filter_segment(model, obs, &y[t0..t0 + k], &x0, &p0, config.warmup) {
            Ok((_, o)) => total += o,
            Err(_) => return f64::NAN,
        }
    }
    total / segments as f64
}

/// Fits the trainable parameters of `initial` to `y`.
pub fn train<M: Backpropagate>(initial: &M, obs: &ObservationSetup, y: &[DVector<f64>], config: &TrainConfig) -> Result<TrainOutput<M>> {
    train_with_checkpoints(initial, obs, y, config, None)
}

/// Converts a model into its serializable checkpoint form.
pub type ModelWriter<'a, M> = &'a dyn Fn(&M) -> crate::model::ModelFile;

/// As [`train`], also writing `checkpoint_<iteration>.json` files into `dir`.
pub fn train_with_checkpoints<M: Backpropagate>(
    initial: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    config: &TrainConfig,
    checkpoint: Option<(&Path, ModelWriter<'_, M>)>,
) -> Result<TrainOutput<M>> {
    config.validate()?;
    let n = initial.state_dim();
    if obs.state_dim() != n {
        return Err(invalid("measurement matrix does not match the model dimension"));
    }
    if y.len() < config.segment_length {
        return Err(invalid(format!(
            "data horizon {} is shorter than the segment length {}",
            y.len(),
            config.segment_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x0_dist = Normal::new(0.0, config.x0_std).map_err(|e| invalid(e.to_string()))?;
    let mut params = initial.pack_parameters().values;
    let mut state = NadamState::new(params.len(), config.rate, config.beta1, config.beta2, config.epsilon)?;
    let mut model = initial.clone();
    let mut history = Vec::with_capacity(config.n_iterations);
    let clock = Instant::now();

    for iteration in 0..config.n_iterations {
        let starts = sample_start_times(y.len(), config.segment_length, config.batch_size, &mut rng)?;
        let x0s: Vec<DVector<f64>> = starts
            .iter()
            .map(|_| DVector::from_fn(n, |_, _| x0_dist.sample(&mut rng)))
            .collect();
        let diverged = |reason: String| Error::TrainingDiverged {
            iteration,
            reason,
            checkpoint: params.iter().copied().collect(),
        };
        let (objective, grad) = match batch_gradient(&model, obs, y, &starts, &x0s, config) {
            Ok(v) => v,
            Err(e) => return Err(diverged(e.to_string())),
        };
        if !objective.is_finite() {
            return Err(diverged("objective is not finite".into()));
        }
        state.rate = config.schedule.rate_at(config.rate, iteration);
        let mut next = params.clone();
        if let Err(e) = nadam_step(&mut state, &grad, &mut next, iteration) {
            return Err(diverged(e.to_string()));
        }
        params = next;
        model = model.unpack_parameters(&params)?;
        history.push(HistoryRow {
            iteration,
            objective,
            grad_norm: grad.norm(),
            wall_time: clock.elapsed().as_secs_f64(),
        });
        if let Some((dir, to_file)) = checkpoint {
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{:07}.json", iteration + 1));
                crate::model::save_model(&path, &to_file(&model))?;
            }
        }
    }
    Ok(TrainOutput {
        model,
        history,
        optimizer: state,
    })
}

/// Starting estimate: `template` with free `B` entries redrawn `N(0, 0.01/n)`.
///
/// All other blocks keep their template values.
pub fn initialize_estimate(template: &NetworkModel, seed: u64) -> Result<NetworkModel> {
    let n = template.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (0.01 / n as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
    let mask = template.free_mask();
    let b = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { normal.sample(&mut rng) } else { 0.0 });
    template.clone().with_b_matrix(b)
}
