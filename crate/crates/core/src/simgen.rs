//! Synthetic benchmark generation: random sparse Hopfield networks, rank-reduced
//! measurement operators and noisy trajectories.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::ekf::ObservationSetup;
use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, is_symmetric_psd, orthonormalize, psd_factor};
use crate::model::{load_model, save_model, ModelFile, NetworkModel, Nonlinearity, Provenance, TransitionModel};
use crate::table;

/// How the spread of the singular-value distribution `|N(mean, spread)|` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    #[default]
    Variance,
    StdDev,
}

/// Generator for the ground-truth Hopfield parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightDistribution {
    /// `W` entries are `N(0, (w_scale²)/n)`.
    pub w_scale: f64,
    /// `D` entries are `U(d_low, d_high)`.
    pub d_low: f64,
    pub d_high: f64,
    /// `c` entries are `N(0, c_std²)`.
    pub c_std: f64,
}

impl Default for WeightDistribution {
    fn default() -> Self {
        Self {
            w_scale: 1.0,
            d_low: 0.1,
            d_high: 0.9,
            c_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSpec {
    pub n_nodes: usize,
    pub measurement_fraction: f64,
    pub sparsity_fraction: f64,
    pub horizon: usize,
    pub seed: u64,
    pub process_std: f64,
    pub measurement_std: f64,
    pub weights: WeightDistribution,
    pub singular_value_mean: f64,
    pub singular_value_spread: f64,
    pub spread_kind: SpreadKind,
    /// Discarded initial steps before recording.
    pub burn_in: usize,
    /// Standard deviation of the pre-burn-in initial state.
    pub x0_std: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            measurement_fraction: 0.4,
            sparsity_fraction: 0.4,
            horizon: 10_000,
            seed: 0,
            process_std: 1.0,
            measurement_std: 0.1,
            weights: WeightDistribution::default(),
            singular_value_mean: 2.0,
            singular_value_spread: 0.25,
            spread_kind: SpreadKind::Variance,
            burn_in: 200,
            x0_std: 0.1,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(invalid("n_nodes must be positive"));
        }
        if !(self.measurement_fraction > 0.0 && self.measurement_fraction <= 1.0) {
            return Err(invalid("measurement_fraction must lie in (0, 1]"));
        }
        if !(self.sparsity_fraction >= 0.0 && self.sparsity_fraction < 1.0) {
            return Err(invalid("sparsity_fraction must lie in [0, 1)"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.process_std >= 0.0) || !(self.measurement_std > 0.0) {
            return Err(invalid("process_std must be >= 0 and measurement_std > 0"));
        }
        if !(self.weights.d_low <= self.weights.d_high) {
            return Err(invalid("d_low must not exceed d_high"));
        }
        Ok(())
    }

    /// `round(measurement_fraction · n)`, at least one channel.
    pub fn measurement_dim(&self) -> usize {
        ((self.measurement_fraction * self.n_nodes as f64).round() as usize).clamp(1, self.n_nodes)
    }

    pub fn singular_value_std(&self) -> f64 {
        match self.spread_kind {
            SpreadKind::Variance => self.singular_value_spread.sqrt(),
            SpreadKind::StdDev => self.singular_value_spread,
        }
    }
}

/// Measurement operator and noise used to draw a trajectory; `Q` and `R` may be singular.
#[derive(Debug, Clone)]
pub struct SimulationNoise {
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl SimulationNoise {
    pub fn from_setup(obs: &ObservationSetup) -> Self {
        Self {
            h: obs.h().clone(),
            q: obs.q().clone(),
            r: obs.r().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_1 … x_T`
    pub states: Vec<DVector<f64>>,
    /// `y_1 … y_T`
    pub measurements: Vec<DVector<f64>>,
}

/// Coordinates whose activation sits in the flat part of `tanh` for most steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicRangeReport {
    pub pinned_nodes: Vec<usize>,
    pub saturated_fraction: Vec<f64>,
}

impl DynamicRangeReport {
    pub fn passes(&self) -> bool {
        self.pinned_nodes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub model: NetworkModel,
    pub obs: ObservationSetup,
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub dynamic_range: DynamicRangeReport,
}

/// `tanh'(u)` below this counts as saturated (`|tanh u| > 0.99`).
const SATURATED_SLOPE: f64 = 1.0 - 0.99 * 0.99;
/// A node is pinned when saturated for more than this fraction of steps.
const PINNED_FRACTION: f64 = 0.9;

/// Zeros the `⌊fraction · n²⌋` entries smallest in magnitude.
///
/// Ties are broken by row-major index. Returns the sparsified matrix and the
/// mask of surviving entries.
pub fn sparsify(w: &DMatrix<f64>, fraction: f64) -> (DMatrix<f64>, DMatrix<bool>) {
    let (rows, cols) = w.shape();
    let total = rows * cols;
    let drop = ((fraction.clamp(0.0, 1.0) * total as f64) + 1e-9).floor() as usize;
    let mut order: Vec<(f64, usize)> = (0..total)
        .map(|idx| (w[(idx / cols, idx % cols)].abs(), idx))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = w.clone();
    let mut mask = DMatrix::from_element(rows, cols, true);
    for &(_, idx) in order.iter().take(drop.min(total)) {
        out[(idx / cols, idx % cols)] = 0.0;
        mask[(idx / cols, idx % cols)] = false;
    }
    (out, mask)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `H = U Σ Vᵀ` with Haar-random orthonormal `U` (p×p), `V` (n×p) and
/// singular values `|N(mean, std²)|`.
pub fn random_measurement_matrix<R: Rng + ?Sized>(
    p: usize,
    n: usize,
    sv_mean: f64,
    sv_std: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if p == 0 || p > n {
        return Err(invalid(format!("measurement dimension {p} must lie in 1..={n}")));
    }
    let normal = Normal::new(sv_mean, sv_std).map_err(|e| invalid(e.to_string()))?;
    let u = orthonormalize(gaussian_matrix(p, p, rng));
    let v = orthonormalize(gaussian_matrix(n, p, rng));
    let sigma = DVector::from_fn(p, |_, _| normal.sample(rng).abs());
    Ok(u * DMatrix::from_diagonal(&sigma) * v.transpose())
}

fn sample_noise<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let e = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    factor * e
}

/// Iterates `x_t = f(x_{t-1}) + w_t`, `y_t = H x_t + v_t` for `horizon` steps.
pub fn simulate<M: TransitionModel, R: Rng + ?Sized>(
    model: &M,
    noise: &SimulationNoise,
    horizon: usize,
    x0: &DVector<f64>,
    rng: &mut R,
) -> Result<Trajectory> {
    let n = model.state_dim();
    if x0.len() != n || noise.h.ncols() != n {
        return Err(invalid("simulation dimensions disagree"));
    }
    let p = noise.h.nrows();
    if noise.q.shape() != (n, n) || !is_symmetric_psd(&noise.q, 1e-10) {
        return Err(invalid("Q must be symmetric PSD"));
    }
    if noise.r.shape() != (p, p) || !is_symmetric_psd(&noise.r, 1e-10) {
        return Err(invalid("R must be symmetric PSD"));
    }
    let lq = psd_factor(&noise.q);
    let lr = psd_factor(&noise.r);
    let mut states = Vec::with_capacity(horizon);
    let mut measurements = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for t in 0..horizon {
        x = model.step(&x)? + sample_noise(&lq, rng);
        if !all_finite(&x) {
            return Err(Error::SimulationDiverged { step: t + 1 });
        }
        let y = &noise.h * &x + sample_noise(&lr, rng);
        states.push(x.clone());
        measurements.push(y);
    }
    Ok(Trajectory { states, measurements })
}

/// Random sparse Hopfield network `W tanh(x) + D∘x + c` per `spec`.
pub fn generate_network<R: Rng + ?Sized>(spec: &SimulationSpec, rng: &mut R) -> Result<NetworkModel> {
    let n = spec.n_nodes;
    let wd = &spec.weights;
    let w_normal = Normal::new(0.0, wd.w_scale / (n as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
    let w = DMatrix::from_fn(n, n, |_, _| w_normal.sample(rng));
    let d_dist = Uniform::new_inclusive(wd.d_low, wd.d_high).map_err(|e| invalid(e.to_string()))?;
    let d = DVector::from_fn(n, |_, _| d_dist.sample(rng));
    let c_normal = Normal::new(0.0, wd.c_std).map_err(|e| invalid(e.to_string()))?;
    let c = DVector::from_fn(n, |_, _| c_normal.sample(rng));
    let (w, mask) = sparsify(&w, spec.sparsity_fraction);
    NetworkModel::hopfield(w, d, c)?.with_free_mask(mask)
}

/// Flags tanh coordinates saturated for more than 90% of the recorded steps.
pub fn dynamic_range_screen(model: &NetworkModel, states: &[DVector<f64>]) -> DynamicRangeReport {
    if model.nonlinearity() != Nonlinearity::Tanh || states.is_empty() {
        return DynamicRangeReport::default();
    }
    let n = model.n();
    let mut counts = vec![0usize; n];
    for x in states {
        let u = model.preactivation(x);
        for i in 0..n {
            if Nonlinearity::Tanh.derivative(u[i]) < SATURATED_SLOPE {
                counts[i] += 1;
            }
        }
    }
    let saturated_fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / states.len() as f64).collect();
    let pinned_nodes = saturated_fraction
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > PINNED_FRACTION)
        .map(|(i, _)| i)
        .collect();
    DynamicRangeReport {
        pinned_nodes,
        saturated_fraction,
    }
}

/// Complete benchmark instance determined by `spec.seed`.
pub fn generate_ground_truth(spec: &SimulationSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_nodes;
    let model = generate_network(spec, &mut rng)?;
    let h = random_measurement_matrix(
        spec.measurement_dim(),
        n,
        spec.singular_value_mean,
        spec.singular_value_std(),
        &mut rng,
    )?;
    let p = h.nrows();
    let q = DMatrix::identity(n, n) * spec.process_std.powi(2);
    let r = DMatrix::identity(p, p) * spec.measurement_std.powi(2);
    let obs = ObservationSetup::new(h, q, r)?;
    let noise = SimulationNoise::from_setup(&obs);

    let x_std = Normal::new(0.0, spec.x0_std).map_err(|e| invalid(e.to_string()))?;
    let start = DVector::from_fn(n, |_, _| x_std.sample(&mut rng));
    let burn = simulate(&model, &noise, spec.burn_in, &start, &mut rng)?;
    let x0 = burn.states.last().cloned().unwrap_or(start);
    let traj = simulate(&model, &noise, spec.horizon, &x0, &mut rng)?;
    let dynamic_range = dynamic_range_screen(&model, &traj.states);
    if !dynamic_range.passes() {
        log::warn!(
            "seed {}: nodes {:?} are pinned in tanh saturation",
            spec.seed,
            dynamic_range.pinned_nodes
        );
    }
    Ok(GroundTruth {
        model,
        obs,
        states: traj.states,
        measurements: traj.measurements,
        dynamic_range,
    })
}

/// Fresh trajectory from the same model and noise, for held-out scoring.
pub fn fresh_trajectory(truth: &GroundTruth, horizon: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = truth.model.n();
    let x_std = Normal::new(0.0, 0.1).map_err(|e| invalid(e.to_string()))?;
    let start = DVector::from_fn(n, |_, _| x_std.sample(&mut rng));
    let noise = SimulationNoise::from_setup(&truth.obs);
    let burn = simulate(&truth.model, &noise, 200, &start, &mut rng)?;
    let x0 = burn.states.last().cloned().unwrap_or(start);
    simulate(&truth.model, &noise, horizon, &x0, &mut rng)
}

impl GroundTruth {
    /// Writes `model.json` plus one CSV per array (`h`, `q`, `r`, `states`, `measurements`).
    pub fn save(&self, dir: &Path, provenance: &Provenance) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_model(&dir.join("model.json"), &ModelFile::from_network(&self.model, Some(provenance.clone())))?;
        table::write_matrix(&dir.join("h.csv"), provenance, "c", self.obs.h())?;
        table::write_matrix(&dir.join("q.csv"), provenance, "c", self.obs.q())?;
        table::write_matrix(&dir.join("r.csv"), provenance, "c", self.obs.r())?;
        table::write_series(&dir.join("states.csv"), provenance, "x", &self.states)?;
        table::write_series(&dir.join("measurements.csv"), provenance, "y", &self.measurements)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = load_model(&dir.join("model.json"))?.to_network()?;
        let obs = ObservationSetup::new(
            table::read_matrix(&dir.join("h.csv"))?,
            table::read_matrix(&dir.join("q.csv"))?,
            table::read_matrix(&dir.join("r.csv"))?,
        )?;
        let states = table::read_series(&dir.join("states.csv"))?;
        let measurements = table::read_series(&dir.join("measurements.csv"))?;
        if states.len() != measurements.len() {
            return Err(invalid("states and measurements have different lengths"));
        }
        let dynamic_range = dynamic_range_screen(&model, &states);
        Ok(Self {
            model,
            obs,
            states,
            measurements,
            dynamic_range,
        })
    }
}
