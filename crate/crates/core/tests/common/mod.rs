#![allow(dead_code)]

use dualkf::ekf::{filter_segment, initial_covariance, ObservationSetup};
use dualkf::linalg::orthonormalize;
use dualkf::model::{NetworkModel, Nonlinearity, TransitionModel};
use dualkf::backprop::{backward_general, backward_network};
use dualkf::joint::JointTuning;
use dualkf::simgen::{simulate, SimulationNoise};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Tanh network with random `A`, `B`, offset, gain and bias, every block trainable.
pub fn random_network(n: usize, rng: &mut ChaCha8Rng) -> NetworkModel {
    let a = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.1..0.9)));
    let b = gaussian(n, n, 1.0 / (n as f64).sqrt(), rng);
    let offset = gaussian_vec(n, 0.3, rng);
    let gain = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let bias = gaussian_vec(n, 0.3, rng);
    NetworkModel::new(a, b, offset)
        .unwrap()
        .with_gain(gain)
        .unwrap()
        .with_bias(bias)
        .unwrap()
        .with_trainable_offset(true)
        .with_trainable_bias(true)
}

pub fn random_setup(n: usize, p: usize, rng: &mut ChaCha8Rng) -> ObservationSetup {
    let h = orthonormalize(gaussian(n, p, 1.0, rng)).transpose() * 1.5;
    let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.01..0.05)));
    let r = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| rng.random_range(0.05..0.2)));
    ObservationSetup::new(h, q, r).unwrap()
}

pub fn measurements<M: TransitionModel>(model: &M, obs: &ObservationSetup, k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let x0 = gaussian_vec(model.state_dim(), 0.5, rng);
    simulate(model, &SimulationNoise::from_setup(obs), k, &x0, rng).unwrap().measurements
}

/// Filter objective as a function of the packed parameters.
pub fn objective<M: TransitionModel>(
    model: &M,
    theta: &DVector<f64>,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    x0: &DVector<f64>,
    warmup: usize,
) -> f64 {
    let m = model.unpack_parameters(theta).unwrap();
    let p0 = initial_covariance(model.state_dim(), 1.0);
    filter_segment(&m, obs, y, x0, &p0, warmup).unwrap().1
}

/// Central differences of the filter objective.
pub fn finite_difference_gradient<M: TransitionModel>(
    model: &M,
    obs: &ObservationSetup,
    y: &[DVector<f64>],
    x0: &DVector<f64>,
    warmup: usize,
    h: f64,
) -> DVector<f64> {
    let theta = model.pack_parameters().values;
    DVector::from_fn(theta.len(), |j, _| {
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        (objective(model, &plus, obs, y, x0, warmup) - objective(model, &minus, obs, y, x0, warmup)) / (2.0 * h)
    })
}

/// `|a − b| / max(|a|, |b|, floor)`, maximised over coordinates.
pub fn max_relative_error(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Plain textbook EKF written against the network equations directly.
pub struct TextbookEkf {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    offset: DVector<f64>,
    gain: DVector<f64>,
    bias: DVector<f64>,
    linear: bool,
}

impl TextbookEkf {
    pub fn from_model(m: &NetworkModel) -> Self {
        Self {
            a: m.a_matrix().clone(),
            b: m.b_matrix().clone(),
            offset: m.offset().clone(),
            gain: m.gain().clone(),
            bias: m.bias().clone(),
            linear: m.nonlinearity() == Nonlinearity::Identity,
        }
    }

    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.gain.component_mul(x) + &self.offset;
        let phi = if self.linear { u } else { u.map(f64::tanh) };
        &self.a * x + &self.b * phi + &self.bias
    }

    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let u = self.gain.component_mul(x) + &self.offset;
        let d = if self.linear {
            self.gain.clone()
        } else {
            u.map(|v| 1.0 - v.tanh().powi(2)).component_mul(&self.gain)
        };
        &self.a + &self.b * DMatrix::from_diagonal(&d)
    }

    pub fn run(&self, obs: &ObservationSetup, y: &[DVector<f64>], x0: &DVector<f64>, p0: &DMatrix<f64>) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let (h, q, r) = (obs.h(), obs.q(), obs.r());
        let n = x0.len();
        let mut x = x0.clone();
        let mut p = p0.clone();
        let mut out = Vec::new();
        for yt in y {
            let f = self.jac(&x);
            let xp = self.f(&x);
            let pp = &f * &p * f.transpose() + q;
            let s = h * &pp * h.transpose() + r;
            let k = &pp * h.transpose() * s.try_inverse().unwrap();
            x = &xp + &k * (yt - h * &xp);
            p = (DMatrix::identity(n, n) - &k * h) * pp;
            out.push((x.clone(), p.clone()));
        }
        out
    }
}

pub fn untrainable(model: NetworkModel) -> NetworkModel {
    let n = model.n();
    model
        .with_free_mask(DMatrix::from_element(n, n, false))
        .unwrap()
        .with_trainable_offset(false)
        .with_trainable_bias(false)
}

/// `x' = A x + θ` with the bias `θ` trainable.
pub fn linear_bias_model(a: DMatrix<f64>, bias: DVector<f64>) -> NetworkModel {
    let n = a.nrows();
    untrainable(NetworkModel::new(a, DMatrix::zeros(n, n), DVector::zeros(n)).unwrap().with_nonlinearity(Nonlinearity::Identity))
        .with_bias(bias)
        .unwrap()
        .with_trainable_bias(true)
}

/// Exact Kalman filter on the augmented linear system with the annealing schedule.
pub fn augmented_kf(a: &DMatrix<f64>, obs: &ObservationSetup, y: &[DVector<f64>], theta0: &DVector<f64>, tuning: &JointTuning) -> Vec<DVector<f64>> {
    let n = a.nrows();
    let d = 2 * n;
    let mut f = DMatrix::zeros(d, d);
    f.view_mut((0, 0), (n, n)).copy_from(a);
    f.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    f.view_mut((n, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut h = DMatrix::zeros(obs.measurement_dim(), d);
    h.view_mut((0, 0), (obs.measurement_dim(), n)).copy_from(obs.h());
    let mut x = DVector::zeros(d);
    x.rows_mut(n, n).copy_from(theta0);
    let mut p = DMatrix::zeros(d, d);
    for i in 0..d {
        p[(i, i)] = if i < n { tuning.state_init_var } else { tuning.param_init_var };
    }
    let mut out = Vec::new();
    for (t, yt) in y.iter().enumerate() {
        let mut q = DMatrix::zeros(d, d);
        q.view_mut((0, 0), (n, n)).copy_from(obs.q());
        for i in n..d {
            q[(i, i)] = tuning.annealed_variance(t);
        }
        let xp = &f * &x;
        let pp = &f * &p * f.transpose() + q;
        let s = &h * &pp * h.transpose() + obs.r();
        let k = &pp * h.transpose() * s.try_inverse().unwrap();
        x = &xp + &k * (yt - &h * &xp);
        p = (DMatrix::identity(d, d) - &k * &h) * pp;
        p = (&p + p.transpose()) * 0.5;
        out.push(x.clone());
    }
    out
}

pub const FD_STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;

/// Returns the finite-difference error of the general gradient and the
/// network-vs-general discrepancy.
pub fn check_network(n: usize, k: usize, warmup: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let model = random_network(n, &mut r);
    let p = (n / 2).max(1);
    let obs = random_setup(n, p, &mut r);
    let y = measurements(&model, &obs, k, &mut r);
    let x0 = gaussian_vec(n, 0.1, &mut r);
    let p0 = initial_covariance(n, 1.0);
    let (traj, _) = filter_segment(&model, &obs, &y, &x0, &p0, warmup).unwrap();
    let net = backward_network(&traj, &model, &obs, &y).unwrap();
    let gen = backward_general(&traj, &model, &obs, &y).unwrap();
    let fd = finite_difference_gradient(&model, &obs, &y, &x0, warmup, FD_STEP);
    (
        max_relative_error(&gen.grad.values, &fd, FLOOR),
        max_relative_error(&net.grad.values, &gen.grad.values, 1e-12),
    )
}

fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

/// Worst relative deviation from the textbook EKF on one random network.
pub fn textbook_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let p = r.random_range(1..=n);
    let model = random_network(n, &mut r);
    let obs = random_setup(n, p, &mut r);
    let y = measurements(&model, &obs, 30, &mut r);
    let x0 = gaussian_vec(n, 0.1, &mut r);
    let p0 = initial_covariance(n, 1.0);
    let (traj, _) = filter_segment(&model, &obs, &y, &x0, &p0, 0).unwrap();
    let oracle = TextbookEkf::from_model(&model).run(&obs, &y, &x0, &p0);
    let mut worst = 0.0f64;
    for (step, (xo, po)) in traj.steps.iter().zip(&oracle) {
        worst = worst.max((&step.x_post - xo).amax() / xo.amax().max(1.0));
        worst = worst.max((&step.p_post - po).amax() / scale_of(po));
    }
    worst
}

/// Worst relative deviation from an exact Joseph-form Kalman filter on one
/// random linear network.
pub fn linear_kf_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=6);
    let p = r.random_range(1..=n);
    let model = random_network(n, &mut r).with_nonlinearity(Nonlinearity::Identity);
    let b = model.b_matrix() * 0.3;
    let model = model.with_b_matrix(b).unwrap();
    let obs = random_setup(n, p, &mut r);
    let y = measurements(&model, &obs, 40, &mut r);
    let x0 = DVector::zeros(n);
    let p0 = initial_covariance(n, 2.0);
    // x' = F x + u with F = A + B diag(s), u = B c + bias
    let f = model.a_matrix() + model.b_matrix() * DMatrix::from_diagonal(model.gain());
    let u = model.b_matrix() * model.offset() + model.bias();
    let (h, q, rr) = (obs.h(), obs.q(), obs.r());
    let (mut x, mut pc) = (x0.clone(), p0.clone());
    let (traj, _) = filter_segment(&model, &obs, &y, &x0, &p0, 0).unwrap();
    let mut worst = 0.0f64;
    for (step, yt) in traj.steps.iter().zip(&y) {
        let xp = &f * &x + &u;
        let pp = &f * &pc * f.transpose() + q;
        let s = h * &pp * h.transpose() + rr;
        let k = &pp * h.transpose() * s.try_inverse().unwrap();
        x = &xp + &k * (yt - h * &xp);
        let ikh = DMatrix::identity(n, n) - &k * h;
        // Joseph form, algebraically equal to (I − KH)P
        pc = &ikh * &pp * ikh.transpose() + &k * rr * k.transpose();
        worst = worst.max((&step.x_post - &x).amax() / x.amax().max(1.0));
        worst = worst.max((&step.p_post - &pc).amax() / scale_of(&pc));
    }
    worst
}
