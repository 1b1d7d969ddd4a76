mod common;

use common::*;
use dualkf::ekf::ObservationSetup;
use dualkf::model::{load_model, ModelFile, NetworkModel, Nonlinearity, TransitionModel};
use dualkf::optimizer::{batch_gradient, initialize_estimate, train, train_with_checkpoints, RateSchedule, TrainConfig};
use dualkf::simgen::{generate_ground_truth, simulate, SimulationNoise, SimulationSpec};
use dualkf::Error;
use nalgebra::{DMatrix, DVector};

fn scalar_linear(b: f64) -> NetworkModel {
    NetworkModel::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, b), DVector::zeros(1))
        .unwrap()
        .with_nonlinearity(Nonlinearity::Identity)
}

#[test]
fn zero_gradient_leaves_model_unchanged() {
    let n = 3;
    let model = NetworkModel::new(DMatrix::zeros(n, n), DMatrix::zeros(n, n), DVector::zeros(n)).unwrap();
    let obs = random_setup(n, 2, &mut rng(1));
    let y = vec![DVector::zeros(2); 100];
    let cfg = TrainConfig {
        n_iterations: 50,
        x0_std: 0.0,
        ..Default::default()
    };
    let out = train(&model, &obs, &y, &cfg).unwrap();
    assert_eq!(out.model, model);
    assert!(out.history.iter().all(|h| h.objective == 0.0 && h.grad_norm == 0.0));
}

#[test]
fn linear_scalar_gain_is_recovered() {
    let truth = scalar_linear(0.8);
    let obs = ObservationSetup::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 0.01, DMatrix::identity(1, 1) * 0.0025).unwrap();
    let traj = simulate(&truth, &SimulationNoise::from_setup(&obs), 5000, &DVector::zeros(1), &mut rng(2)).unwrap();
    // least-squares regression of x_{t+1} on x_t from the true states
    let (num, den) = traj.states.windows(2).fold((0.0, 0.0), |(a, b), w| (a + w[0][0] * w[1][0], b + w[0][0] * w[0][0]));
    let ls = num / den;
    let cfg = TrainConfig {
        n_iterations: 3000,
        rate: 0.01,
        batch_size: 8,
        seed: 3,
        schedule: RateSchedule::Geometric { factor: 0.5, every: 500 },
        ..Default::default()
    };
    let out = train(&scalar_linear(0.0), &obs, &traj.measurements, &cfg).unwrap();
    let fitted = out.model.b_matrix()[(0, 0)];
    assert!((fitted - 0.8).abs() / 0.8 < 0.05, "fitted {fitted}, least squares {ls}");
    assert!((fitted - ls).abs() / ls < 0.05, "fitted {fitted}, least squares {ls}");
}

fn small_benchmark() -> (dualkf::simgen::GroundTruth, NetworkModel) {
    let spec = SimulationSpec {
        n_nodes: 5,
        horizon: 2000,
        seed: 4,
        process_std: 1.0,
        ..Default::default()
    };
    let truth = generate_ground_truth(&spec).unwrap();
    let init = initialize_estimate(&truth.model, 5).unwrap();
    (truth, init)
}

#[test]
fn training_is_bitwise_reproducible_and_respects_mask() {
    let (truth, init) = small_benchmark();
    let cfg = TrainConfig {
        n_iterations: 300,
        seed: 9,
        batch_size: 3,
        ..Default::default()
    };
    let a = train(&init, &truth.obs, &truth.measurements, &cfg).unwrap();
    let b = train(&init, &truth.obs, &truth.measurements, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    let objs = |o: &dualkf::optimizer::TrainOutput<NetworkModel>| o.history.iter().map(|h| (h.objective, h.grad_norm)).collect::<Vec<_>>();
    assert_eq!(objs(&a), objs(&b));
    for (v, &free) in a.model.b_matrix().iter().zip(truth.model.free_mask().iter()) {
        if !free {
            assert_eq!(*v, 0.0);
        }
    }
    assert_eq!(a.optimizer.step_count, 300);
}

#[test]
fn smoothed_objective_decreases() {
    let (truth, init) = small_benchmark();
    let cfg = TrainConfig {
        n_iterations: 5000,
        seed: 1,
        p0_scale: 100.0,
        ..Default::default()
    };
    let out = train(&init, &truth.obs, &truth.measurements, &cfg).unwrap();
    let windows: Vec<f64> = out
        .history
        .chunks(500)
        .map(|c| c.iter().map(|h| h.objective).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(windows.last().unwrap() < windows.first().unwrap());
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * 1.1, "window means {windows:?}");
    }
}

#[test]
fn batch_gradient_is_a_mean() {
    let (truth, init) = small_benchmark();
    let cfg = TrainConfig::default();
    let x0 = DVector::zeros(5);
    let (o1, g1) = batch_gradient(&init, &truth.obs, &truth.measurements, &[7], std::slice::from_ref(&x0), &cfg).unwrap();
    let (o3, g3) = batch_gradient(&init, &truth.obs, &truth.measurements, &[7, 7, 7], &[x0.clone(), x0.clone(), x0], &cfg).unwrap();
    assert!((o1 - o3).abs() <= 1e-12 * o1.abs());
    assert!((&g1 - &g3).amax() <= 1e-12 * g1.amax());
}

#[test]
fn divergence_reports_last_finite_parameters() {
    let model = scalar_linear(0.5);
    let obs = ObservationSetup::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 0.01, DMatrix::identity(1, 1) * 0.01).unwrap();
    let y = vec![DVector::from_element(1, 1e300); 32];
    let cfg = TrainConfig {
        n_iterations: 10,
        ..Default::default()
    };
    match train(&model, &obs, &y, &cfg) {
        Err(Error::TrainingDiverged { iteration, checkpoint, .. }) => {
            assert_eq!(iteration, 0);
            assert_eq!(checkpoint, vec![0.5]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn short_data_and_bad_config_are_rejected() {
    let model = scalar_linear(0.5);
    let obs = ObservationSetup::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 0.01, DMatrix::identity(1, 1) * 0.01).unwrap();
    let y = vec![DVector::zeros(1); 8];
    assert!(matches!(train(&model, &obs, &y, &TrainConfig::default()), Err(Error::InvalidInput(_))));
    let bad = TrainConfig {
        schedule: RateSchedule::Geometric { factor: 2.0, every: 10 },
        ..Default::default()
    };
    assert!(train(&model, &obs, &vec![DVector::zeros(1); 100], &bad).is_err());
}

#[test]
fn checkpoints_are_written() {
    let (truth, init) = small_benchmark();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        n_iterations: 40,
        checkpoint_every: 20,
        ..Default::default()
    };
    let to_file = |m: &NetworkModel| ModelFile::from_network(m, None);
    let out = train_with_checkpoints(&init, &truth.obs, &truth.measurements, &cfg, Some((dir.path(), &to_file))).unwrap();
    let last = load_model(&dir.path().join("checkpoint_0000040.json")).unwrap().to_network().unwrap();
    assert_eq!(last, out.model);
    assert!(dir.path().join("checkpoint_0000020.json").exists());
    assert_eq!(last.param_count(), init.param_count());
}
