mod common;

use common::*;
use dualkf::ekf::{filter_segment, initial_covariance, ObservationSetup};
use dualkf::joint::{jekf_run, jukf_run, sigma_point_count, JointTuning};
use dualkf::model::{NetworkModel, Nonlinearity, TransitionModel};
use dualkf::simgen::{simulate, SimulationNoise};
use nalgebra::{DMatrix, DVector};

#[test]
fn without_parameters_jekf_is_the_ekf() {
    let mut r = rng(11);
    let n = 4;
    let model = untrainable(random_network(n, &mut r));
    assert_eq!(model.param_count(), 0);
    let obs = random_setup(n, 2, &mut r);
    let y = measurements(&model, &obs, 120, &mut r);
    let tuning = JointTuning::default();
    let joint = jekf_run(&model, &obs, &y, &tuning).unwrap();
    let (traj, _) = filter_segment(&model, &obs, &y, &DVector::zeros(n), &initial_covariance(n, tuning.state_init_var), 0).unwrap();
    for (a, b) in joint.states.iter().zip(traj.posterior_means()) {
        assert!((a - b).amax() <= 1e-10);
    }
}

#[test]
fn without_parameters_linear_jukf_is_the_ekf() {
    let mut r = rng(12);
    let n = 3;
    let a = DMatrix::from_row_slice(n, n, &[0.8, 0.1, 0.0, 0.0, 0.7, -0.2, 0.1, 0.0, 0.9]);
    let model = untrainable(NetworkModel::new(a, gaussian(n, n, 0.2, &mut r), DVector::zeros(n)).unwrap().with_nonlinearity(Nonlinearity::Identity));
    let obs = random_setup(n, 2, &mut r);
    let y = measurements(&model, &obs, 100, &mut r);
    let tuning = JointTuning::default();
    let joint = jukf_run(&model, &obs, &y, &tuning).unwrap();
    let (traj, _) = filter_segment(&model, &obs, &y, &DVector::zeros(n), &initial_covariance(n, 1.0), 0).unwrap();
    for (a, b) in joint.states.iter().zip(traj.posterior_means()) {
        assert!((a - b).amax() <= 1e-6);
    }
}

#[test]
fn linear_augmented_system_matches_exact_kf() {
    let mut r = rng(13);
    let n = 3;
    let a = DMatrix::from_row_slice(n, n, &[0.6, 0.2, 0.0, -0.1, 0.5, 0.1, 0.0, 0.3, 0.4]);
    let truth = linear_bias_model(a.clone(), DVector::from_vec(vec![0.3, -0.2, 0.5]));
    let obs = random_setup(n, 2, &mut r);
    let y = measurements(&truth, &obs, 300, &mut r);
    let template = linear_bias_model(a.clone(), DVector::zeros(n));
    let tuning = JointTuning::default();
    let oracle = augmented_kf(&a, &obs, &y, &DVector::zeros(n), &tuning);
    let e = jekf_run(&template, &obs, &y, &tuning).unwrap();
    let u = jukf_run(&template, &obs, &y, &tuning).unwrap();
    for (t, o) in oracle.iter().enumerate() {
        let x = o.rows(0, n).into_owned();
        assert!((&e.states[t] - &x).amax() <= 1e-10, "jEKF step {t}");
        assert!((&u.states[t] - &x).amax() <= 1e-6, "jUKF step {t}");
    }
    let theta = oracle.last().unwrap().rows(n, n).into_owned();
    assert!((&e.params - &theta).amax() <= 1e-10);
    assert!((&u.params - &theta).amax() <= 1e-6);
    assert_eq!(sigma_point_count(&template), 2 * (n + n) + 1);
}

#[test]
fn scalar_bias_is_identified() {
    let truth = linear_bias_model(DMatrix::identity(1, 1), DVector::from_element(1, 0.3));
    let noise = SimulationNoise {
        h: DMatrix::identity(1, 1),
        q: DMatrix::zeros(1, 1),
        r: DMatrix::zeros(1, 1),
    };
    let y = simulate(&truth, &noise, 2000, &DVector::zeros(1), &mut rng(0)).unwrap().measurements;
    let obs = ObservationSetup::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1) * 1e-4).unwrap();
    let template = linear_bias_model(DMatrix::identity(1, 1), DVector::zeros(1));
    let tuning = JointTuning::default();
    let e = jekf_run(&template, &obs, &y, &tuning).unwrap();
    let u = jukf_run(&template, &obs, &y, &tuning).unwrap();
    assert!((e.params[0] - 0.3).abs() < 1e-3, "jEKF {}", e.params[0]);
    assert!((u.params[0] - 0.3).abs() < 1e-3, "jUKF {}", u.params[0]);
    assert!((e.model.bias()[0] - 0.3).abs() < 1e-3);
}

#[test]
fn nonlinear_runs_stay_finite_and_symmetric() {
    let mut r = rng(14);
    let n = 4;
    let truth = random_network(n, &mut r).with_trainable_offset(false).with_trainable_bias(false);
    let obs = random_setup(n, 2, &mut r);
    let y = measurements(&truth, &obs, 200, &mut r);
    let tuning = JointTuning::default();
    for out in [jekf_run(&truth, &obs, &y, &tuning).unwrap(), jukf_run(&truth, &obs, &y, &tuning).unwrap()] {
        assert_eq!(out.states.len(), 200);
        assert!(out.params.iter().all(|v| v.is_finite()));
        assert_eq!(out.step_seconds.len(), 200);
    }
}
