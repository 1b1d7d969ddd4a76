mod common;

use common::*;
use dualkf::metrics::{crossval_state_mse, median, StateEstimator};
use dualkf::simgen::{fresh_trajectory, generate_ground_truth, SimulationSpec};
use nalgebra::DMatrix;

/// Growing perturbations of the free couplings never lower the median held-out MSE.
#[test]
fn perturbing_couplings_raises_median_mse() {
    let sigmas = [0.0, 0.1, 0.3];
    let mut per_sigma: Vec<Vec<f64>> = vec![Vec::new(); sigmas.len()];
    for seed in 0..24u64 {
        let spec = SimulationSpec {
            n_nodes: 8,
            horizon: 300,
            seed,
            ..Default::default()
        };
        let truth = generate_ground_truth(&spec).unwrap();
        let heldout = fresh_trajectory(&truth, 300, seed + 10_000).unwrap();
        let b = truth.model.b_matrix();
        let mask = truth.model.free_mask();
        let free: Vec<f64> = b.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let rms = (free.iter().map(|v| v * v).sum::<f64>() / free.len() as f64).sqrt();
        let noise = gaussian(b.nrows(), b.ncols(), 1.0, &mut rng(seed + 20_000));
        for (i, sigma) in sigmas.iter().enumerate() {
            let delta = DMatrix::from_fn(b.nrows(), b.ncols(), |r, c| if mask[(r, c)] { noise[(r, c)] * sigma * rms } else { 0.0 });
            let model = truth.model.clone().with_b_matrix(b + delta).unwrap();
            let score = crossval_state_mse(&model, &truth.obs, &heldout.states, &heldout.measurements, StateEstimator::Ekf, 1.0).unwrap();
            per_sigma[i].push(score.mse);
        }
    }
    let medians: Vec<f64> = per_sigma.iter_mut().map(|v| median(v).unwrap()).collect();
    assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
}
