//! Scoring: parameter recovery, held-out state estimation and summary statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::{filter_segment, initial_covariance, ObservationSetup};
use crate::error::{Error, Result};
use crate::joint::{ukf_filter, UkfScaling};
use crate::model::TransitionModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterScore {
    pub corr: f64,
    pub rmse: f64,
}

/// Pearson correlation by the two-pass formula.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length samples of at least 2 values (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a sample has zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation and RMSE between `fitted` and `truth` over entries where `mask` is set.
pub fn parameter_score(fitted: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<ParameterScore> {
    if fitted.shape() != truth.shape() || mask.shape() != truth.shape() {
        return Err(crate::error::invalid("fitted, truth and mask shapes differ"));
    }
    let (mut f, mut t) = (Vec::new(), Vec::new());
    for ((a, b), &m) in fitted.iter().zip(truth.iter()).zip(mask.iter()) {
        if m {
            f.push(*a);
            t.push(*b);
        }
    }
    if f.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("only {} free entries", f.len())));
    }
    let rmse = (f.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    Ok(ParameterScore {
        corr: pearson(&f, &t)?,
        rmse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StateEstimator {
    #[default]
    Ekf,
    Ukf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossvalScore {
    /// Mean over steps and coordinates of `(x̂_t − x_t)²`; infinite on divergence.
    pub mse: f64,
    pub diverged: bool,
}

/// Filters held-out `measurements` with `model` from `x̂₀ = 0`, `P₀ = p0_scale·I`
/// and scores the posterior means against `states`.
pub fn crossval_state_mse<M: TransitionModel>(
    model: &M,
    obs: &ObservationSetup,
    states: &[DVector<f64>],
    measurements: &[DVector<f64>],
    estimator: StateEstimator,
    p0_scale: f64,
) -> Result<CrossvalScore> {
    if states.len() != measurements.len() || states.is_empty() {
        return Err(crate::error::invalid("held-out states and measurements must have equal, nonzero length"));
    }
    let n = model.state_dim();
    let x0 = DVector::zeros(n);
    let p0 = initial_covariance(n, p0_scale);
    let estimates = match estimator {
        StateEstimator::Ekf => filter_segment(model, obs, measurements, &x0, &p0, 0).map(|(t, _)| t.posterior_means()),
        StateEstimator::Ukf => ukf_filter(model, obs, measurements, &x0, &p0, UkfScaling::default()),
    };
    let estimates = match estimates {
        Ok(e) => e,
        Err(Error::SingularInnovation { step } | Error::FilterDiverged { step }) => {
            log::warn!("held-out filter diverged at step {step}");
            return Ok(CrossvalScore {
                mse: f64::INFINITY,
                diverged: true,
            });
        }
        Err(e) => return Err(e),
    };
    let total: f64 = estimates
        .iter()
        .zip(states)
        .map(|(e, x)| (e - x).norm_squared())
        .sum();
    let mse = total / (states.len() * n) as f64;
    Ok(CrossvalScore {
        mse,
        diverged: !mse.is_finite(),
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub method: String,
    /// Ground-truth seed.
    pub seed: u64,
    pub n: usize,
    pub replicate: usize,
    pub param_corr: f64,
    pub param_rmse: f64,
    pub state_mse: f64,
    /// Held-out MSE of the same estimator run with the true model.
    pub state_mse_truth: f64,
    pub state_diverged: bool,
    pub objective_final: f64,
    /// Median seconds per iteration (BP) or per filter step (joint filters).
    pub wall_time_per_iteration: f64,
}

/// Median of finite values; sorts `v` in place.
pub fn median(v: &mut [f64]) -> Option<f64> {
    quantile(v, 0.5)
}

/// Quantile with linear interpolation between order statistics
/// (`h = (m−1)·p`, the default of most statistics packages).
pub fn quantile(v: &mut [f64], p: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    Some(Summary {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q1: quantile(&mut v, 0.25)?,
        q3: quantile(&mut v, 0.75)?,
        count: v.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkModel;
    use proptest::prelude::*;

    #[test]
    fn identical_and_negated() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let mask = DMatrix::from_element(2, 2, true);
        let s = parameter_score(&t, &t, &mask).unwrap();
        assert!((s.corr - 1.0).abs() < 1e-15 && s.rmse == 0.0);
        let s = parameter_score(&(-&t), &t, &mask).unwrap();
        assert!((s.corr + 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_entries() {
        let t = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let mask = DMatrix::from_row_slice(1, 2, &[true, false]);
        assert!(matches!(parameter_score(&t, &t, &mask), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn masked_entries_are_ignored() {
        let t = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 100.0]);
        let f = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, -100.0]);
        let mask = DMatrix::from_row_slice(1, 4, &[true, true, true, false]);
        let s = parameter_score(&f, &t, &mask).unwrap();
        assert_eq!(s.rmse, 0.0);
    }

    #[test]
    fn correlation_matches_textbook_formula() {
        let a = [0.3, -1.2, 2.5, 0.7, -0.4, 1.1];
        let b = [0.1, -0.8, 1.9, 1.2, 0.2, 0.4];
        // single-pass sums formula
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let r = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pearson(&a, &b).unwrap() - r).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relabeling_nodes_preserves_score(vals in proptest::collection::vec(-3.0f64..3.0, 18), perm_seed in 0usize..6) {
            let truth = DMatrix::from_row_slice(3, 3, &vals[..9]);
            let fitted = DMatrix::from_row_slice(3, 3, &vals[9..]);
            let mask = DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) % 4 != 0);
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm_seed];
            let relabel = |m: &DMatrix<f64>| DMatrix::from_fn(3, 3, |i, j| m[(p[i], p[j])]);
            let mask_r = DMatrix::from_fn(3, 3, |i, j| mask[(p[i], p[j])]);
            let a = parameter_score(&fitted, &truth, &mask);
            let b = parameter_score(&relabel(&fitted), &relabel(&truth), &mask_r);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.corr - b.corr).abs() < 1e-12);
                prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quartiles_use_linear_interpolation() {
        let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.q1, s.q3), (2.0, 1.5, 2.5));
        let s = summarize(&[4.2]).unwrap();
        assert_eq!((s.mean, s.q1, s.q3), (4.2, 4.2, 4.2));
        assert!(summarize(&[]).is_none());
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(median(&mut v), Some(2.5));
    }

    #[test]
    fn noiseless_identity_observation_converges() {
        let n = 3;
        let model = NetworkModel::hopfield(
            DMatrix::from_row_slice(n, n, &[0.2, -0.5, 0.1, 0.4, 0.0, -0.3, 0.1, 0.2, 0.3]),
            DVector::from_element(n, 0.5),
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
        )
        .unwrap();
        // tiny R keeps the innovation covariance invertible
        let obs = ObservationSetup::new(DMatrix::identity(n, n), DMatrix::zeros(n, n), DMatrix::identity(n, n) * 1e-14).unwrap();
        let mut x = DVector::from_vec(vec![0.5, -0.5, 0.2]);
        let mut states = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..50 {
            x = model.step(&x).unwrap();
            states.push(x.clone());
            ys.push(x.clone());
        }
        for est in [StateEstimator::Ekf, StateEstimator::Ukf] {
            let s = crossval_state_mse(&model, &obs, &states, &ys, est, 1.0).unwrap();
            assert!(s.mse < 1e-12, "{est:?}: {}", s.mse);
        }
    }
}
