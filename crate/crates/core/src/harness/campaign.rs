//! Campaign execution: one run per `(size, replicate)`, every selected method,
//! results merged into sorted tables.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::config::{derive_seed, ExperimentConfig, Method};
use crate::joint::{jekf_run, jukf_run, JointOutput};
use crate::metrics::{crossval_state_mse, parameter_score, ScoreCard};
use crate::model::{save_model, ModelFile, NetworkModel, Provenance};
use crate::optimizer::{initialize_estimate, mean_objective, train_with_checkpoints, write_history_timing, write_history};
use crate::simgen::{fresh_trajectory, generate_ground_truth, GroundTruth, Trajectory};
use crate::table;

pub const SCORECARD_FILE: &str = "scorecards.csv";
pub const TIMING_FILE: &str = "timings.csv";
pub const FAILURE_FILE: &str = "failures.csv";

const SCORECARD_HEADER: [&str; 11] = [
    "method",
    "n",
    "replicate",
    "seed",
    "param_corr",
    "param_rmse",
    "state_mse",
    "state_mse_truth",
    "state_diverged",
    "objective_final",
    "work_units",
];
const TIMING_HEADER: [&str; 5] = ["method", "n", "replicate", "seed", "wall_time_per_iteration"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub n: usize,
    pub replicate: usize,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub dir: PathBuf,
    pub cards: Vec<ScoreCard>,
    pub failures: Vec<RunFailure>,
}

impl CampaignReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A fitted model plus its bookkeeping.
struct Fit {
    model: NetworkModel,
    seconds_per_unit: f64,
    work_units: usize,
}

pub fn run_dir(root: &Path, n: usize, replicate: usize) -> PathBuf {
    root.join("runs").join(format!("n{n:03}_r{replicate:03}"))
}

fn fit_method(
    method: Method,
    truth: &GroundTruth,
    init: &NetworkModel,
    config: &ExperimentConfig,
    train_seed: u64,
    dir: &Path,
    provenance: &Provenance,
) -> Result<Fit> {
    let joint_fit = |out: JointOutput<NetworkModel>| Fit {
        seconds_per_unit: out.seconds_per_step(),
        work_units: out.states.len(),
        model: out.model,
    };
    match method {
        Method::Bp => {
            let mut train = config.train.clone();
            train.seed = train_seed;
            let to_file = |m: &NetworkModel| ModelFile::from_network(m, Some(provenance.clone()));
            let out = train_with_checkpoints(init, &truth.obs, &truth.measurements, &train, Some((dir, &to_file)))?;
            write_history(&dir.join("loss.csv"), provenance, &out.history)?;
            write_history_timing(&dir.join("loss_timing.csv"), provenance, &out.history)?;
            Ok(Fit {
                seconds_per_unit: out.seconds_per_iteration(),
                work_units: out.history.len(),
                model: out.model,
            })
        }
        Method::Jekf => jekf_run(init, &truth.obs, &truth.measurements, &config.joint).map(joint_fit),
        Method::Jukf => jukf_run(init, &truth.obs, &truth.measurements, &config.joint).map(joint_fit),
    }
}

#[allow(clippy::too_many_arguments)]
fn score(
    method: Method,
    fit: &Fit,
    truth: &GroundTruth,
    heldout: &Trajectory,
    truth_mse: f64,
    config: &ExperimentConfig,
    dir: &Path,
    provenance: &Provenance,
    replicate: usize,
) -> Result<(ScoreCard, usize)> {
    let (corr, rmse) = match parameter_score(fit.model.b_matrix(), truth.model.b_matrix(), truth.model.free_mask()) {
        Ok(s) => (s.corr, s.rmse),
        Err(Error::UndefinedCorrelation(msg)) => {
            log::warn!("{method} n={} r={replicate}: {msg}", truth.model.n());
            (f64::NAN, f64::NAN)
        }
        Err(e) => return Err(e),
    };
    let cv = crossval_state_mse(
        &fit.model,
        &truth.obs,
        &heldout.states,
        &heldout.measurements,
        config.crossval_estimator,
        config.train.p0_scale,
    )?;
    if !cv.diverged {
        let x0 = DVector::zeros(truth.model.n());
        let p0 = crate::ekf::initial_covariance(truth.model.n(), config.train.p0_scale);
        let estimates = match config.crossval_estimator {
            crate::metrics::StateEstimator::Ekf => {
                crate::ekf::filter_segment(&fit.model, &truth.obs, &heldout.measurements, &x0, &p0, 0)?
                    .0
                    .posterior_means()
            }
            crate::metrics::StateEstimator::Ukf => crate::joint::ukf_filter(
                &fit.model,
                &truth.obs,
                &heldout.measurements,
                &x0,
                &p0,
                crate::joint::UkfScaling::default(),
            )?,
        };
        table::write_series(&dir.join("crossval_states.csv"), provenance, "x", &estimates)?;
    }
    let objective = mean_objective(&fit.model, &truth.obs, &truth.measurements, config.objective_segments, &config.train);
    Ok((
        ScoreCard {
            method: method.tag().to_string(),
            seed: provenance.seed,
            n: truth.model.n(),
            replicate,
            param_corr: corr,
            param_rmse: rmse,
            state_mse: cv.mse,
            state_mse_truth: truth_mse,
            state_diverged: cv.diverged,
            objective_final: objective,
            wall_time_per_iteration: fit.seconds_per_unit,
        },
        fit.work_units,
    ))
}

struct RunOutput {
    cards: Vec<(ScoreCard, usize)>,
    failures: Vec<RunFailure>,
}

fn execute_run(config: &ExperimentConfig, hash: &str, n: usize, replicate: usize, root: &Path) -> RunOutput {
    let truth_seed = derive_seed(config.master_seed, n, replicate, "truth");
    let provenance = Provenance {
        config_hash: hash.to_string(),
        seed: truth_seed,
    };
    let fail = |method: Option<Method>, e: &Error| RunFailure {
        n,
        replicate,
        method,
        message: e.to_string(),
    };
    let dir = run_dir(root, n, replicate);
    let prepared = (|| -> Result<(GroundTruth, NetworkModel, Trajectory, f64)> {
        fs::create_dir_all(&dir)?;
        let spec = crate::simgen::SimulationSpec {
            n_nodes: n,
            seed: truth_seed,
            ..config.simulation.clone()
        };
        let truth = generate_ground_truth(&spec)?;
        truth.save(&dir.join("truth"), &provenance)?;
        let init = initialize_estimate(&truth.model, derive_seed(config.master_seed, n, replicate, "init"))?;
        let heldout = fresh_trajectory(&truth, config.crossval_horizon, derive_seed(config.master_seed, n, replicate, "crossval"))?;
        table::write_series(&dir.join("crossval_truth.csv"), &provenance, "x", &heldout.states)?;
        let truth_cv = crossval_state_mse(
            &truth.model,
            &truth.obs,
            &heldout.states,
            &heldout.measurements,
            config.crossval_estimator,
            config.train.p0_scale,
        )?;
        Ok((truth, init, heldout, truth_cv.mse))
    })();
    let (truth, init, heldout, truth_mse) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log::error!("run n={n} r={replicate} failed during setup: {e}");
            return RunOutput {
                cards: Vec::new(),
                failures: vec![fail(None, &e)],
            };
        }
    };
    let train_seed = derive_seed(config.master_seed, n, replicate, "train");
    let mut cards = Vec::new();
    let mut failures = Vec::new();
    for &method in &config.methods {
        let mdir = dir.join(method.tag());
        let result = fs::create_dir_all(&mdir).map_err(Error::from).and_then(|_| {
            let fit = fit_method(method, &truth, &init, config, train_seed, &mdir, &provenance)?;
            save_model(&mdir.join("model.json"), &ModelFile::from_network(&fit.model, Some(provenance.clone())))?;
            score(method, &fit, &truth, &heldout, truth_mse, config, &mdir, &provenance, replicate)
        });
        match result {
            Ok(card) => {
                log::info!(
                    "{method} n={n} r={replicate}: corr {:.3}, state mse {:.4}",
                    card.0.param_corr,
                    card.0.state_mse
                );
                cards.push(card);
            }
            Err(e) => {
                log::error!("{method} n={n} r={replicate} failed: {e}");
                failures.push(fail(Some(method), &e));
            }
        }
    }
    let out = RunOutput { cards, failures };
    if let Err(e) = write_cards(&dir, &provenance, &out.cards, &out.failures) {
        log::error!("could not write run tables for n={n} r={replicate}: {e}");
    }
    out
}

fn card_row(card: &ScoreCard, work_units: usize) -> Vec<String> {
    vec![
        card.method.clone(),
        card.n.to_string(),
        card.replicate.to_string(),
        card.seed.to_string(),
        format!("{}", card.param_corr),
        format!("{}", card.param_rmse),
        format!("{}", card.state_mse),
        format!("{}", card.state_mse_truth),
        card.state_diverged.to_string(),
        format!("{}", card.objective_final),
        work_units.to_string(),
    ]
}

fn timing_row(card: &ScoreCard) -> Vec<String> {
    vec![
        card.method.clone(),
        card.n.to_string(),
        card.replicate.to_string(),
        card.seed.to_string(),
        format!("{}", card.wall_time_per_iteration),
    ]
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn write_cards(dir: &Path, provenance: &Provenance, cards: &[(ScoreCard, usize)], failures: &[RunFailure]) -> Result<()> {
    let rows: Vec<Vec<String>> = cards.iter().map(|(c, w)| card_row(c, *w)).collect();
    table::write_rows(&dir.join(SCORECARD_FILE), provenance, &header(&SCORECARD_HEADER), &rows)?;
    let rows: Vec<Vec<String>> = cards.iter().map(|(c, _)| timing_row(c)).collect();
    table::write_rows(&dir.join(TIMING_FILE), provenance, &header(&TIMING_HEADER), &rows)?;
    let rows: Vec<Vec<String>> = failures
        .iter()
        .map(|f| {
            vec![
                f.n.to_string(),
                f.replicate.to_string(),
                f.method.map_or("-".to_string(), |m| m.tag().to_string()),
                f.message.clone(),
            ]
        })
        .collect();
    table::write_rows(&dir.join(FAILURE_FILE), provenance, &header(&["n", "replicate", "method", "message"]), &rows)
}

/// Runs every `(size, replicate)` of `config` on `jobs` worker threads.
///
/// Per-run failures are recorded in `failures.csv` and do not stop the
/// campaign. Output tables are sorted by `(n, replicate, method)` so they do
/// not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<CampaignReport> {
    config.validate()?;
    let root = config.output_dir.clone();
    fs::create_dir_all(&root)?;
    config.save(&root.join("config.json"))?;
    let hash = config.hash();
    let mut tasks = Vec::new();
    for (i, &n) in config.sizes.iter().enumerate() {
        for r in 0..config.replicates_for(i) {
            tasks.push((n, r));
        }
    }
    tasks.sort_unstable();
    tasks.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, r)| execute_run(config, &hash, n, r, &root))
            .collect()
    });
    let mut cards: Vec<(ScoreCard, usize)> = Vec::new();
    let mut failures = Vec::new();
    for o in outputs {
        cards.extend(o.cards);
        failures.extend(o.failures);
    }
    cards.sort_by(|a, b| (a.0.n, a.0.replicate, &a.0.method).cmp(&(b.0.n, b.0.replicate, &b.0.method)));
    let provenance = Provenance {
        config_hash: hash,
        seed: config.master_seed,
    };
    write_cards(&root, &provenance, &cards, &failures)?;
    Ok(CampaignReport {
        dir: root,
        cards: cards.into_iter().map(|(c, _)| c).collect(),
        failures,
    })
}
