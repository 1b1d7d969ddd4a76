//! `dualkf`: generate benchmarks, fit models, score them and run campaigns.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualkf::harness::{config_hash, emit_plot_data, run_experiment, ExperimentConfig, Method};
use dualkf::joint::{jekf_run, jukf_run, JointTuning};
use dualkf::metrics::{crossval_state_mse, parameter_score, StateEstimator};
use dualkf::model::{load_model, save_model, ModelFile, Provenance};
use dualkf::optimizer::{initialize_estimate, train, write_history, write_history_timing, TrainConfig};
use dualkf::simgen::{fresh_trajectory, generate_ground_truth, GroundTruth, SimulationSpec};
use dualkf::{table, Error};

#[derive(Parser)]
#[command(name = "dualkf", version, about = "Dual state/parameter estimation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ground-truth network and its measurements.
    Generate(GenerateArgs),
    /// Fit connection weights to a generated data set.
    Fit(FitArgs),
    /// Score a fitted model against the ground truth it was fitted to.
    Score(ScoreArgs),
    /// Run a benchmark campaign over sizes, replicates and methods.
    Campaign(CampaignArgs),
    /// Summarize a campaign directory into plot-ready tables.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the model and data tables.
    #[arg(long)]
    out: PathBuf,
    /// JSON simulation spec; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    process_std: Option<f64>,
    #[arg(long)]
    measurement_std: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bp,
    Jekf,
    Jukf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ekf,
    Ukf,
}

#[derive(Args)]
struct FitArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "bp")]
    method: MethodArg,
    /// JSON TrainConfig (bp) or JointTuning (jekf, jukf).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Training seed (bp) and initial-estimate seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Seed of the held-out trajectory.
    #[arg(long, default_value_t = 1)]
    crossval_seed: u64,
    #[arg(long, default_value_t = 600)]
    horizon: usize,
    #[arg(long, value_enum, default_value = "ekf")]
    estimator: EstimatorArg,
    /// Initial state covariance scale for held-out filtering
    #[arg(long, default_value_t = 100.0)]
    p0_scale: f64,
}

#[derive(Args)]
struct CampaignArgs {
    /// JSON ExperimentConfig; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of bp,jekf,jukf.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated network sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Start from the full-scale budgets instead of the desk-scale defaults.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Campaign output directory.
    #[arg(long)]
    results: PathBuf,
}

/// Exit code 2 for configuration problems, 1 for runtime failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn generate(args: GenerateArgs) -> Result<(), Error> {
    let mut spec: SimulationSpec = match &args.config {
        Some(p) => read_json(p)?,
        None => SimulationSpec::default(),
    };
    spec.n_nodes = args.nodes.unwrap_or(spec.n_nodes);
    spec.horizon = args.horizon.unwrap_or(spec.horizon);
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.process_std = args.process_std.unwrap_or(spec.process_std);
    spec.measurement_std = args.measurement_std.unwrap_or(spec.measurement_std);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let truth = generate_ground_truth(&spec)?;
    let provenance = Provenance {
        config_hash: config_hash(&spec),
        seed: spec.seed,
    };
    truth.save(&args.out, &provenance)?;
    std::fs::write(args.out.join("simulation.json"), serde_json::to_string_pretty(&spec)?)?;
    println!("wrote {} ({} nodes, {} steps)", args.out.display(), spec.n_nodes, spec.horizon);
    Ok(())
}

fn fit(args: FitArgs) -> Result<(), Error> {
    let truth = GroundTruth::load(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let init = initialize_estimate(&truth.model, args.seed)?;
    let (model, hash) = match args.method {
        MethodArg::Bp => {
            let mut cfg: TrainConfig = match &args.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = args.seed;
            cfg.n_iterations = args.iterations.unwrap_or(cfg.n_iterations);
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let provenance = Provenance {
                config_hash: config_hash(&cfg),
                seed: args.seed,
            };
            let out = train(&init, &truth.obs, &truth.measurements, &cfg)?;
            write_history(&args.out.join("loss.csv"), &provenance, &out.history)?;
            write_history_timing(&args.out.join("loss_timing.csv"), &provenance, &out.history)?;
            println!("final objective {:.6}", out.final_objective());
            (out.model, provenance.config_hash)
        }
        MethodArg::Jekf | MethodArg::Jukf => {
            let tuning: JointTuning = match &args.config {
                Some(p) => read_json(p)?,
                None => JointTuning::default(),
            };
            tuning.validate().map_err(|e| Error::Config(e.to_string()))?;
            let provenance = Provenance {
                config_hash: config_hash(&tuning),
                seed: args.seed,
            };
            let out = if matches!(args.method, MethodArg::Jekf) {
                jekf_run(&init, &truth.obs, &truth.measurements, &tuning)?
            } else {
                jukf_run(&init, &truth.obs, &truth.measurements, &tuning)?
            };
            table::write_series(&args.out.join("states.csv"), &provenance, "x", &out.states)?;
            println!("{} steps, {:.3e} s/step", out.states.len(), out.seconds_per_step());
            (out.model, provenance.config_hash)
        }
    };
    let file = ModelFile::from_network(
        &model,
        Some(Provenance {
            config_hash: hash,
            seed: args.seed,
        }),
    );
    save_model(&args.out.join("model.json"), &file)?;
    println!("wrote {}", args.out.join("model.json").display());
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), Error> {
    let truth = GroundTruth::load(&args.data)?;
    let fitted = load_model(&args.model)?.to_network()?;
    let estimator = match args.estimator {
        EstimatorArg::Ekf => StateEstimator::Ekf,
        EstimatorArg::Ukf => StateEstimator::Ukf,
    };
    let heldout = fresh_trajectory(&truth, args.horizon, args.crossval_seed)?;
    let params = parameter_score(fitted.b_matrix(), truth.model.b_matrix(), truth.model.free_mask())?;
    let fit_cv = crossval_state_mse(&fitted, &truth.obs, &heldout.states, &heldout.measurements, estimator, args.p0_scale)?;
    let true_cv = crossval_state_mse(&truth.model, &truth.obs, &heldout.states, &heldout.measurements, estimator, args.p0_scale)?;
    let report = serde_json::json!({
        "param_corr": params.corr,
        "param_rmse": params.rmse,
        "state_mse": fit_cv.mse,
        "state_mse_truth": true_cv.mse,
        "state_diverged": fit_cv.diverged,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn campaign(args: CampaignArgs) -> Result<bool, Error> {
    let mut config = match (&args.config, args.full_scale) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, true) => ExperimentConfig::full_scale(),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        config.master_seed = s;
    }
    if let Some(o) = args.out {
        config.output_dir = o;
    }
    if let Some(m) = args.methods {
        config.methods = m.iter().map(|s| s.parse::<Method>()).collect::<Result<_, _>>()?;
    }
    if let Some(s) = args.sizes {
        config.sizes = s;
        if config.replicates_per_size.as_ref().is_some_and(|r| r.len() != config.sizes.len()) {
            config.replicates_per_size = None;
        }
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
        config.replicates_per_size = None;
    }
    if let Some(i) = args.iterations {
        config.train.n_iterations = i;
    }
    let report = run_experiment(&config, args.jobs)?;
    println!(
        "{} score cards, {} failures, results in {}",
        report.cards.len(),
        report.failures.len(),
        report.dir.display()
    );
    for f in &report.failures {
        eprintln!(
            "run n={} r={} {}: {}",
            f.n,
            f.replicate,
            f.method.map_or("setup".to_string(), |m| m.to_string()),
            f.message
        );
    }
    Ok(report.succeeded())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Fit(a) => fit(a).map(|_| true),
        Command::Score(a) => score(a).map(|_| true),
        Command::Campaign(a) => campaign(a),
        Command::PlotData(a) => emit_plot_data(&a.results).map(|b| {
            println!("wrote {}", b.summary.display());
            if let Some(t) = b.trace {
                println!("wrote {}", t.display());
            }
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
