//! Command-line front end for the indoor-positioning toolkit.
//!
//! Every command reads one TOML experiment config and writes its artifacts
//! into the output directory. The stage commands (`simulate` through
//! `track`) run the deterministic pipeline up to and including their stage,
//! so a later command reproduces and extends the artifacts of an earlier
//! one; `evaluate` runs everything and reports aggregate accuracy.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cirfuse::features::FeatureId;
use cirfuse::gpr::GprModel;
use cirfuse::harness::{
    export_field, gridsearch_features, io, load_config, run_experiment, run_pipeline,
    AggregateStats, DbMode, ExperimentConfig, PipelineStage,
};

#[derive(Parser)]
#[command(
    name = "cirfuse",
    version,
    about = "UWB indoor-positioning toolkit: channel simulation, feature \
             extraction, GP observation models, and particle-filter tracking"
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,

    /// Override the base seed from the config; all stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all produced artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fingerprint and evaluation walks and their channel
    /// measurements.
    Simulate,
    /// Additionally train the magnitude autoencoder on the fingerprint
    /// measurements (requires an [autoencoder] config section).
    TrainAe,
    /// Additionally extract LOS decisions and feature values for both
    /// datasets.
    Extract,
    /// Additionally build the fingerprint database and train one GP model
    /// per (anchor, feature).
    TrainGpr,
    /// Additionally run every configured tracker mode over the evaluation
    /// walk, once per repeat.
    Track,
    /// Run the full pipeline and report aggregate accuracy statistics.
    Evaluate,
    /// Rank feature subsets by fusion tracking accuracy.
    Gridsearch,
    /// Export one trained GP model as a grid of predictive mean and
    /// standard deviation over the room.
    ExportField {
        /// Anchor index of the model.
        #[arg(long)]
        anchor: usize,
        /// Feature name of the model, e.g. "eng" or "ae0".
        #[arg(long)]
        feature: String,
        /// Grid points per axis.
        #[arg(long, default_value_t = 40)]
        resolution: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let mut cfg = load_config(&cli.config).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    match cli.command {
        Command::Simulate => stage(&cfg, &cli.out, PipelineStage::Simulate),
        Command::TrainAe => stage(&cfg, &cli.out, PipelineStage::TrainAe),
        Command::Extract => stage(&cfg, &cli.out, PipelineStage::Extract),
        Command::TrainGpr => stage(&cfg, &cli.out, PipelineStage::TrainGpr),
        Command::Track => stage(&cfg, &cli.out, PipelineStage::Track),
        Command::Evaluate => evaluate(&cfg, &cli.out),
        Command::Gridsearch => gridsearch(&cfg, &cli.out),
        Command::ExportField { anchor, feature, resolution } => {
            export(&cfg, &cli.out, anchor, &feature, resolution)
        }
    }
}

fn stage(cfg: &ExperimentConfig, out: &Path, through: PipelineStage) -> Result<(), String> {
    let result = run_pipeline(cfg, out, through).map_err(|e| e.to_string())?;
    println!("completed stages: {}", result.manifest.stages.join(", "));
    println!(
        "{} artifacts in {} (see manifest.json)",
        result.manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn db_name(db: DbMode) -> &'static str {
    match db {
        DbMode::Full => "full",
        DbMode::Sparse => "sparse",
    }
}

fn feature_names(features: &[FeatureId]) -> String {
    features.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("+")
}

fn stats_row(label: &str, agg: &AggregateStats) {
    println!(
        "{label:<8} {:>5} {:>7.3} ±{:<6.3} {:>7.3} ±{:<6.3} {:>7.3} ±{:<6.3} {:>7.3} ±{:<6.3}",
        agg.runs,
        agg.mae_mean,
        agg.mae_std,
        agg.med_mean,
        agg.med_std,
        agg.c75_mean,
        agg.c75_std,
        agg.c95_mean,
        agg.c95_std,
    );
}

fn stats_header() {
    println!(
        "{:<8} {:>5} {:>15} {:>15} {:>15} {:>15}",
        "mode", "runs", "mae [m]", "med [m]", "c75 [m]", "c95 [m]"
    );
}

fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<(), String> {
    let summary = run_experiment(cfg, out).map_err(|e| e.to_string())?;
    let stats = &summary.stats;
    println!(
        "database {} | features {} | {} repeats",
        db_name(stats.db),
        feature_names(&stats.features),
        stats.repeats
    );
    stats_header();
    for (mode, agg) in &stats.modes {
        stats_row(mode, agg);
    }
    println!(
        "{} artifacts in {} (see manifest.json)",
        summary.manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn gridsearch(cfg: &ExperimentConfig, out: &Path) -> Result<(), String> {
    let result = gridsearch_features(cfg, out).map_err(|e| e.to_string())?;
    println!(
        "ranked {} feature subsets{}; EMI baseline MAE {:.3} m",
        result.ranked.len(),
        if result.partial { " (partial: budget reached)" } else { "" },
        result.emi.mae_mean
    );
    println!("{:<5} {:>9} {:>9}  features", "rank", "mae [m]", "c95 [m]");
    for (i, rep) in result.ranked.iter().take(10).enumerate() {
        println!(
            "{:<5} {:>9.3} {:>9.3}  {}",
            i + 1,
            rep.stats.mae_mean,
            rep.stats.c95_mean,
            feature_names(&rep.features)
        );
    }
    if result.ranked.len() > 10 {
        println!("... full ranking in {}", out.join("gridsearch.csv").display());
    }
    Ok(())
}

fn export(
    cfg: &ExperimentConfig,
    out: &Path,
    anchor: usize,
    feature: &str,
    resolution: usize,
) -> Result<(), String> {
    let id: FeatureId = feature.parse().map_err(|e| format!("export-field: {e}"))?;
    if resolution < 2 {
        return Err("export-field: resolution must be at least 2".into());
    }
    let model_path = out.join(io::gp_model_filename(anchor, id));
    if !model_path.exists() {
        return Err(format!(
            "export-field: {} not found; run train-gpr or evaluate into this directory first",
            model_path.display()
        ));
    }
    let model: GprModel = io::read_json(&model_path).map_err(|e| e.to_string())?;
    let (grid, flags) = export_field(&model, cfg.environment.bounds, resolution);
    let field_path = out.join(format!("field_a{anchor}_{id}.csv"));
    io::write_grid_csv(&field_path, &grid, Some(&flags)).map_err(|e| e.to_string())?;
    println!(
        "wrote {} ({resolution} x {resolution} grid, {} fingerprint-adjacent cells)",
        field_path.display(),
        flags.iter().filter(|f| **f).count()
    );
    Ok(())
}
