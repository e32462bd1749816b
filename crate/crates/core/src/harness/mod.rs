//! Experiment orchestration: dataset simulation, feature extraction,
//! model training, tracking runs, error statistics, and the feature-subset
//! search. Everything is driven by one [`ExperimentConfig`] and a base
//! seed; a finished run leaves CSV/JSON artifacts plus a manifest in the
//! output directory, and equal configs produce byte-identical statistics.

pub mod config;
pub mod io;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{self, AeModel};
use crate::channel::{
    generate_dataset, generate_trajectory, mix_seed, trajectory_from_waypoints, DatasetRecord,
    Trajectory,
};
use crate::features::{
    detect_los, fit_scaler, propagation_features, FeatureConfig, FeatureId, LosDecision,
    ScalerParams, PROPAGATION_FEATURES,
};
use crate::geom::{Environment, Point, Pose};
use crate::gpr::{self, validation_split, FingerprintSet, GprConfig, GprModel, GridPoint};
use crate::tracker::{
    AnchorObservation, FeatureObservation, ObservationBundle, Tracker, TrackerConfig, TrackerMode,
};

pub use config::{
    load_config, parse_config, DbMode, ExperimentConfig, ExperimentPlan, FeatureSetSpec,
    TrajectoryPlan,
};
pub use io::{FeatureRow, TrackRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("sparse selection kept no fingerprints (radius {0} m)")]
    EmptySparse(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Stage { stage, message: e.to_string() }
}

// --- extraction ---------------------------------------------------------

/// Decision and feature values for one anchor at one timestep. Values hold
/// every canonical column; extraction failures leave NaN entries, which
/// downstream consumers skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedAnchor {
    pub anchor_id: usize,
    pub los: LosDecision,
    pub values: Vec<(FeatureId, f64)>,
}

impl ExtractedAnchor {
    pub fn value(&self, id: FeatureId) -> Option<f64> {
        self.values.iter().find(|(f, _)| *f == id).map(|(_, v)| *v)
    }
}

/// All anchors of one timestep plus the ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedRecord {
    pub timestep: usize,
    pub pose: Pose,
    pub anchors: Vec<ExtractedAnchor>,
}

/// Runs LOS detection and feature extraction over a simulated dataset;
/// with an autoencoder, latent features are appended to every record.
pub fn extract_dataset(
    records: &[DatasetRecord],
    fcfg: &FeatureConfig,
    ae: Option<&AeModel>,
) -> Result<Vec<ExtractedRecord>, HarnessError> {
    let latent_dim = ae.map_or(0, |m| m.config.latent_dim);
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut anchors = Vec::with_capacity(rec.measurements.len());
        for cir in &rec.measurements {
            let los = detect_los(cir, fcfg);
            let mut values: Vec<(FeatureId, f64)> = match propagation_features(cir, fcfg) {
                Ok(f) => PROPAGATION_FEATURES
                    .iter()
                    .map(|id| (*id, f.value(*id).expect("propagation id")))
                    .collect(),
                Err(e) => {
                    log::warn!(
                        "k={} anchor {}: feature extraction failed ({e}); writing NaN",
                        rec.timestep,
                        cir.anchor_id
                    );
                    PROPAGATION_FEATURES.iter().map(|id| (*id, f64::NAN)).collect()
                }
            };
            if let Some(model) = ae {
                let magnitudes: Vec<f64> = cir.samples.iter().map(|s| s.norm()).collect();
                match autoencoder::encode(model, &magnitudes) {
                    Ok(latent) => {
                        for (i, z) in latent.iter().enumerate() {
                            values.push((FeatureId::Latent(i as u8), *z));
                        }
                    }
                    Err(e) => return Err(stage_err("extract", e)),
                }
            } else {
                debug_assert_eq!(latent_dim, 0);
            }
            anchors.push(ExtractedAnchor { anchor_id: cir.anchor_id, los, values });
        }
        out.push(ExtractedRecord { timestep: rec.timestep, pose: rec.pose, anchors });
    }
    Ok(out)
}

/// Flattens extracted records into feature-matrix rows.
pub fn to_feature_rows(records: &[ExtractedRecord]) -> Vec<FeatureRow> {
    records
        .iter()
        .flat_map(|rec| {
            rec.anchors.iter().map(|a| FeatureRow {
                k: rec.timestep,
                anchor_id: a.anchor_id,
                eps0: a.los.los_flag,
                beta0: a.los.beta0,
                range: a.los.range_estimate,
                values: a.values.clone(),
            })
        })
        .collect()
}

/// Joins feature-matrix rows with their pose labels by timestep.
pub fn join_rows_with_poses(
    poses: &[Pose],
    rows: &[FeatureRow],
) -> Result<Vec<ExtractedRecord>, HarnessError> {
    let mut by_k: BTreeMap<usize, Vec<&FeatureRow>> = BTreeMap::new();
    for row in rows {
        by_k.entry(row.k).or_default().push(row);
    }
    let mut out = Vec::with_capacity(by_k.len());
    for pose in poses {
        let Some(group) = by_k.remove(&pose.timestep) else { continue };
        let mut anchors: Vec<ExtractedAnchor> = group
            .into_iter()
            .map(|r| ExtractedAnchor {
                anchor_id: r.anchor_id,
                los: LosDecision {
                    beta0: r.beta0,
                    los_flag: r.eps0,
                    range_estimate: r.range,
                },
                values: r.values.clone(),
            })
            .collect();
        anchors.sort_by_key(|a| a.anchor_id);
        out.push(ExtractedRecord { timestep: pose.timestep, pose: *pose, anchors });
    }
    if let Some((&k, _)) = by_k.iter().next() {
        return Err(HarnessError::Config(format!("feature rows at k={k} have no pose label")));
    }
    Ok(out)
}

/// Pooled mean and population std of the absolute velocity components,
/// used to initialize the particle velocities from the reference data.
pub fn velocity_stats(poses: &[Pose]) -> (f64, f64) {
    let comps: Vec<f64> = poses.iter().flat_map(|p| [p.vx.abs(), p.vy.abs()]).collect();
    if comps.is_empty() {
        return (0.0, 0.0);
    }
    let mean = comps.iter().sum::<f64>() / comps.len() as f64;
    let var = comps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / comps.len() as f64;
    (mean, var.sqrt())
}

// --- fingerprint databases ----------------------------------------------

/// Scaled per-(anchor, feature) training sets plus the scalers that
/// produced them and the kept fingerprint positions.
#[derive(Clone, Debug)]
pub struct FingerprintDb {
    pub sets: BTreeMap<(usize, FeatureId), FingerprintSet>,
    pub scalers: BTreeMap<(usize, FeatureId), ScalerParams>,
    pub positions: Vec<Point>,
    /// Pairs dropped for degenerate data, with the reason.
    pub skipped: Vec<(usize, FeatureId, String)>,
}

/// Selects fingerprints (all of them, or only those near obstacles),
/// fits a scaler per (anchor, feature) on the training portion of the
/// deterministic split, and returns scaled training sets.
pub fn build_fingerprint_db(
    extracted: &[ExtractedRecord],
    env: &Environment,
    mode: DbMode,
    radius: f64,
    features: &[FeatureId],
    val_fraction: f64,
) -> Result<FingerprintDb, HarnessError> {
    let kept: Vec<&ExtractedRecord> = extracted
        .iter()
        .filter(|r| match mode {
            DbMode::Full => true,
            DbMode::Sparse => env.obstacles_near(r.pose.position(), radius) > 0,
        })
        .collect();
    if kept.is_empty() {
        return Err(HarnessError::EmptySparse(radius));
    }
    let positions: Vec<Point> = kept.iter().map(|r| r.pose.position()).collect();

    let n_anchors = env.anchors.len();
    let mut sets = BTreeMap::new();
    let mut scalers = BTreeMap::new();
    let mut skipped = Vec::new();
    for anchor_id in 0..n_anchors {
        for &feature in features {
            let mut xs = Vec::new();
            let mut raw = Vec::new();
            for rec in &kept {
                let Some(a) = rec.anchors.iter().find(|a| a.anchor_id == anchor_id) else {
                    continue;
                };
                match a.value(feature) {
                    Some(v) if v.is_finite() => {
                        xs.push(rec.pose.position());
                        raw.push(v);
                    }
                    _ => {}
                }
            }
            if raw.len() < 2 {
                skipped.push((anchor_id, feature, format!("{} finite samples", raw.len())));
                continue;
            }
            let (train_idx, _) = validation_split(raw.len(), val_fraction);
            let train_vals: Vec<f64> = train_idx.iter().map(|&i| raw[i]).collect();
            let scaler = match fit_scaler(&train_vals) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("anchor {anchor_id} feature {feature}: {e}; dropping pair");
                    skipped.push((anchor_id, feature, e.to_string()));
                    continue;
                }
            };
            let targets: Vec<f64> = raw.iter().map(|v| scaler.apply(*v)).collect();
            sets.insert(
                (anchor_id, feature),
                FingerprintSet { positions: xs, targets, anchor_id, feature_id: feature },
            );
            scalers.insert((anchor_id, feature), scaler);
        }
    }
    Ok(FingerprintDb { sets, scalers, positions, skipped })
}

/// Fits one GP per (anchor, feature) training set. Independent fits run in
/// parallel; the result order is fixed by the key order.
pub fn train_models(
    db: &FingerprintDb,
    cfg: &GprConfig,
) -> Result<BTreeMap<(usize, FeatureId), GprModel>, HarnessError> {
    let entries: Vec<(&(usize, FeatureId), &FingerprintSet)> = db.sets.iter().collect();
    let fitted: Vec<Result<((usize, FeatureId), GprModel), HarnessError>> = entries
        .par_iter()
        .map(|(key, set)| {
            let scaler = db.scalers[key];
            gpr::fit(set, scaler, cfg)
                .map(|m| (**key, m))
                .map_err(|e| stage_err("train-gpr", format!("anchor {} {}: {e}", key.0, key.1)))
        })
        .collect();
    fitted.into_iter().collect()
}

// --- error statistics ---------------------------------------------------

/// Per-run absolute-position-error statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApeStats {
    pub mae: f64,
    pub med: f64,
    pub c75: f64,
    pub c95: f64,
    #[serde(skip)]
    pub series: Vec<f64>,
}

/// Nearest-rank percentile (1-based ⌈p·N⌉) of a sorted series.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn compute_ape_stats(series: &[f64]) -> Result<ApeStats, HarnessError> {
    if series.is_empty() {
        return Err(HarnessError::Config("APE series is empty".into()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite APEs"));
    let stats = ApeStats {
        mae: series.iter().sum::<f64>() / series.len() as f64,
        med: percentile(&sorted, 0.5),
        c75: percentile(&sorted, 0.75),
        c95: percentile(&sorted, 0.95),
        series: series.to_vec(),
    };
    debug_assert!(stats.med <= stats.c75 && stats.c75 <= stats.c95);
    Ok(stats)
}

/// Mean and population std of each statistic over repeat runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub med_mean: f64,
    pub med_std: f64,
    pub c75_mean: f64,
    pub c75_std: f64,
    pub c95_mean: f64,
    pub c95_std: f64,
}

pub fn aggregate(runs: &[ApeStats]) -> AggregateStats {
    let mean_std = |take: fn(&ApeStats) -> f64| -> (f64, f64) {
        let n = runs.len() as f64;
        let mean = runs.iter().map(take).sum::<f64>() / n;
        let var = runs.iter().map(|r| (take(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mae_mean, mae_std) = mean_std(|r| r.mae);
    let (med_mean, med_std) = mean_std(|r| r.med);
    let (c75_mean, c75_std) = mean_std(|r| r.c75);
    let (c95_mean, c95_std) = mean_std(|r| r.c95);
    AggregateStats {
        runs: runs.len(),
        mae_mean,
        mae_std,
        med_mean,
        med_std,
        c75_mean,
        c75_std,
        c95_mean,
        c95_std,
    }
}

// --- tracking runs ------------------------------------------------------

/// Everything one tracking run needs besides the tracker config.
pub struct TrackInputs<'a> {
    pub eval: &'a [ExtractedRecord],
    /// Anchor positions indexed by anchor id.
    pub anchor_positions: &'a [Point],
    pub models: &'a BTreeMap<(usize, FeatureId), GprModel>,
    pub scalers: &'a BTreeMap<(usize, FeatureId), ScalerParams>,
    /// Features feeding the fusion weights; ignored in EMI mode.
    pub features: &'a [FeatureId],
    /// Step period, seconds.
    pub dt: f64,
}

/// Runs the filter over the evaluation records. The first record provides
/// the reference start; every later record becomes one filter step.
pub fn run_track(
    inputs: &TrackInputs,
    tcfg: &TrackerConfig,
) -> Result<Vec<TrackRow>, HarnessError> {
    let eval = inputs.eval;
    if eval.len() < 2 {
        return Err(HarnessError::Config("evaluation dataset has fewer than 2 records".into()));
    }
    let x0 = eval[0].pose.position();
    let mut tracker = Tracker::new(*tcfg, x0).map_err(|e| stage_err("track", e))?;
    let mut rows = Vec::with_capacity(eval.len() - 1);
    for rec in &eval[1..] {
        let mut bundle = ObservationBundle::default();
        for a in &rec.anchors {
            let Some(&position) = inputs.anchor_positions.get(a.anchor_id) else {
                return Err(stage_err("track", format!("anchor {} has no position", a.anchor_id)));
            };
            let mut features = Vec::new();
            if tcfg.mode == TrackerMode::Fusion {
                for &f in inputs.features {
                    let key = (a.anchor_id, f);
                    let (Some(model), Some(scaler)) =
                        (inputs.models.get(&key), inputs.scalers.get(&key))
                    else {
                        continue;
                    };
                    match a.value(f) {
                        Some(v) if v.is_finite() => features
                            .push(FeatureObservation { model, value: scaler.apply(v) }),
                        _ => {}
                    }
                }
            }
            bundle.anchors.push(AnchorObservation {
                anchor_id: a.anchor_id,
                position,
                los: a.los,
                features,
            });
        }
        let result = tracker.step(&bundle, inputs.dt).map_err(|e| stage_err("track", e))?;
        let truth = rec.pose.position();
        rows.push(TrackRow {
            k: rec.timestep,
            est_x: result.estimate.x,
            est_y: result.estimate.y,
            true_x: truth.x,
            true_y: truth.y,
            ape: result.estimate.dist(truth),
            n_los_anchors: result.n_los_anchors,
            coasting_flag: u8::from(result.coasting),
        });
    }
    Ok(rows)
}

// --- full experiment ----------------------------------------------------

/// Lists every file a run produced, plus reporting notes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<String>,
    pub stages: Vec<String>,
    pub notes: Vec<String>,
}

/// Aggregated statistics per tracker mode, as written to `stats.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub db: DbMode,
    pub features: Vec<FeatureId>,
    pub repeats: usize,
    pub modes: BTreeMap<String, AggregateStats>,
}

/// In-memory result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub stats: StatsReport,
    pub manifest: Manifest,
    /// Per (mode, repeat) run statistics, mode-major.
    pub runs: BTreeMap<String, Vec<ApeStats>>,
}

fn mode_name(mode: TrackerMode) -> &'static str {
    match mode {
        TrackerMode::Emi => "emi",
        TrackerMode::Fusion => "fusion",
    }
}

fn build_trajectory(
    env: &Environment,
    plan: &TrajectoryPlan,
    waypoints: Option<&Vec<(f64, f64)>>,
    duration: f64,
    seed: u64,
) -> Result<Trajectory, HarnessError> {
    match waypoints {
        Some(w) => {
            let points: Vec<Point> = w.iter().map(|&(x, y)| Point::new(x, y)).collect();
            trajectory_from_waypoints(env, &points, plan.speed, plan.sample_period)
                .map_err(|e| stage_err("simulate", e))
        }
        None => generate_trajectory(env, plan.speed, duration, plan.sample_period, seed)
            .map_err(|e| stage_err("simulate", e)),
    }
}

/// The full pipeline: simulate both datasets, train models as configured,
/// run every tracker mode over the configured repeats, and write all
/// artifacts plus `stats.json` and `manifest.json` to `out_dir`.
/// Pipeline stages in execution order; [`run_pipeline`] stops after the
/// requested one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PipelineStage {
    Simulate,
    TrainAe,
    Extract,
    TrainGpr,
    Track,
    Evaluate,
}

/// Artifacts and statistics from a (possibly partial) pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub manifest: Manifest,
    /// Present only when the run reached the evaluate stage.
    pub stats: Option<StatsReport>,
    /// Per-mode statistics for each repeat; empty before the track stage.
    pub runs: BTreeMap<String, Vec<ApeStats>>,
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentSummary, HarnessError> {
    let result = run_pipeline(cfg, out_dir, PipelineStage::Evaluate)?;
    Ok(ExperimentSummary {
        stats: result.stats.expect("evaluate stage always produces statistics"),
        manifest: result.manifest,
        runs: result.runs,
    })
}

/// Runs the pipeline from config through `through`, writing each stage's
/// artifacts plus a manifest of everything produced so far.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    through: PipelineStage,
) -> Result<PipelineResult, HarnessError> {
    cfg.validate()?;
    let plan = &cfg.experiment;
    let features: Vec<FeatureId> = match plan.features.list() {
        Some(l) => l.to_vec(),
        None => {
            return Err(HarnessError::Config(
                "run_experiment needs an explicit feature list; use the gridsearch command".into(),
            ))
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut files: Vec<String> = Vec::new();
    let mut stages: Vec<String> = Vec::new();
    let track = |files: &mut Vec<String>, name: &str| -> std::path::PathBuf {
        files.push(name.to_string());
        out_dir.join(name)
    };
    let finalize = |files: Vec<String>,
                    stages: Vec<String>,
                    stats: Option<StatsReport>,
                    runs: BTreeMap<String, Vec<ApeStats>>|
     -> Result<PipelineResult, HarnessError> {
        let manifest = Manifest {
            files: {
                let mut f = files;
                f.push("manifest.json".into());
                f
            },
            stages,
            notes: vec![
                "repeat runs rerandomize the filter seed only; trained models are shared".into(),
                "aggregate statistics are means over repeat runs with population stds".into(),
            ],
        };
        io::write_json(&out_dir.join("manifest.json"), &manifest)?;
        Ok(PipelineResult { manifest, stats, runs })
    };

    // simulate: fingerprint and evaluation datasets.
    stages.push("simulate".into());
    let env = &cfg.environment;
    let fp_seed = cfg.fingerprint_seed();
    let eval_seed = cfg.eval_seed();
    let fp_traj = build_trajectory(
        env,
        &cfg.trajectory,
        cfg.trajectory.fingerprint_waypoints.as_ref(),
        cfg.trajectory.fingerprint_duration,
        mix_seed(fp_seed, 0, 1),
    )?;
    let eval_traj = build_trajectory(
        env,
        &cfg.trajectory,
        cfg.trajectory.eval_waypoints.as_ref(),
        cfg.trajectory.eval_duration,
        mix_seed(eval_seed, 0, 1),
    )?;
    let fp_records = generate_dataset(env, &cfg.channel, &cfg.pulse, &fp_traj, mix_seed(fp_seed, 0, 2))
        .map_err(|e| stage_err("simulate", e))?;
    let eval_records =
        generate_dataset(env, &cfg.channel, &cfg.pulse, &eval_traj, mix_seed(eval_seed, 0, 2))
            .map_err(|e| stage_err("simulate", e))?;
    io::write_positions_csv(&track(&mut files, "fp_positions.csv"), &fp_traj.poses)?;
    io::write_positions_csv(&track(&mut files, "eval_positions.csv"), &eval_traj.poses)?;
    io::write_cm_dataset(
        &track(&mut files, "fp_cm.bin"),
        &track(&mut files, "fp_cm.json"),
        &fp_records,
        cfg.pulse.sample_interval,
        fp_seed,
    )?;
    io::write_cm_dataset(
        &track(&mut files, "eval_cm.bin"),
        &track(&mut files, "eval_cm.json"),
        &eval_records,
        cfg.pulse.sample_interval,
        eval_seed,
    )?;
    if through == PipelineStage::Simulate {
        return finalize(files, stages, None, BTreeMap::new());
    }

    // train-ae (optional, before extraction so latents exist).
    let ae_model = match &cfg.autoencoder {
        Some(ae_cfg) => {
            stages.push("train-ae".into());
            let mut ae_cfg = ae_cfg.clone();
            ae_cfg.rng_seed = cfg.ae_seed();
            let init = autoencoder::init(&ae_cfg).map_err(|e| stage_err("train-ae", e))?;
            let dataset: Vec<Vec<f64>> = fp_records
                .iter()
                .flat_map(|r| &r.measurements)
                .map(|c| c.samples.iter().map(|s| s.norm()).collect())
                .collect();
            let trained =
                autoencoder::train(&init, &dataset).map_err(|e| stage_err("train-ae", e))?;
            io::write_json(&track(&mut files, "ae_model.json"), &trained)?;
            let mut hist = csv::Writer::from_path(out_dir.join("ae_history.csv"))
                .map_err(|e| stage_err("train-ae", e))?;
            for row in &trained.history {
                hist.serialize(row).map_err(|e| stage_err("train-ae", e))?;
            }
            hist.flush().map_err(|e| stage_err("train-ae", e))?;
            files.push("ae_history.csv".into());
            Some(trained)
        }
        None => {
            if through == PipelineStage::TrainAe {
                return Err(stage_err(
                    "train-ae",
                    "stage requested but no autoencoder is configured",
                ));
            }
            None
        }
    };
    if through == PipelineStage::TrainAe {
        return finalize(files, stages, None, BTreeMap::new());
    }

    // extract both datasets.
    stages.push("extract".into());
    let fcfg = cfg.feature_config();
    let fp_extracted = extract_dataset(&fp_records, &fcfg, ae_model.as_ref())?;
    let eval_extracted = extract_dataset(&eval_records, &fcfg, ae_model.as_ref())?;
    let latent_dim = ae_model.as_ref().map_or(0, |m| m.config.latent_dim);
    io::write_features_csv(
        &track(&mut files, "fp_features.csv"),
        &to_feature_rows(&fp_extracted),
        latent_dim,
    )?;
    io::write_features_csv(
        &track(&mut files, "eval_features.csv"),
        &to_feature_rows(&eval_extracted),
        latent_dim,
    )?;
    if through == PipelineStage::Extract {
        return finalize(files, stages, None, BTreeMap::new());
    }

    // train-gpr: when some mode fuses features, or on explicit request.
    let needs_gpr =
        plan.modes.contains(&TrackerMode::Fusion) || through == PipelineStage::TrainGpr;
    let (models, scalers) = if needs_gpr {
        stages.push("train-gpr".into());
        let db = build_fingerprint_db(
            &fp_extracted,
            env,
            plan.db,
            plan.sparse_radius,
            &features,
            cfg.gpr.val_fraction,
        )?;
        let models = train_models(&db, &cfg.gpr)?;
        io::write_scalers_json(&track(&mut files, "scalers.json"), &db.scalers)?;
        for (&(anchor_id, feature), model) in &models {
            let name = io::gp_model_filename(anchor_id, feature);
            io::write_json(&track(&mut files, &name), model)?;
        }
        (models, db.scalers)
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };
    if through == PipelineStage::TrainGpr {
        return finalize(files, stages, None, BTreeMap::new());
    }

    // track: every configured mode, paired filter seeds across modes.
    stages.push("track".into());
    let (vel_mean, vel_std) = velocity_stats(&fp_traj.poses);
    let anchor_positions: Vec<Point> =
        env.anchors.iter().map(|a| Point::new(a.x, a.y)).collect();
    let inputs = TrackInputs {
        eval: &eval_extracted,
        anchor_positions: &anchor_positions,
        models: &models,
        scalers: &scalers,
        features: &features,
        dt: cfg.trajectory.sample_period,
    };
    let mut runs: BTreeMap<String, Vec<ApeStats>> = BTreeMap::new();
    for &mode in &plan.modes {
        let mut mode_runs = Vec::with_capacity(plan.repeats);
        for r in 0..plan.repeats {
            let tcfg = TrackerConfig {
                mode,
                rng_seed: cfg.tracker_seed(r),
                velocity_mean: vel_mean,
                velocity_std: vel_std,
                ..cfg.tracker
            };
            let rows = run_track(&inputs, &tcfg)?;
            let name = format!("track_{}_r{r}.csv", mode_name(mode));
            io::write_track_csv(&track(&mut files, &name), &rows)?;
            let apes: Vec<f64> = rows.iter().map(|row| row.ape).collect();
            mode_runs.push(compute_ape_stats(&apes)?);
        }
        runs.insert(mode_name(mode).to_string(), mode_runs);
    }
    if through == PipelineStage::Track {
        return finalize(files, stages, None, runs);
    }

    // evaluate: aggregate statistics and the manifest.
    stages.push("evaluate".into());
    let stats = StatsReport {
        db: plan.db,
        features,
        repeats: plan.repeats,
        modes: runs.iter().map(|(m, rs)| (m.clone(), aggregate(rs))).collect(),
    };
    io::write_json(&track(&mut files, "stats.json"), &stats)?;
    finalize(files, stages, Some(stats), runs)
}

// --- feature-subset search ----------------------------------------------

/// One evaluated subset with its aggregated fusion statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetReport {
    pub features: Vec<FeatureId>,
    pub stats: AggregateStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridsearchResult {
    /// Subsets sorted best-first: MAE, then C95, then smaller subsets.
    pub ranked: Vec<SubsetReport>,
    /// EMI baseline over the same repeat seeds.
    pub emi: AggregateStats,
    /// Set when the budget truncated the subset enumeration.
    pub partial: bool,
}

/// Enumerates non-empty subsets of `candidates`; above `budget`, a seeded
/// sample of that size is kept and the result is flagged partial.
fn enumerate_subsets(
    candidates: &[FeatureId],
    budget: usize,
    seed: u64,
) -> (Vec<Vec<FeatureId>>, bool) {
    let total = (1usize << candidates.len()) - 1;
    let mut masks: Vec<usize> = (1..=total).collect();
    let partial = masks.len() > budget;
    if partial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        masks.shuffle(&mut rng);
        masks.truncate(budget);
        masks.sort_unstable();
    }
    let subsets = masks
        .into_iter()
        .map(|mask| {
            candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, f)| *f)
                .collect()
        })
        .collect();
    (subsets, partial)
}

/// Trains one GP per (anchor, candidate) once, then scores every subset by
/// running the fusion tracker over the configured repeats. Subsets are
/// ranked by mean MAE; ties fall back to mean C95, then to subset size.
pub fn gridsearch_features(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<GridsearchResult, HarnessError> {
    cfg.validate()?;
    let plan = &cfg.experiment;
    let candidates = plan.list_or_candidates().to_vec();
    if candidates.is_empty() || candidates.len() > 12 {
        return Err(HarnessError::Config(format!(
            "{} gridsearch candidates outside 1..=12",
            candidates.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    // Shared pipeline: datasets, extraction, per-candidate models.
    let env = &cfg.environment;
    let fp_traj = build_trajectory(
        env,
        &cfg.trajectory,
        cfg.trajectory.fingerprint_waypoints.as_ref(),
        cfg.trajectory.fingerprint_duration,
        mix_seed(cfg.fingerprint_seed(), 0, 1),
    )?;
    let eval_traj = build_trajectory(
        env,
        &cfg.trajectory,
        cfg.trajectory.eval_waypoints.as_ref(),
        cfg.trajectory.eval_duration,
        mix_seed(cfg.eval_seed(), 0, 1),
    )?;
    let fp_records =
        generate_dataset(env, &cfg.channel, &cfg.pulse, &fp_traj, mix_seed(cfg.fingerprint_seed(), 0, 2))
            .map_err(|e| stage_err("simulate", e))?;
    let eval_records =
        generate_dataset(env, &cfg.channel, &cfg.pulse, &eval_traj, mix_seed(cfg.eval_seed(), 0, 2))
            .map_err(|e| stage_err("simulate", e))?;
    let ae_model = match &cfg.autoencoder {
        Some(ae_cfg) => {
            let mut ae_cfg = ae_cfg.clone();
            ae_cfg.rng_seed = cfg.ae_seed();
            let init = autoencoder::init(&ae_cfg).map_err(|e| stage_err("train-ae", e))?;
            let dataset: Vec<Vec<f64>> = fp_records
                .iter()
                .flat_map(|r| &r.measurements)
                .map(|c| c.samples.iter().map(|s| s.norm()).collect())
                .collect();
            Some(autoencoder::train(&init, &dataset).map_err(|e| stage_err("train-ae", e))?)
        }
        None => None,
    };
    let fcfg = cfg.feature_config();
    let fp_extracted = extract_dataset(&fp_records, &fcfg, ae_model.as_ref())?;
    let eval_extracted = extract_dataset(&eval_records, &fcfg, ae_model.as_ref())?;
    let db = build_fingerprint_db(
        &fp_extracted,
        env,
        plan.db,
        plan.sparse_radius,
        &candidates,
        cfg.gpr.val_fraction,
    )?;
    let models = train_models(&db, &cfg.gpr)?;

    let (vel_mean, vel_std) = velocity_stats(&fp_traj.poses);
    let anchor_positions: Vec<Point> =
        env.anchors.iter().map(|a| Point::new(a.x, a.y)).collect();
    let run_mode = |mode: TrackerMode, features: &[FeatureId]| -> Result<Vec<ApeStats>, HarnessError> {
        let inputs = TrackInputs {
            eval: &eval_extracted,
            anchor_positions: &anchor_positions,
            models: &models,
            scalers: &db.scalers,
            features,
            dt: cfg.trajectory.sample_period,
        };
        (0..plan.repeats)
            .map(|r| {
                let tcfg = TrackerConfig {
                    mode,
                    rng_seed: cfg.tracker_seed(r),
                    velocity_mean: vel_mean,
                    velocity_std: vel_std,
                    ..cfg.tracker
                };
                let rows = run_track(&inputs, &tcfg)?;
                compute_ape_stats(&rows.iter().map(|row| row.ape).collect::<Vec<_>>())
            })
            .collect()
    };

    let emi = aggregate(&run_mode(TrackerMode::Emi, &[])?);
    let (subsets, partial) =
        enumerate_subsets(&candidates, plan.gridsearch_budget, mix_seed(plan.seed, 5, 0));
    let mut reports: Vec<SubsetReport> = subsets
        .par_iter()
        .map(|subset| {
            run_mode(TrackerMode::Fusion, subset)
                .map(|runs| SubsetReport { features: subset.clone(), stats: aggregate(&runs) })
        })
        .collect::<Result<_, _>>()?;
    reports.sort_by(|a, b| {
        a.stats
            .mae_mean
            .total_cmp(&b.stats.mae_mean)
            .then(a.stats.c95_mean.total_cmp(&b.stats.c95_mean))
            .then(a.features.len().cmp(&b.features.len()))
            .then(a.features.cmp(&b.features))
    });

    // Ranked CSV plus a JSON summary with the EMI baseline.
    let csv_path = out_dir.join("gridsearch.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| stage_err("gridsearch", e))?;
    w.write_record(["rank", "features", "mae_mean", "mae_std", "med_mean", "c75_mean", "c95_mean", "runs"])
        .map_err(|e| stage_err("gridsearch", e))?;
    for (rank, rep) in reports.iter().enumerate() {
        let names: Vec<String> = rep.features.iter().map(|f| f.to_string()).collect();
        w.write_record([
            (rank + 1).to_string(),
            names.join("+"),
            rep.stats.mae_mean.to_string(),
            rep.stats.mae_std.to_string(),
            rep.stats.med_mean.to_string(),
            rep.stats.c75_mean.to_string(),
            rep.stats.c95_mean.to_string(),
            rep.stats.runs.to_string(),
        ])
        .map_err(|e| stage_err("gridsearch", e))?;
    }
    w.flush().map_err(|e| stage_err("gridsearch", e))?;
    let result = GridsearchResult { ranked: reports, emi, partial };
    io::write_json(&out_dir.join("gridsearch_summary.json"), &result)?;
    Ok(result)
}

// --- prediction-field export --------------------------------------------

/// Dense posterior field of one model over `bounds`, with a flag per cell
/// marking cells that contain a training fingerprint (for overlays).
pub fn export_field(
    model: &GprModel,
    bounds: crate::geom::Rect,
    resolution: usize,
) -> (Vec<GridPoint>, Vec<bool>) {
    let grid = gpr::predict_grid(model, bounds, resolution);
    let half_dx = bounds.width() / (resolution - 1) as f64 / 2.0;
    let half_dy = bounds.height() / (resolution - 1) as f64 / 2.0;
    let flags = grid
        .iter()
        .map(|cell| {
            model.train_x.iter().any(|fp| {
                (fp.x - cell.x).abs() <= half_dx && (fp.y - cell.y).abs() <= half_dy
            })
        })
        .collect();
    (grid, flags)
}
