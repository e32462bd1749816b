//! Experiment configuration: one TOML file describing the scene, the
//! signal model, and every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::channel::{ChannelConfig, PulseConfig};
use crate::features::{FeatureConfig, FeatureId, PROPAGATION_FEATURES};
use crate::geom::Environment;
use crate::gpr::GprConfig;
use crate::harness::HarnessError;
use crate::tracker::{TrackerConfig, TrackerMode};

/// Fingerprint database density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbMode {
    /// Keep every labeled trajectory point.
    Full,
    /// Keep only points close to an obstacle.
    Sparse,
}

/// Which features feed the fusion tracker: an explicit list, or the
/// keyword `"gridsearch"` to rank subsets of the configured candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureSetSpec {
    Keyword(String),
    List(Vec<FeatureId>),
}

impl Default for FeatureSetSpec {
    fn default() -> Self {
        FeatureSetSpec::List(PROPAGATION_FEATURES.to_vec())
    }
}

impl FeatureSetSpec {
    pub fn is_gridsearch(&self) -> bool {
        matches!(self, FeatureSetSpec::Keyword(k) if k == "gridsearch")
    }

    pub fn list(&self) -> Option<&[FeatureId]> {
        match self {
            FeatureSetSpec::List(l) => Some(l),
            FeatureSetSpec::Keyword(_) => None,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        match self {
            FeatureSetSpec::Keyword(k) if k == "gridsearch" => Ok(()),
            FeatureSetSpec::Keyword(k) => Err(HarnessError::Config(format!(
                "unknown feature set keyword {k:?}; use a list or \"gridsearch\""
            ))),
            FeatureSetSpec::List(l) if l.is_empty() => {
                Err(HarnessError::Config("feature list is empty".into()))
            }
            FeatureSetSpec::List(_) => Ok(()),
        }
    }
}

/// Trajectory generation for the two datasets: the labeled fingerprint
/// walk and the evaluation walk, both resampled at `sample_period`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryPlan {
    /// Agent speed, m/s.
    pub speed: f64,
    /// Fingerprint walk duration, seconds.
    pub fingerprint_duration: f64,
    /// Evaluation walk duration, seconds.
    pub eval_duration: f64,
    /// Pose spacing, seconds.
    pub sample_period: f64,
    /// Optional fixed waypoints for the fingerprint walk; random otherwise.
    pub fingerprint_waypoints: Option<Vec<(f64, f64)>>,
    /// Optional fixed waypoints for the evaluation walk; random otherwise.
    pub eval_waypoints: Option<Vec<(f64, f64)>>,
}

impl Default for TrajectoryPlan {
    fn default() -> Self {
        Self {
            speed: 1.0,
            fingerprint_duration: 500.0,
            eval_duration: 50.0,
            sample_period: 0.25,
            fingerprint_waypoints: None,
            eval_waypoints: None,
        }
    }
}

/// Experiment-level switches: seeds, repeats, database density, feature
/// selection, and which tracker modes run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Base seed; all stage seeds derive from it.
    pub seed: u64,
    /// Independent tracker repeats (models fixed, filter seeds vary).
    pub repeats: usize,
    pub db: DbMode,
    /// Obstacle proximity radius for the sparse database, meters.
    pub sparse_radius: f64,
    pub features: FeatureSetSpec,
    /// Candidate pool when `features = "gridsearch"`.
    pub gridsearch_candidates: Vec<FeatureId>,
    /// Max subsets evaluated before the ranking is flagged partial.
    pub gridsearch_budget: usize,
    pub modes: Vec<TrackerMode>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 20,
            db: DbMode::Full,
            sparse_radius: 1.5,
            features: FeatureSetSpec::default(),
            gridsearch_candidates: PROPAGATION_FEATURES.to_vec(),
            gridsearch_budget: 4096,
            modes: vec![TrackerMode::Emi, TrackerMode::Fusion],
        }
    }
}

/// Everything one experiment needs, loadable from a single TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: Environment,
    #[serde(default)]
    pub pulse: PulseConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    /// Feature thresholds; derived from the pulse when omitted.
    #[serde(default)]
    pub features: Option<FeatureConfig>,
    #[serde(default)]
    pub trajectory: TrajectoryPlan,
    /// Present → train the autoencoder and expose latent features.
    #[serde(default)]
    pub autoencoder: Option<AeConfig>,
    #[serde(default)]
    pub gpr: GprConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub experiment: ExperimentPlan,
}

impl ExperimentConfig {
    /// The effective feature thresholds: explicit or pulse-derived.
    pub fn feature_config(&self) -> FeatureConfig {
        self.features
            .unwrap_or_else(|| FeatureConfig::from_pulse(&self.pulse))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.environment
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pulse
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.channel
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.tracker
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let plan = &self.experiment;
        if plan.repeats < 1 {
            return Err(HarnessError::Config("repeats must be at least 1".into()));
        }
        if plan.sparse_radius <= 0.0 {
            return Err(HarnessError::Config("sparse_radius must be positive".into()));
        }
        if plan.modes.is_empty() {
            return Err(HarnessError::Config("no tracker modes configured".into()));
        }
        plan.features.validate()?;
        if plan.features.is_gridsearch() {
            if plan.gridsearch_candidates.is_empty() {
                return Err(HarnessError::Config("gridsearch candidate list is empty".into()));
            }
            if plan.gridsearch_candidates.len() > 12 {
                return Err(HarnessError::Config(format!(
                    "{} gridsearch candidates exceed the cap of 12",
                    plan.gridsearch_candidates.len()
                )));
            }
        }
        let latent_dim = self.autoencoder.as_ref().map(|a| a.latent_dim);
        let mut used: Vec<FeatureId> = plan.list_or_candidates().to_vec();
        used.sort_unstable();
        used.dedup();
        for id in used {
            if let FeatureId::Latent(i) = id {
                match latent_dim {
                    None => {
                        return Err(HarnessError::Config(format!(
                            "feature {id} needs an [autoencoder] section"
                        )))
                    }
                    Some(d) if usize::from(i) >= d => {
                        return Err(HarnessError::Config(format!(
                            "feature {id} out of range for latent_dim {d}"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        if let Some(ae) = &self.autoencoder {
            ae.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            if ae.input_dim != self.pulse.length {
                return Err(HarnessError::Config(format!(
                    "autoencoder input_dim {} must equal pulse length {}",
                    ae.input_dim, self.pulse.length
                )));
            }
        }
        Ok(())
    }

    /// Stage seeds, all derived from the base experiment seed.
    pub fn fingerprint_seed(&self) -> u64 {
        crate::channel::mix_seed(self.experiment.seed, 1, 0)
    }

    pub fn eval_seed(&self) -> u64 {
        crate::channel::mix_seed(self.experiment.seed, 2, 0)
    }

    pub fn tracker_seed(&self, repeat: usize) -> u64 {
        crate::channel::mix_seed(self.experiment.seed, 3, repeat as u64)
    }

    pub fn ae_seed(&self) -> u64 {
        crate::channel::mix_seed(self.experiment.seed, 4, 0)
    }
}

impl ExperimentPlan {
    /// The features the run will need values for: the explicit list, or
    /// the whole candidate pool when grid searching.
    pub fn list_or_candidates(&self) -> &[FeatureId] {
        match &self.features {
            FeatureSetSpec::List(l) => l,
            FeatureSetSpec::Keyword(_) => &self.gridsearch_candidates,
        }
    }
}

/// Parses an experiment config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses an experiment config file.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Anchor, Point, Rect, Wall};

    pub(crate) fn toy_environment() -> Environment {
        Environment {
            bounds: Rect::new(0.0, 0.0, 12.0, 8.0),
            walls: vec![Wall::new(Point::new(0.0, 0.0), Point::new(12.0, 0.0))],
            obstacles: vec![Rect::new(5.0, 3.0, 6.0, 4.0)],
            anchors: vec![
                Anchor { x: 0.5, y: 0.5 },
                Anchor { x: 11.5, y: 0.5 },
                Anchor { x: 6.0, y: 7.5 },
            ],
        }
    }

    fn base_toml() -> String {
        #[derive(serde::Serialize)]
        struct Wrap {
            environment: Environment,
        }
        toml::to_string(&Wrap { environment: toy_environment() }).unwrap()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(&base_toml()).unwrap();
        assert_eq!(cfg.pulse.length, 128);
        assert_eq!(cfg.experiment.repeats, 20);
        assert_eq!(cfg.experiment.db, DbMode::Full);
        assert!(matches!(cfg.experiment.features, FeatureSetSpec::List(ref l) if l.len() == 8));
        assert!(cfg.autoencoder.is_none());
        assert_eq!(cfg.tracker.particle_count, 10_000);
    }

    #[test]
    fn explicit_sections_override_defaults() {
        let text = format!(
            "{}\n[experiment]\nrepeats = 3\ndb = \"sparse\"\nfeatures = [\"eng\", \"rkf\"]\n\
             [tracker]\nparticle_count = 500\n[trajectory]\nspeed = 0.5\n",
            base_toml()
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.experiment.repeats, 3);
        assert_eq!(cfg.experiment.db, DbMode::Sparse);
        assert_eq!(
            cfg.experiment.features.list().unwrap(),
            &[FeatureId::Eng, FeatureId::Rkf]
        );
        assert_eq!(cfg.tracker.particle_count, 500);
        assert_eq!(cfg.trajectory.speed, 0.5);
    }

    #[test]
    fn gridsearch_keyword_is_recognized() {
        let text = format!(
            "{}\n[experiment]\nfeatures = \"gridsearch\"\ngridsearch_candidates = [\"eng\", \"kur\", \"rkf\"]\n",
            base_toml()
        );
        let cfg = parse_config(&text).unwrap();
        assert!(cfg.experiment.features.is_gridsearch());
        assert_eq!(cfg.experiment.list_or_candidates().len(), 3);
    }

    #[test]
    fn unknown_keyword_is_rejected() {
        let text = format!("{}\n[experiment]\nfeatures = \"everything\"\n", base_toml());
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn latent_features_require_autoencoder_section() {
        let text = format!("{}\n[experiment]\nfeatures = [\"ae0\"]\n", base_toml());
        assert!(parse_config(&text).is_err());
        let with_ae = format!(
            "{}\n[experiment]\nfeatures = [\"ae0\"]\n[autoencoder]\nlatent_dim = 4\n",
            base_toml()
        );
        let cfg = parse_config(&with_ae).unwrap();
        assert_eq!(cfg.autoencoder.unwrap().latent_dim, 4);
        // Out-of-range latent index.
        let bad = format!(
            "{}\n[experiment]\nfeatures = [\"ae5\"]\n[autoencoder]\nlatent_dim = 4\n",
            base_toml()
        );
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn mismatched_ae_input_dim_is_rejected() {
        let text = format!("{}\n[autoencoder]\ninput_dim = 64\n", base_toml());
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_deterministic() {
        let cfg = parse_config(&base_toml()).unwrap();
        let seeds = [
            cfg.fingerprint_seed(),
            cfg.eval_seed(),
            cfg.tracker_seed(0),
            cfg.tracker_seed(1),
            cfg.ae_seed(),
        ];
        let mut unique = seeds.to_vec();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert_eq!(cfg.tracker_seed(7), cfg.tracker_seed(7));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = parse_config(&base_toml()).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }
}
