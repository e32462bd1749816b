//! Particle-filter tracker fusing LOS range likelihoods with GP feature
//! likelihoods.
//!
//! Each step runs: constant-velocity prediction, one normalized log-weight
//! vector per information source (a LOS range per line-of-sight anchor,
//! plus one GP likelihood per (anchor, feature) in fusion mode), summation
//! of the normalized sources, systematic resampling, and the weighted-mean
//! estimate. The EMI baseline is the same filter restricted to the range
//! sources. Random draws are ordered so that a fusion step with zero
//! configured features is bit-for-bit identical to an EMI step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LosDecision;
use crate::geom::Point;
use crate::gpr::GprModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub x: Point,
    pub vx: f64,
    pub vy: f64,
    /// Natural-log weight; ≤ 0 after normalization.
    pub log_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerMode {
    /// Range-only baseline over LOS-classified anchors.
    Emi,
    /// Ranges plus GP feature likelihoods.
    Fusion,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub particle_count: usize,
    /// Range observation noise σ_d, meters.
    pub range_noise_std: f64,
    /// Std of the white acceleration noise, m/s².
    pub process_noise_accel: f64,
    /// Std of the initial position cloud around the reference start, meters.
    pub init_pos_std: f64,
    /// Mean of the absolute per-component initial velocity, m/s.
    pub velocity_mean: f64,
    /// Std of the per-component initial velocity, m/s.
    pub velocity_std: f64,
    pub mode: TrackerMode,
    pub rng_seed: u64,
    /// Optional effective-sample-size fraction below which resampling
    /// triggers; `None` resamples every step.
    pub ess_fraction: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            particle_count: 10_000,
            range_noise_std: 0.15,
            process_noise_accel: 0.5,
            init_pos_std: 1.0,
            velocity_mean: 0.5,
            velocity_std: 0.25,
            mode: TrackerMode::Fusion,
            rng_seed: 0,
            ess_fraction: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let ok = self.particle_count >= 100
            && self.range_noise_std > 0.0
            && self.process_noise_accel > 0.0
            && self.init_pos_std > 0.0
            && self.velocity_std >= 0.0
            && self.ess_fraction.is_none_or(|f| f > 0.0 && f <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(TrackerError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.particles.iter().map(|p| p.x).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }
}

/// One feature observation at one anchor: the scaled value and the GP
/// model it is evaluated under.
#[derive(Clone, Copy, Debug)]
pub struct FeatureObservation<'a> {
    pub model: &'a GprModel,
    /// Observed feature value in scaled units.
    pub value: f64,
}

/// Everything observed at one anchor during one timestep.
#[derive(Clone, Debug)]
pub struct AnchorObservation<'a> {
    pub anchor_id: usize,
    /// Anchor position, meters.
    pub position: Point,
    pub los: LosDecision,
    pub features: Vec<FeatureObservation<'a>>,
}

#[derive(Clone, Debug, Default)]
pub struct ObservationBundle<'a> {
    pub anchors: Vec<AnchorObservation<'a>>,
}

impl ObservationBundle<'_> {
    pub fn validate(&self) -> Result<(), TrackerError> {
        for a in &self.anchors {
            if !(a.position.x.is_finite() && a.position.y.is_finite()) {
                return Err(TrackerError::BadObservation(format!(
                    "anchor {} position not finite",
                    a.anchor_id
                )));
            }
            for f in &a.features {
                if f.model.anchor_id != a.anchor_id {
                    return Err(TrackerError::BadObservation(format!(
                        "feature model for anchor {} attached to anchor {}",
                        f.model.anchor_id, a.anchor_id
                    )));
                }
                if !f.value.is_finite() {
                    return Err(TrackerError::BadObservation(format!(
                        "non-finite feature value at anchor {}",
                        a.anchor_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_los_anchors(&self) -> usize {
        self.anchors.iter().filter(|a| a.los.los_flag).count()
    }
}

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error("invalid observation bundle: {0}")]
    BadObservation(String),
    #[error("all log-weights are -inf; degenerate observation")]
    DegenerateObservation,
    #[error("empty particle set")]
    EmptySet,
}

/// Draws the initial cloud: positions around `x0`, per-component speeds of
/// magnitude ~ Normal(velocity_mean, velocity_std²) with random sign, and
/// uniform log-weights.
pub fn init_particles(
    config: &TrackerConfig,
    x0: Point,
    rng: &mut impl Rng,
) -> ParticleSet {
    let p = config.particle_count;
    let uniform = -(p as f64).ln();
    let particles = (0..p)
        .map(|_| {
            let x = x0.x + config.init_pos_std * rng.sample::<f64, _>(StandardNormal);
            let y = x0.y + config.init_pos_std * rng.sample::<f64, _>(StandardNormal);
            let mut vx =
                config.velocity_mean + config.velocity_std * rng.sample::<f64, _>(StandardNormal);
            if rng.random::<bool>() {
                vx = -vx;
            }
            let mut vy =
                config.velocity_mean + config.velocity_std * rng.sample::<f64, _>(StandardNormal);
            if rng.random::<bool>() {
                vy = -vy;
            }
            Particle { x: Point::new(x, y), vx, vy, log_weight: uniform }
        })
        .collect();
    ParticleSet { particles }
}

/// Constant-velocity prediction with white acceleration noise. Weights are
/// untouched.
pub fn predict(set: &mut ParticleSet, dt: f64, config: &TrackerConfig, rng: &mut impl Rng) {
    assert!(dt > 0.0, "dt must be positive");
    let sa = config.process_noise_accel;
    for p in &mut set.particles {
        let ax = sa * rng.sample::<f64, _>(StandardNormal);
        let ay = sa * rng.sample::<f64, _>(StandardNormal);
        p.x.x += p.vx * dt + 0.5 * ax * dt * dt;
        p.x.y += p.vy * dt + 0.5 * ay * dt * dt;
        p.vx += ax * dt;
        p.vy += ay * dt;
    }
}

/// Range log-likelihood per particle for one anchor. NLOS observations
/// carry no range information and yield uniform (zero) log-weights.
pub fn weight_los(
    set: &ParticleSet,
    range: f64,
    los: bool,
    anchor: Point,
    sigma_d: f64,
) -> Vec<f64> {
    if !los {
        return vec![0.0; set.len()];
    }
    let log_norm = (sigma_d * (2.0 * std::f64::consts::PI).sqrt()).ln();
    set.particles
        .iter()
        .map(|p| {
            let resid = range - p.x.dist(anchor);
            -resid * resid / (2.0 * sigma_d * sigma_d) - log_norm
        })
        .collect()
}

/// GP observation log-likelihood per particle for one (anchor, feature).
pub fn weight_feature(set: &ParticleSet, value: f64, model: &GprModel) -> Vec<f64> {
    model.log_likelihood_batch(&set.positions(), value)
}

/// Log-sum-exp normalization in place so that Σ exp(w) = 1.
pub fn normalize(log_weights: &mut [f64]) -> Result<(), TrackerError> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(TrackerError::DegenerateObservation);
    }
    let sum: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let lse = max + sum.ln();
    for w in log_weights.iter_mut() {
        *w -= lse;
    }
    Ok(())
}

/// Sums normalized per-source log-weights particle-wise and renormalizes.
pub fn combine(sources: &[Vec<f64>]) -> Result<Vec<f64>, TrackerError> {
    let n = match sources.first() {
        Some(s) => s.len(),
        None => return Err(TrackerError::DegenerateObservation),
    };
    let mut combined = vec![0.0; n];
    for src in sources {
        debug_assert_eq!(src.len(), n);
        for (c, w) in combined.iter_mut().zip(src) {
            *c += w;
        }
    }
    normalize(&mut combined)?;
    Ok(combined)
}

/// Systematic resampling: one uniform offset, P evenly spaced thresholds.
/// Output weights are uniform. With exactly uniform input weights every
/// particle is copied once, in order.
pub fn resample(set: &mut ParticleSet, rng: &mut impl Rng) {
    let p = set.len();
    let u0: f64 = rng.random();
    let uniform = -(p as f64).ln();
    let mut out = Vec::with_capacity(p);
    let mut cum = set.particles[0].log_weight.exp();
    let mut idx = 0;
    for i in 0..p {
        let u = (i as f64 + u0) / p as f64;
        while cum < u && idx + 1 < p {
            idx += 1;
            cum += set.particles[idx].log_weight.exp();
        }
        let mut copy = set.particles[idx];
        copy.log_weight = uniform;
        out.push(copy);
    }
    set.particles = out;
}

/// Weighted mean of the particle positions.
pub fn estimate(set: &ParticleSet) -> Point {
    let max = set
        .particles
        .iter()
        .map(|p| p.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for p in &set.particles {
        let w = (p.log_weight - max).exp();
        sx += w * p.x.x;
        sy += w * p.x.y;
        sw += w;
    }
    Point::new(sx / sw, sy / sw)
}

/// Effective sample size of normalized log-weights: 1 / Σ exp(w)².
fn effective_sample_size(set: &ParticleSet) -> f64 {
    let sum_sq: f64 = set.particles.iter().map(|p| (2.0 * p.log_weight).exp()).sum();
    1.0 / sum_sq
}

/// Outcome of one filter step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub estimate: Point,
    pub n_los_anchors: usize,
    /// Set when no source informed the update (or it degenerated) and the
    /// filter coasted on the motion model.
    pub coasting: bool,
}

/// A running filter instance: configuration, particle cloud, RNG stream.
#[derive(Clone, Debug)]
pub struct Tracker {
    config: TrackerConfig,
    particles: ParticleSet,
    rng: ChaCha8Rng,
}

impl Tracker {
    /// Validates the config and draws the initial cloud around `x0`.
    pub fn new(config: TrackerConfig, x0: Point) -> Result<Self, TrackerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let particles = init_particles(&config, x0, &mut rng);
        Ok(Self { config, particles, rng })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    /// One predict/update/resample cycle. Sources with no information (NLOS
    /// ranges) are skipped; a step with no sources at all coasts on the
    /// motion model and reports `coasting`.
    pub fn step(&mut self, obs: &ObservationBundle, dt: f64) -> Result<StepResult, TrackerError> {
        if self.particles.is_empty() {
            return Err(TrackerError::EmptySet);
        }
        obs.validate()?;
        predict(&mut self.particles, dt, &self.config, &mut self.rng);

        let mut sources: Vec<Vec<f64>> = Vec::new();
        for anchor in &obs.anchors {
            if anchor.los.los_flag {
                if let Some(range) = anchor.los.range_estimate {
                    let mut w =
                        weight_los(&self.particles, range, true, anchor.position, self.config.range_noise_std);
                    normalize(&mut w)?;
                    sources.push(w);
                }
            }
            if self.config.mode == TrackerMode::Fusion {
                for feat in &anchor.features {
                    let mut w = weight_feature(&self.particles, feat.value, feat.model);
                    normalize(&mut w)?;
                    sources.push(w);
                }
            }
        }

        let mut coasting = sources.is_empty();
        if !coasting {
            match combine(&sources) {
                Ok(combined) => {
                    for (p, w) in self.particles.particles.iter_mut().zip(combined) {
                        p.log_weight = w;
                    }
                }
                Err(TrackerError::DegenerateObservation) => coasting = true,
                Err(e) => return Err(e),
            }
        }

        let resample_now = match self.config.ess_fraction {
            None => true,
            Some(f) => {
                effective_sample_size(&self.particles) < f * self.particles.len() as f64
            }
        };
        if resample_now {
            resample(&mut self.particles, &mut self.rng);
        }
        Ok(StepResult {
            estimate: estimate(&self.particles),
            n_los_anchors: obs.n_los_anchors(),
            coasting,
        })
    }
}
