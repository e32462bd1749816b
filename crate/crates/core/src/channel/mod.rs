//! Synthetic UWB multipath channel simulator.
//!
//! [`propagate`] turns scene geometry into a tap-level channel description:
//! a line-of-sight tap when no obstacle interrupts the direct segment, one
//! tap per unblocked first-order wall reflection (image method), and an
//! exponential diffuse power profile whose level grows with nearby clutter.
//! [`render`] then samples the complex baseband impulse response on a Δt
//! grid: each tap contributes a fractionally delayed unit-energy pulse, the
//! diffuse tail contributes zero-mean complex Gaussian samples, and white
//! noise is added throughout.
//!
//! Obstacles block and scatter; walls reflect but never block. Higher-order
//! reflections are not traced, they are absorbed into the diffuse term.

mod pulse;

pub use pulse::Pulse;

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Environment, Point, Pose};
use crate::SPEED_OF_LIGHT;

/// Sampling and noise parameters for rendered impulse responses.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseConfig {
    /// System bandwidth, Hz.
    pub bandwidth: f64,
    /// Sample interval Δt, seconds. Normally 1/bandwidth.
    pub sample_interval: f64,
    /// Samples per response.
    pub length: usize,
    /// Pulse duration T_p (full support width), seconds.
    pub pulse_duration: f64,
    /// White-noise amplitude std per complex sample: E|w|² = noise_std².
    pub noise_std: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        let bandwidth = 499.2e6;
        Self {
            bandwidth,
            sample_interval: 1.0 / bandwidth,
            length: 128,
            pulse_duration: 12e-9,
            noise_std: 0.005,
        }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = self.bandwidth > 0.0
            && self.sample_interval > 0.0
            && self.sample_interval.is_finite()
            && self.length >= 16
            && self.pulse_duration >= self.sample_interval
            && self.pulse_duration.is_finite()
            && self.noise_std >= 0.0
            && self.noise_std.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ChannelError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Duration of the sampled window, seconds.
    pub fn window(&self) -> f64 {
        self.length as f64 * self.sample_interval
    }
}

/// Propagation model parameters. Amplitudes follow a 1/d law with reference
/// gain `ref_gain` at 1 m; reflections are further attenuated by
/// `reflection_coeff`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub ref_gain: f64,
    pub reflection_coeff: f64,
    /// Diffuse power S₀ at the profile onset, linear.
    pub diffuse_power: f64,
    /// Exponential decay constant γ of the diffuse profile, seconds.
    pub diffuse_decay: f64,
    /// Obstacles within this distance of the agent count as nearby clutter.
    pub diffuse_radius: f64,
    /// Diffuse power boost per nearby obstacle, dB.
    pub diffuse_boost_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            ref_gain: 1.0,
            reflection_coeff: 0.6,
            diffuse_power: 0.01,
            diffuse_decay: 15e-9,
            diffuse_radius: 2.0,
            diffuse_boost_db: 6.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = self.ref_gain > 0.0
            && (0.0..=1.0).contains(&self.reflection_coeff)
            && self.diffuse_power >= 0.0
            && self.diffuse_decay > 0.0
            && self.diffuse_radius >= 0.0
            && self.diffuse_boost_db.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ChannelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// One resolvable deterministic path.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    /// Propagation delay, seconds.
    pub delay: f64,
    /// Complex gain.
    pub amplitude: Complex64,
}

/// Tap-level channel description for one (agent position, anchor) pair.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    /// True when the direct path is unobstructed.
    pub los_present: bool,
    /// Deterministic paths sorted by delay. When `los_present`, the first
    /// tap is the direct path with delay d/c.
    pub taps: Vec<Tap>,
    /// Start of the diffuse profile: the earliest path delay, or the direct
    /// path delay when no deterministic path exists.
    pub diffuse_onset: f64,
    /// Diffuse power at onset after the nearby-clutter boost, linear.
    pub diffuse_power: f64,
    /// Diffuse decay constant, seconds.
    pub diffuse_decay: f64,
}

/// Sampled complex baseband impulse response.
#[derive(Clone, Debug, PartialEq)]
pub struct Cir {
    pub samples: Vec<Complex64>,
    pub anchor_id: usize,
    pub timestep: usize,
}

impl Cir {
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }
}

/// Time-ordered agent path sampled at a fixed period.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub sample_period: f64,
}

/// One trajectory step with its per-anchor measurements and ground truth.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub timestep: usize,
    pub pose: Pose,
    /// One response per anchor, indexed by anchor id.
    pub measurements: Vec<Cir>,
    /// Ground-truth LOS indicator per anchor.
    pub truth_los: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("agent position ({0:.3}, {1:.3}) lies outside environment bounds")]
    OutOfBounds(f64, f64),
    #[error("anchor index {0} out of range (environment has {1} anchors)")]
    BadAnchor(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Derives an independent stream seed from a base seed and two indices.
/// SplitMix64 finalizer; changing any input decorrelates the output.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Computes the deterministic part of the channel between `agent` and anchor
/// `anchor_id`: LOS tap, first-order wall reflections, and the diffuse
/// profile parameters. Tap phases are drawn uniformly from `rng`.
pub fn propagate(
    env: &Environment,
    cfg: &ChannelConfig,
    agent: Point,
    anchor_id: usize,
    rng: &mut impl Rng,
) -> Result<ChannelRealization, ChannelError> {
    if !env.bounds.contains(agent) {
        return Err(ChannelError::OutOfBounds(agent.x, agent.y));
    }
    let anchor = env
        .anchors
        .get(anchor_id)
        .ok_or(ChannelError::BadAnchor(anchor_id, env.anchors.len()))?
        .position();

    let d = agent.dist(anchor).max(1e-6);
    let los_present = !env.segment_blocked(agent, anchor);

    let mut taps = Vec::new();
    if los_present {
        let phase = rng.random::<f64>() * TAU;
        taps.push(Tap {
            delay: d / SPEED_OF_LIGHT,
            amplitude: Complex64::from_polar(cfg.ref_gain / d, phase),
        });
    }
    for wall in &env.walls {
        if let Some((bounce, len)) = wall.specular_bounce(agent, anchor) {
            if !env.segment_blocked(agent, bounce) && !env.segment_blocked(bounce, anchor) {
                let phase = rng.random::<f64>() * TAU;
                taps.push(Tap {
                    delay: len / SPEED_OF_LIGHT,
                    amplitude: Complex64::from_polar(
                        cfg.reflection_coeff * cfg.ref_gain / len.max(1e-6),
                        phase,
                    ),
                });
            }
        }
    }
    taps.sort_by(|a, b| a.delay.total_cmp(&b.delay));

    let diffuse_onset = taps.first().map_or(d / SPEED_OF_LIGHT, |t| t.delay);
    let n_near = env.obstacles_near(agent, cfg.diffuse_radius);
    let diffuse_power =
        cfg.diffuse_power * 10f64.powf(cfg.diffuse_boost_db * n_near as f64 / 10.0);

    Ok(ChannelRealization {
        los_present,
        taps,
        diffuse_onset,
        diffuse_power,
        diffuse_decay: cfg.diffuse_decay,
    })
}

/// Samples the impulse response on the Δt grid. Deterministic given `seed`.
///
/// Taps whose delay falls beyond the sampled window are dropped with a log
/// message. `anchor_id` and `timestep` of the result are zero; callers that
/// track them set the fields afterwards.
pub fn render(
    realization: &ChannelRealization,
    pulse: &PulseConfig,
    seed: u64,
) -> Result<Cir, ChannelError> {
    pulse.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(render_with_rng(realization, pulse, &mut rng))
}

pub(crate) fn render_with_rng(
    realization: &ChannelRealization,
    cfg: &PulseConfig,
    rng: &mut impl Rng,
) -> Cir {
    let pulse = Pulse::new(cfg.pulse_duration, cfg.sample_interval);
    let dt = cfg.sample_interval;
    let l = cfg.length;
    let mut samples = vec![Complex64::ZERO; l];

    for tap in &realization.taps {
        if tap.delay >= cfg.window() {
            log::warn!(
                "tap at {:.1} ns beyond {:.1} ns window, dropped",
                tap.delay * 1e9,
                cfg.window() * 1e9
            );
            continue;
        }
        let lo = ((tap.delay - pulse.half_width()) / dt).ceil().max(0.0) as usize;
        let hi = ((tap.delay + pulse.half_width()) / dt).floor().min((l - 1) as f64) as usize;
        for (n, sample) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *sample += tap.amplitude * pulse.eval(n as f64 * dt - tap.delay);
        }
    }

    if realization.diffuse_power > 0.0 {
        for (n, sample) in samples.iter_mut().enumerate() {
            let t = n as f64 * dt;
            if t < realization.diffuse_onset {
                continue;
            }
            let var =
                realization.diffuse_power * (-(t - realization.diffuse_onset) / realization.diffuse_decay).exp();
            let std = (var / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *sample += Complex64::new(re * std, im * std);
        }
    }

    if cfg.noise_std > 0.0 {
        let std = cfg.noise_std / 2f64.sqrt();
        for sample in samples.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *sample += Complex64::new(re * std, im * std);
        }
    }

    Cir { samples, anchor_id: 0, timestep: 0 }
}

/// Random waypoint walk: straight legs at constant nominal speed toward
/// randomly drawn waypoints, with bounded per-step heading change so turns
/// come out smooth. Positions are clipped to stay inside `env.bounds`.
/// Deterministic given `seed`.
pub fn generate_trajectory(
    env: &Environment,
    speed: f64,
    duration: f64,
    sample_period: f64,
    seed: u64,
) -> Result<Trajectory, ChannelError> {
    if speed <= 0.0 || duration <= 0.0 || sample_period <= 0.0 {
        return Err(ChannelError::InvalidConfig(format!(
            "speed {speed}, duration {duration}, sample_period {sample_period} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &env.bounds;
    let margin = 0.05 * b.width().min(b.height());
    let draw_point = |rng: &mut ChaCha8Rng| {
        for _ in 0..64 {
            let p = Point::new(
                rng.random_range(b.min_x + margin..b.max_x - margin),
                rng.random_range(b.min_y + margin..b.max_y - margin),
            );
            if env.obstacles.iter().all(|o| !o.contains(p)) {
                return p;
            }
        }
        b.center()
    };

    let mut pos = draw_point(&mut rng);
    let mut waypoint = draw_point(&mut rng);
    let mut heading = rng.random::<f64>() * TAU;
    let step = speed * sample_period;
    let max_turn = 0.35_f64; // rad per step
    let n_steps = (duration / sample_period).round() as usize;

    let mut poses = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        if pos.dist(waypoint) < 1.5 * step {
            waypoint = draw_point(&mut rng);
        }
        let desired = (waypoint.y - pos.y).atan2(waypoint.x - pos.x);
        let mut diff = desired - heading;
        while diff > std::f64::consts::PI {
            diff -= TAU;
        }
        while diff < -std::f64::consts::PI {
            diff += TAU;
        }
        heading += diff.clamp(-max_turn, max_turn);

        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        poses.push(Pose { timestep: k, x: pos.x, y: pos.y, vx, vy });

        let next = Point::new(
            (pos.x + vx * sample_period).clamp(b.min_x + margin, b.max_x - margin),
            (pos.y + vy * sample_period).clamp(b.min_y + margin, b.max_y - margin),
        );
        if next.dist(pos) < 0.5 * step {
            // Stuck against the boundary: head somewhere new.
            waypoint = draw_point(&mut rng);
        }
        pos = next;
    }
    Ok(Trajectory { poses, sample_period })
}

/// Deterministic constant-speed march along an explicit waypoint polyline.
/// The pose count is ⌊path_length/(speed·period)⌋ + 1.
pub fn trajectory_from_waypoints(
    env: &Environment,
    waypoints: &[Point],
    speed: f64,
    sample_period: f64,
) -> Result<Trajectory, ChannelError> {
    if waypoints.len() < 2 || speed <= 0.0 || sample_period <= 0.0 {
        return Err(ChannelError::InvalidConfig(
            "need at least two waypoints and positive speed/period".into(),
        ));
    }
    for w in waypoints {
        if !env.bounds.contains(*w) {
            return Err(ChannelError::OutOfBounds(w.x, w.y));
        }
    }
    let total: f64 = waypoints.windows(2).map(|w| w[0].dist(w[1])).sum();
    let n_steps = (total / (speed * sample_period)).floor() as usize;
    let mut poses = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let mut remaining = k as f64 * speed * sample_period;
        let mut placed = false;
        for w in waypoints.windows(2) {
            let seg = w[0].dist(w[1]);
            if remaining <= seg && seg > 0.0 {
                let f = remaining / seg;
                let dir_x = (w[1].x - w[0].x) / seg;
                let dir_y = (w[1].y - w[0].y) / seg;
                poses.push(Pose {
                    timestep: k,
                    x: w[0].x + f * (w[1].x - w[0].x),
                    y: w[0].y + f * (w[1].y - w[0].y),
                    vx: speed * dir_x,
                    vy: speed * dir_y,
                });
                placed = true;
                break;
            }
            remaining -= seg;
        }
        if !placed {
            let last = *waypoints.last().unwrap();
            let prev = waypoints[waypoints.len() - 2];
            let seg = prev.dist(last).max(1e-12);
            poses.push(Pose {
                timestep: k,
                x: last.x,
                y: last.y,
                vx: speed * (last.x - prev.x) / seg,
                vy: speed * (last.y - prev.y) / seg,
            });
        }
    }
    Ok(Trajectory { poses, sample_period })
}

/// Simulates the full measurement set for a trajectory: for every pose and
/// every anchor, propagate then render. Each (timestep, anchor) pair uses an
/// independent sub-seed, so records do not depend on iteration order.
pub fn generate_dataset(
    env: &Environment,
    cfg: &ChannelConfig,
    pulse: &PulseConfig,
    trajectory: &Trajectory,
    seed: u64,
) -> Result<Vec<DatasetRecord>, ChannelError> {
    cfg.validate()?;
    pulse.validate()?;
    let mut records = Vec::with_capacity(trajectory.poses.len());
    for pose in &trajectory.poses {
        let mut measurements = Vec::with_capacity(env.anchors.len());
        let mut truth_los = Vec::with_capacity(env.anchors.len());
        for j in 0..env.anchors.len() {
            let sub = mix_seed(seed, pose.timestep as u64, j as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let realization = propagate(env, cfg, pose.position(), j, &mut rng)?;
            let mut cir = render_with_rng(&realization, pulse, &mut rng);
            cir.anchor_id = j;
            cir.timestep = pose.timestep;
            truth_los.push(realization.los_present);
            measurements.push(cir);
        }
        records.push(DatasetRecord { timestep: pose.timestep, pose: *pose, measurements, truth_los });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Anchor, Rect, Wall};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn open_env() -> Environment {
        Environment {
            bounds: Rect::new(0.0, 0.0, 20.0, 20.0),
            walls: vec![],
            obstacles: vec![],
            anchors: vec![Anchor::new(1.0, 1.0), Anchor::new(19.0, 1.0), Anchor::new(10.0, 19.0)],
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn free_space_direct_path_delay() {
        let env = Environment {
            bounds: Rect::new(0.0, 0.0, 10.0, 10.0),
            walls: vec![],
            obstacles: vec![],
            anchors: vec![Anchor::new(2.0, 5.0)],
        };
        let r = propagate(&env, &ChannelConfig::default(), Point::new(5.0, 5.0), 0, &mut rng(1))
            .unwrap();
        assert!(r.los_present);
        assert_eq!(r.taps.len(), 1);
        assert_relative_eq!(r.taps[0].delay, 3.0 / SPEED_OF_LIGHT, epsilon = 1e-18);
        assert_relative_eq!(r.taps[0].amplitude.norm(), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.diffuse_onset, r.taps[0].delay);
    }

    #[test]
    fn obstacle_on_segment_blocks_los() {
        let mut env = open_env();
        env.obstacles.push(Rect::new(4.0, 0.5, 5.0, 2.0));
        // Anchor 0 at (1,1), agent at (9,1): obstacle straddles the segment.
        let r = propagate(&env, &ChannelConfig::default(), Point::new(9.0, 1.0), 0, &mut rng(1))
            .unwrap();
        assert!(!r.los_present);
        assert!(r.taps.is_empty());
        // Onset falls back to the direct-path delay.
        assert_relative_eq!(r.diffuse_onset, 8.0 / SPEED_OF_LIGHT, epsilon = 1e-18);
    }

    #[test]
    fn wall_reflection_delay_matches_image_point() {
        let env = Environment {
            bounds: Rect::new(-10.0, 0.0, 10.0, 10.0),
            walls: vec![Wall::new(Point::new(-10.0, 0.0), Point::new(10.0, 0.0))],
            obstacles: vec![],
            anchors: vec![Anchor::new(2.0, 3.0)],
        };
        let agent = Point::new(-2.0, 3.0);
        let r = propagate(&env, &ChannelConfig::default(), agent, 0, &mut rng(7)).unwrap();
        assert_eq!(r.taps.len(), 2);
        // Direct: 4 m. Reflection: |image(agent) - anchor| with image=(-2,-3).
        let image = Point::new(-2.0, -3.0);
        let expected = image.dist(Point::new(2.0, 3.0)) / SPEED_OF_LIGHT;
        assert_relative_eq!(r.taps[1].delay, expected, epsilon = 1e-18);
        let len = image.dist(Point::new(2.0, 3.0));
        assert_relative_eq!(r.taps[1].amplitude.norm(), 0.6 / len, epsilon = 1e-12);
    }

    #[test]
    fn blocked_reflection_leg_drops_tap() {
        let mut env = Environment {
            bounds: Rect::new(-10.0, 0.0, 10.0, 10.0),
            walls: vec![Wall::new(Point::new(-10.0, 0.0), Point::new(10.0, 0.0))],
            obstacles: vec![],
            anchors: vec![Anchor::new(2.0, 3.0)],
        };
        // Obstacle sits on the bounce leg (bounce point is (0,0)).
        env.obstacles.push(Rect::new(-1.5, 0.5, -0.5, 2.0));
        let r = propagate(&env, &ChannelConfig::default(), Point::new(-2.0, 3.0), 0, &mut rng(7))
            .unwrap();
        assert!(r.los_present);
        assert_eq!(r.taps.len(), 1);
    }

    #[test]
    fn out_of_bounds_agent_rejected() {
        let env = open_env();
        let err = propagate(&env, &ChannelConfig::default(), Point::new(25.0, 5.0), 0, &mut rng(1));
        assert!(matches!(err, Err(ChannelError::OutOfBounds(..))));
        let err = propagate(&env, &ChannelConfig::default(), Point::new(5.0, 5.0), 9, &mut rng(1));
        assert!(matches!(err, Err(ChannelError::BadAnchor(9, 3))));
    }

    #[test]
    fn diffuse_power_boosted_by_nearby_obstacles() {
        let mut env = open_env();
        env.obstacles.push(Rect::new(8.0, 8.0, 9.0, 9.0));
        env.obstacles.push(Rect::new(11.0, 8.0, 12.0, 9.0));
        let cfg = ChannelConfig::default();
        // Agent between the two obstacles: both within R_diff = 2 m.
        let near = propagate(&env, &cfg, Point::new(10.0, 8.5), 2, &mut rng(3)).unwrap();
        let far = propagate(&env, &cfg, Point::new(10.0, 15.0), 2, &mut rng(3)).unwrap();
        assert_relative_eq!(far.diffuse_power, cfg.diffuse_power);
        // Two obstacles at +6 dB each: ×10^(12/10).
        assert_relative_eq!(near.diffuse_power, cfg.diffuse_power * 10f64.powf(1.2), epsilon = 1e-12);
    }

    #[test]
    fn render_zero_channel_is_all_zero() {
        let real = ChannelRealization {
            los_present: false,
            taps: vec![],
            diffuse_onset: 0.0,
            diffuse_power: 0.0,
            diffuse_decay: 15e-9,
        };
        let cfg = PulseConfig { noise_std: 0.0, ..PulseConfig::default() };
        let cir = render(&real, &cfg, 42).unwrap();
        assert_eq!(cir.samples.len(), cfg.length);
        assert!(cir.samples.iter().all(|s| *s == Complex64::ZERO));
    }

    #[test]
    fn render_single_tap_has_unit_energy() {
        let cfg = PulseConfig { noise_std: 0.0, ..PulseConfig::default() };
        let real = ChannelRealization {
            los_present: true,
            taps: vec![Tap { delay: 20.0 * cfg.sample_interval, amplitude: Complex64::new(1.0, 0.0) }],
            diffuse_onset: 20.0 * cfg.sample_interval,
            diffuse_power: 0.0,
            diffuse_decay: 15e-9,
        };
        let cir = render(&real, &cfg, 0).unwrap();
        assert_abs_diff_eq!(cir.energy(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn render_noise_energy_matches_expectation() {
        // Mean residual energy over seeds ≈ L·σ_w².
        let cfg = PulseConfig { noise_std: 0.1, length: 64, ..PulseConfig::default() };
        let clean_cfg = PulseConfig { noise_std: 0.0, ..cfg };
        let real = ChannelRealization {
            los_present: true,
            taps: vec![Tap { delay: 10.0 * cfg.sample_interval, amplitude: Complex64::new(1.0, 0.0) }],
            diffuse_onset: 10.0 * cfg.sample_interval,
            diffuse_power: 0.0,
            diffuse_decay: 15e-9,
        };
        let clean = render(&real, &clean_cfg, 0).unwrap();
        let mut total = 0.0;
        let n_seeds = 1000;
        for seed in 0..n_seeds {
            let noisy = render(&real, &cfg, seed).unwrap();
            total += noisy
                .samples
                .iter()
                .zip(&clean.samples)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
        }
        let mean = total / n_seeds as f64;
        let expected = cfg.length as f64 * cfg.noise_std * cfg.noise_std;
        assert!((mean - expected).abs() < 0.05 * expected, "mean {mean}, expected {expected}");
    }

    #[test]
    fn render_energy_scales_quadratically_with_amplitude() {
        let cfg = PulseConfig { noise_std: 0.0, ..PulseConfig::default() };
        let mk = |amp: f64| ChannelRealization {
            los_present: true,
            taps: vec![Tap { delay: 31.7 * cfg.sample_interval, amplitude: Complex64::new(amp, 0.0) }],
            diffuse_onset: 0.0,
            diffuse_power: 0.0,
            diffuse_decay: 15e-9,
        };
        let e1 = render(&mk(1.0), &cfg, 0).unwrap().energy();
        let e2 = render(&mk(2.0), &cfg, 0).unwrap().energy();
        assert_relative_eq!(e2, 4.0 * e1, epsilon = 1e-12);
    }

    #[test]
    fn render_drops_tap_beyond_window() {
        let cfg = PulseConfig { noise_std: 0.0, ..PulseConfig::default() };
        let real = ChannelRealization {
            los_present: true,
            taps: vec![Tap { delay: cfg.window() * 1.5, amplitude: Complex64::new(1.0, 0.0) }],
            diffuse_onset: cfg.window() * 1.5,
            diffuse_power: 0.0,
            diffuse_decay: 15e-9,
        };
        let cir = render(&real, &cfg, 0).unwrap();
        assert_eq!(cir.energy(), 0.0);
    }

    #[test]
    fn render_is_seed_deterministic() {
        let env = open_env();
        let cfg = ChannelConfig::default();
        let pulse = PulseConfig::default();
        let make = || {
            let mut r = rng(99);
            let real = propagate(&env, &cfg, Point::new(7.0, 12.0), 1, &mut r).unwrap();
            render(&real, &pulse, 1234).unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn los_reciprocity_with_obstacles() {
        let mut env = open_env();
        env.obstacles.push(Rect::new(6.0, 6.0, 9.0, 9.0));
        env.walls.push(Wall::new(Point::new(0.0, 0.0), Point::new(20.0, 0.0)));
        let a = Point::new(3.0, 3.0);
        let b = Point::new(12.0, 12.0);
        let cfg = ChannelConfig::default();
        let mut env_fwd = env.clone();
        env_fwd.anchors = vec![Anchor::new(b.x, b.y)];
        let mut env_rev = env.clone();
        env_rev.anchors = vec![Anchor::new(a.x, a.y)];
        let fwd = propagate(&env_fwd, &cfg, a, 0, &mut rng(1)).unwrap();
        let rev = propagate(&env_rev, &cfg, b, 0, &mut rng(2)).unwrap();
        assert_eq!(fwd.los_present, rev.los_present);
        assert_eq!(fwd.taps.len(), rev.taps.len());
        for (x, y) in fwd.taps.iter().zip(&rev.taps) {
            assert_abs_diff_eq!(x.delay, y.delay, epsilon = 1e-15);
        }
    }

    #[test]
    fn delay_monotone_in_distance() {
        let env = Environment {
            bounds: Rect::new(0.0, 0.0, 100.0, 10.0),
            walls: vec![],
            obstacles: vec![],
            anchors: vec![Anchor::new(0.0, 5.0)],
        };
        let cfg = ChannelConfig::default();
        let mut last = 0.0;
        for i in 1..20 {
            let r =
                propagate(&env, &cfg, Point::new(i as f64 * 4.0, 5.0), 0, &mut rng(0)).unwrap();
            assert!(r.taps[0].delay > last);
            last = r.taps[0].delay;
        }
    }

    #[test]
    fn trajectory_pose_count_and_speed_bound() {
        let env = open_env();
        let t = generate_trajectory(&env, 1.0, 10.0, 0.1, 5).unwrap();
        assert_eq!(t.poses.len(), 101);
        for w in t.poses.windows(2) {
            let step = w[0].position().dist(w[1].position());
            assert!(step <= 1.05 * 0.1 * 1.0, "step {step} too large");
            assert!(env.bounds.contains(w[1].position()));
        }
    }

    #[test]
    fn trajectory_deterministic_per_seed() {
        let env = open_env();
        let a = generate_trajectory(&env, 1.2, 8.0, 0.1, 77).unwrap();
        let b = generate_trajectory(&env, 1.2, 8.0, 0.1, 77).unwrap();
        let c = generate_trajectory(&env, 1.2, 8.0, 0.1, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn waypoint_trajectory_marches_at_constant_speed() {
        let env = open_env();
        let t = trajectory_from_waypoints(
            &env,
            &[Point::new(2.0, 2.0), Point::new(12.0, 2.0), Point::new(12.0, 10.0)],
            2.0,
            0.5,
        )
        .unwrap();
        // Path length 18 m at 2 m/s sampled each 0.5 s: 18 steps + start.
        assert_eq!(t.poses.len(), 19);
        assert_relative_eq!(t.poses[0].x, 2.0);
        let last = t.poses.last().unwrap();
        assert_relative_eq!(last.x, 12.0);
        assert_relative_eq!(last.y, 10.0);
        for w in t.poses.windows(2) {
            assert_abs_diff_eq!(w[0].position().dist(w[1].position()), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn dataset_covers_every_pose_and_anchor() {
        let env = open_env();
        let traj = generate_trajectory(&env, 1.0, 9.9, 0.1, 3).unwrap();
        assert_eq!(traj.poses.len(), 100);
        let data = generate_dataset(&env, &ChannelConfig::default(), &PulseConfig::default(), &traj, 11)
            .unwrap();
        assert_eq!(data.len(), 100);
        for rec in &data {
            assert_eq!(rec.measurements.len(), 3);
            for (j, m) in rec.measurements.iter().enumerate() {
                assert_eq!(m.samples.len(), PulseConfig::default().length);
                assert_eq!(m.anchor_id, j);
                assert_eq!(m.timestep, rec.timestep);
                assert!(m.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
            }
            // Open area: every anchor in LOS.
            assert!(rec.truth_los.iter().all(|&b| b));
        }
    }

    #[test]
    fn dataset_deterministic_and_order_independent_subseeds() {
        let env = open_env();
        let traj = generate_trajectory(&env, 1.0, 3.0, 0.1, 3).unwrap();
        let cfg = ChannelConfig::default();
        let pulse = PulseConfig::default();
        let a = generate_dataset(&env, &cfg, &pulse, &traj, 11).unwrap();
        let b = generate_dataset(&env, &cfg, &pulse, &traj, 11).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.measurements, rb.measurements);
        }
        // A sub-trajectory reproduces the same records for shared timesteps.
        let short = Trajectory { poses: traj.poses[..5].to_vec(), sample_period: traj.sample_period };
        let c = generate_dataset(&env, &cfg, &pulse, &short, 11).unwrap();
        for (rc, ra) in c.iter().zip(&a) {
            assert_eq!(rc.measurements, ra.measurements);
        }
    }

    proptest! {
        #[test]
        fn prop_los_reciprocity(
            ax in 0.5f64..19.5, ay in 0.5f64..19.5,
            bx in 0.5f64..19.5, by in 0.5f64..19.5,
            ox in 2.0f64..14.0, oy in 2.0f64..14.0,
            w in 0.5f64..4.0, h in 0.5f64..4.0,
        ) {
            let mut env = open_env();
            env.obstacles.push(Rect::new(ox, oy, ox + w, oy + h));
            let cfg = ChannelConfig::default();
            let mut env_fwd = env.clone();
            env_fwd.anchors = vec![Anchor::new(bx, by)];
            let mut env_rev = env.clone();
            env_rev.anchors = vec![Anchor::new(ax, ay)];
            let fwd = propagate(&env_fwd, &cfg, Point::new(ax, ay), 0, &mut rng(1)).unwrap();
            let rev = propagate(&env_rev, &cfg, Point::new(bx, by), 0, &mut rng(2)).unwrap();
            prop_assert_eq!(fwd.los_present, rev.los_present);
            if fwd.los_present {
                prop_assert!((fwd.taps[0].delay - rev.taps[0].delay).abs() < 1e-15);
            }
        }

        #[test]
        fn prop_rendered_samples_finite(seed in 0u64..1000) {
            let env = open_env();
            let cfg = ChannelConfig::default();
            let pulse = PulseConfig { length: 32, ..PulseConfig::default() };
            let mut r = rng(seed);
            let real = propagate(&env, &cfg, Point::new(10.0, 10.0), 0, &mut r).unwrap();
            let cir = render(&real, &pulse, seed).unwrap();
            prop_assert!(cir.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
        }
    }
}
