//! Ultra-wideband indoor positioning toolkit built around simulated channel
//! impulse responses.
//!
//! The crate is organized as a pipeline:
//!
//! * [`geom`] / [`channel`] — 2-D scene description and a multipath channel
//!   simulator producing complex baseband impulse responses per
//!   (agent pose, anchor) pair.
//! * [`features`] — scalar propagation features, a heuristic line-of-sight
//!   decision, and a leading-edge range estimate computed from a response.
//! * [`autoencoder`] — a small fully connected autoencoder whose bottleneck
//!   activations serve as additional learned features.
//! * [`gpr`] — Gaussian process regression mapping 2-D position to expected
//!   feature values, one model per (anchor, feature) pair.
//! * [`tracker`] — a particle filter fusing line-of-sight range likelihoods
//!   with GP feature likelihoods.
//! * [`harness`] — dataset generation, model training, tracking runs, and
//!   evaluation wired together behind a TOML experiment config.

pub mod autoencoder;
pub mod channel;
pub mod features;
pub mod geom;
pub mod gpr;
pub mod harness;
pub mod tracker;

/// Speed of light in vacuum, m/s. Converts geometric path lengths to delays.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub use channel::{ChannelConfig, ChannelRealization, Cir, PulseConfig, Tap};
pub use features::{FeatureConfig, FeatureId, LosDecision, PropagationFeatures};
pub use geom::{Anchor, Environment, Pose, Rect, Wall};
pub use gpr::{GprConfig, GprModel, Kernel, KernelSpec};
pub use harness::{DbMode, ExperimentConfig, HarnessError};
pub use tracker::{Tracker, TrackerConfig, TrackerMode};
