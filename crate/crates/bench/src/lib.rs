//! Benchmark-only crate; see `benches/hot_paths.rs` for the measured paths:
//! channel propagation and pulse rendering, feature extraction, batched GP
//! prediction, particle resampling, and autoencoder gradient evaluation.
