//! Fully connected autoencoder over channel magnitude vectors.
//!
//! Architecture L → h₁ → … → A → … → h₁ → L with rectifier activations on
//! hidden layers; the bottleneck (latent) and output layers are linear. The
//! forward and backward passes are written out explicitly, trained with
//! mini-batch SGD plus momentum. The bottleneck activations serve as learned
//! features alongside the hand-crafted propagation features.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    /// Input dimension; must match the response length L.
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden_dims: Vec<usize>,
    /// Bottleneck width A.
    pub latent_dim: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Fraction of the dataset used for training; the rest validates.
    pub train_fraction: f64,
    /// Divide each input by its maximum before encoding, so the model learns
    /// shape rather than amplitude.
    pub normalize_inputs: bool,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            hidden_dims: vec![150, 80],
            latent_dim: 6,
            activation: Activation::Relu,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            rng_seed: 0,
            train_fraction: 0.8,
            normalize_inputs: true,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<(), AeError> {
        let ok = self.input_dim > 0
            && !self.hidden_dims.is_empty()
            && self.hidden_dims.iter().all(|&d| d > 0)
            && self.latent_dim > 0
            && self.latent_dim < *self.hidden_dims.last().unwrap()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.train_fraction > 0.0
            && self.train_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(AeError::BadConfig(format!("{self:?}")))
        }
    }

    /// Layer widths from input to output: L, h₁, …, A, …, h₁, L.
    fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.latent_dim);
        widths.extend(self.hidden_dims.iter().rev());
        widths.push(self.input_dim);
        widths
    }

    /// Index of the layer producing the latent code.
    fn latent_layer(&self) -> usize {
        self.hidden_dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// Weight matrix, out × in.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Autoencoder parameters plus the training history that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AeModelFile", into = "AeModelFile")]
pub struct AeModel {
    pub config: AeConfig,
    pub layers: Vec<Layer>,
    pub history: Vec<EpochLoss>,
}

/// Per-parameter gradients, same shapes as [`AeModel::layers`].
#[derive(Clone, Debug)]
pub struct AeGradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Error)]
pub enum AeError {
    #[error("invalid autoencoder config: {0}")]
    BadConfig(String),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training needs at least {0} samples")]
    DatasetTooSmall(usize),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("serialized model is inconsistent: {0}")]
    BadSerialization(String),
}

/// Divides a magnitude vector by its maximum (no-op for all-zero input).
pub fn normalize_magnitudes(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / max).collect()
    }
}

/// Initializes a model with uniform Glorot weights and zero biases.
/// Deterministic given `config.rng_seed`.
pub fn init(config: &AeConfig) -> Result<AeModel, AeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let widths = config.layer_widths();
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for win in widths.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
        layers.push(Layer { w, b: DVector::zeros(fan_out) });
    }
    Ok(AeModel { config: config.clone(), layers, history: Vec::new() })
}

impl AeModel {
    /// True for layers followed by the rectifier (all but latent and output).
    fn is_rectified(&self, layer_idx: usize) -> bool {
        layer_idx != self.config.latent_layer() && layer_idx != self.layers.len() - 1
    }

    /// Forward pass over a batch (columns = samples). Returns pre-activations
    /// and activations per layer; `activations[0]` is the input.
    fn forward_batch(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            let a = if self.is_rectified(i) { z.map(|v| v.max(0.0)) } else { z.clone() };
            preacts.push(z);
            acts.push(a);
        }
        (preacts, acts)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), AeError> {
        if x.len() != self.config.input_dim {
            return Err(AeError::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AeError::NonFiniteInput);
        }
        Ok(())
    }
}

/// Runs the full network on one raw vector. Returns (reconstruction, latent).
pub fn forward(model: &AeModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), AeError> {
    model.check_input(x)?;
    let input = DMatrix::from_column_slice(x.len(), 1, x);
    let (_, acts) = model.forward_batch(&input);
    let latent = acts[model.config.latent_layer() + 1].column(0).iter().cloned().collect();
    let recon = acts.last().unwrap().column(0).iter().cloned().collect();
    Ok((recon, latent))
}

/// Latent code for one raw magnitude vector. Applies the configured input
/// normalization, then the encoder half of the network.
pub fn encode(model: &AeModel, x: &[f64]) -> Result<Vec<f64>, AeError> {
    let x = if model.config.normalize_inputs { normalize_magnitudes(x) } else { x.to_vec() };
    let (_, latent) = forward(model, &x)?;
    Ok(latent)
}

fn batch_matrix(model: &AeModel, batch: &[Vec<f64>]) -> Result<DMatrix<f64>, AeError> {
    if batch.is_empty() {
        return Err(AeError::EmptyBatch);
    }
    for x in batch {
        model.check_input(x)?;
    }
    let l = model.config.input_dim;
    Ok(DMatrix::from_fn(l, batch.len(), |i, j| batch[j][i]))
}

/// Mean squared reconstruction error of a batch, averaged over samples and
/// dimensions, together with its gradients w.r.t. every parameter.
pub fn loss_and_gradients(
    model: &AeModel,
    batch: &[Vec<f64>],
) -> Result<(f64, AeGradients), AeError> {
    let x = batch_matrix(model, batch)?;
    let n = (x.nrows() * x.ncols()) as f64;
    let (preacts, acts) = model.forward_batch(&x);
    let residual = acts.last().unwrap() - &x;
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;

    let mut grads: Vec<Layer> = model
        .layers
        .iter()
        .map(|l| Layer { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
        .collect();

    // delta starts as dLoss/d(output preact); outputs are linear.
    let mut delta = residual * (2.0 / n);
    for i in (0..model.layers.len()).rev() {
        grads[i].w = &delta * acts[i].transpose();
        grads[i].b = delta.column_sum();
        if i > 0 {
            let back = model.layers[i].w.transpose() * delta;
            delta = if model.is_rectified(i - 1) {
                back.zip_map(&preacts[i - 1], |d, z| if z > 0.0 { d } else { 0.0 })
            } else {
                back
            };
        }
    }
    Ok((loss, AeGradients { layers: grads }))
}

fn batch_loss(model: &AeModel, x: &DMatrix<f64>) -> f64 {
    let (_, acts) = model.forward_batch(x);
    let residual = acts.last().unwrap() - x;
    residual.iter().map(|r| r * r).sum::<f64>() / (x.nrows() * x.ncols()) as f64
}

/// Trains with mini-batch SGD plus momentum on a shuffled train/validation
/// split. Returns the parameters with the best validation loss seen, with
/// per-epoch losses in the history. Deterministic given the config seed.
pub fn train(model: &AeModel, dataset: &[Vec<f64>]) -> Result<AeModel, AeError> {
    let cfg = &model.config;
    cfg.validate()?;
    if dataset.len() < 10 {
        return Err(AeError::DatasetTooSmall(10));
    }
    let data: Vec<Vec<f64>> = if cfg.normalize_inputs {
        dataset.iter().map(|x| normalize_magnitudes(x)).collect()
    } else {
        dataset.to_vec()
    };
    for x in &data {
        model.check_input(x)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, 0x7261_696e, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((data.len() as f64 * cfg.train_fraction).round() as usize)
        .clamp(1, data.len() - 1);
    let (train_idx, val_idx) = order.split_at(n_train);

    let l = cfg.input_dim;
    let to_matrix = |idx: &[usize]| {
        DMatrix::from_fn(l, idx.len(), |i, j| data[idx[j]][i])
    };
    let train_x = to_matrix(train_idx);
    let val_x = to_matrix(val_idx);

    let mut current = model.clone();
    current.history.clear();
    let mut best = current.clone();
    let mut best_val = batch_loss(&current, &val_x);
    let mut velocity: Vec<Layer> = current
        .layers
        .iter()
        .map(|l| Layer { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
        .collect();

    let mut shuffled: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = loss_and_gradients(&current, &batch)?;
            if !loss.is_finite() {
                return Err(AeError::Diverged { epoch });
            }
            for ((layer, v), g) in
                current.layers.iter_mut().zip(&mut velocity).zip(&grads.layers)
            {
                v.w = &v.w * cfg.momentum - &g.w * cfg.learning_rate;
                v.b = &v.b * cfg.momentum - &g.b * cfg.learning_rate;
                layer.w += &v.w;
                layer.b += &v.b;
            }
        }
        let train_loss = batch_loss(&current, &train_x);
        let val_loss = batch_loss(&current, &val_x);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(AeError::Diverged { epoch });
        }
        current.history.push(EpochLoss { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best.layers = current.layers.clone();
        }
    }
    best.history = current.history;
    Ok(best)
}

// --- serialization ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major weight entries.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Flat JSON-friendly form of [`AeModel`].
#[derive(Serialize, Deserialize)]
pub struct AeModelFile {
    config: AeConfig,
    layers: Vec<LayerFile>,
    history: Vec<EpochLoss>,
}

impl From<AeModel> for AeModelFile {
    fn from(m: AeModel) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| LayerFile {
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                w: l.w.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()).collect(),
                b: l.b.iter().cloned().collect(),
            })
            .collect();
        AeModelFile { config: m.config, layers, history: m.history }
    }
}

impl TryFrom<AeModelFile> for AeModel {
    type Error = AeError;

    fn try_from(f: AeModelFile) -> Result<Self, Self::Error> {
        let mut layers = Vec::with_capacity(f.layers.len());
        for l in &f.layers {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(AeError::BadSerialization(format!(
                    "layer {}x{} has {} weights, {} biases",
                    l.rows,
                    l.cols,
                    l.w.len(),
                    l.b.len()
                )));
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.w),
                b: DVector::from_column_slice(&l.b),
            });
        }
        let expected = f.config.layer_widths();
        if layers.len() + 1 != expected.len()
            || layers
                .iter()
                .zip(expected.windows(2))
                .any(|(l, w)| l.w.ncols() != w[0] || l.w.nrows() != w[1])
        {
            return Err(AeError::BadSerialization("layer shapes do not match config".into()));
        }
        Ok(AeModel { config: f.config, layers, history: f.history })
    }
}
