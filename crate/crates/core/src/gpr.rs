//! Gaussian process regression from 2-D position to a scaled feature value.
//!
//! One model per (anchor, feature) pair. Fitting maximizes the log marginal
//! likelihood by gradient ascent in log-hyperparameter space on a 90/10
//! train/validation split, keeping the hyperparameters with the lowest mean
//! negative predictive log-likelihood on the held-out part. Prediction uses
//! a cached Cholesky factor and its inverse so that per-particle likelihood
//! evaluation reduces to one matrix product per batch.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureId, ScalerParams};
use crate::geom::{Point, Rect};

/// Smallest admissible noise variance; also the starting jitter.
pub const JITTER_FLOOR: f64 = 1e-8;

/// Stationary kernel family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Rbf,
    Matern32,
    Matern52,
}

/// Kernel family plus hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: Kernel,
    /// Length scale ℓ, meters.
    pub length_scale: f64,
    /// Signal variance σ_f², in squared scaled-feature units.
    pub signal_variance: f64,
    /// Observation noise variance σ_n².
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), GprError> {
        let ok = self.length_scale > 0.0
            && self.length_scale.is_finite()
            && self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && self.noise_variance >= JITTER_FLOOR
            && self.noise_variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GprError::InvalidSpec(format!("{self:?}")))
        }
    }

    /// Kernel value at separation `r` meters.
    pub fn eval_r(&self, r: f64) -> f64 {
        let sf2 = self.signal_variance;
        let l = self.length_scale;
        match self.family {
            Kernel::Rbf => sf2 * (-r * r / (2.0 * l * l)).exp(),
            Kernel::Matern32 => {
                let s = 3f64.sqrt() * r / l;
                sf2 * (1.0 + s) * (-s).exp()
            }
            Kernel::Matern52 => {
                let s = 5f64.sqrt() * r / l;
                sf2 * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    pub fn eval(&self, a: Point, b: Point) -> f64 {
        self.eval_r(a.dist(b))
    }

    /// ∂k/∂(ln ℓ) at separation `r`.
    fn dk_dlog_length(&self, r: f64) -> f64 {
        let sf2 = self.signal_variance;
        let l = self.length_scale;
        match self.family {
            Kernel::Rbf => self.eval_r(r) * r * r / (l * l),
            Kernel::Matern32 => {
                let s = 3f64.sqrt() * r / l;
                sf2 * s * s * (-s).exp()
            }
            Kernel::Matern52 => {
                let s = 5f64.sqrt() * r / l;
                sf2 * (-s).exp() * s * s * (1.0 + s) / 3.0
            }
        }
    }
}

/// Training data for one (anchor, feature) pair. Targets are expected in
/// scaled units (standardized on the training portion).
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSet {
    pub positions: Vec<Point>,
    pub targets: Vec<f64>,
    pub anchor_id: usize,
    pub feature_id: FeatureId,
}

impl FingerprintSet {
    pub fn validate(&self) -> Result<(), GprError> {
        if self.positions.len() < 2 || self.positions.len() != self.targets.len() {
            return Err(GprError::BadData(format!(
                "{} positions, {} targets",
                self.positions.len(),
                self.targets.len()
            )));
        }
        let finite = self
            .positions
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite())
            && self.targets.iter().all(|t| t.is_finite());
        if !finite {
            return Err(GprError::BadData("non-finite entries".into()));
        }
        Ok(())
    }
}

/// Fitting schedule. Gradient ascent with a fixed step on clipped gradients.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GprConfig {
    pub kernel: Kernel,
    pub iterations: usize,
    pub val_fraction: f64,
    pub learning_rate: f64,
    /// Per-component gradient clip in log space.
    pub max_gradient: f64,
}

impl Default for GprConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Matern52,
            iterations: 500,
            val_fraction: 0.1,
            learning_rate: 0.05,
            max_gradient: 5.0,
        }
    }
}

/// Deterministic every-k-th train/validation split with k ≈ 1/val_fraction.
/// Index i goes to validation iff i mod k == k-1, so the validation points
/// are spread evenly through the set.
pub fn validation_split(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    assert!(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction in (0,1)");
    let k = ((1.0 / val_fraction).round() as usize).max(2);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..n {
        if i % k == k - 1 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() && n >= 2 {
        val.push(n - 1);
        train.pop();
    }
    (train, val)
}

#[derive(Debug, Error)]
pub enum GprError {
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("invalid fingerprint data: {0}")]
    BadData(String),
    #[error("need at least {need} fingerprints, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("Cholesky factorization failed even at jitter 1e-2")]
    CholeskyFailed,
    #[error("inconsistent serialized model: {0}")]
    BadSerialization(String),
}

fn gram(spec: &KernelSpec, xs: &[Point]) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| spec.eval(xs[i], xs[j]))
}

/// Cholesky of K + σ_n² I with jitter escalation ×10 from 1e-8 to 1e-2.
fn factorize(spec: &KernelSpec, xs: &[Point]) -> Result<Cholesky<f64, nalgebra::Dyn>, GprError> {
    let n = xs.len();
    let base = {
        let mut k = gram(spec, xs);
        for i in 0..n {
            k[(i, i)] += spec.noise_variance;
        }
        k
    };
    if let Some(c) = Cholesky::new(base.clone()) {
        return Ok(c);
    }
    let mut jitter = JITTER_FLOOR;
    while jitter <= 1e-2 {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(k) {
            log::warn!("Gram matrix needed jitter {jitter:.0e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(GprError::CholeskyFailed)
}

/// Log marginal likelihood of the targets under `spec`, with its gradient
/// w.r.t. (ln ℓ, ln σ_f², ln σ_n²) via the trace identity.
pub fn log_marginal_likelihood(
    fps: &FingerprintSet,
    spec: &KernelSpec,
) -> Result<(f64, [f64; 3]), GprError> {
    spec.validate()?;
    if fps.positions.is_empty() || fps.positions.len() != fps.targets.len() {
        return Err(GprError::BadData("empty or mismatched fingerprint set".into()));
    }
    let n = fps.positions.len();
    let y = DVector::from_column_slice(&fps.targets);
    let chol = factorize(spec, &fps.positions)?;
    let alpha = chol.solve(&y);
    let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let value = -0.5 * y.dot(&alpha)
        - log_det_half
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // A = ααᵀ − K_y⁻¹; ∂lml/∂θ = ½ tr(A ∂K_y/∂θ).
    let kinv = chol.inverse();
    let mut grad = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let a_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let r = fps.positions[i].dist(fps.positions[j]);
            grad[0] += a_ij * spec.dk_dlog_length(r);
            grad[1] += a_ij * spec.eval_r(r);
            if i == j {
                grad[2] += a_ij * spec.noise_variance;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

/// A fitted GP observation model for one (anchor, feature) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GprModelFile", into = "GprModelFile")]
pub struct GprModel {
    pub kernel: KernelSpec,
    pub train_x: Vec<Point>,
    pub train_y: Vec<f64>,
    pub scaler: ScalerParams,
    pub anchor_id: usize,
    pub feature_id: FeatureId,
    /// Mean negative predictive log-likelihood on the validation split.
    pub validation_score: f64,
    /// Set when the optimizer hit a non-finite objective and stopped early.
    pub diverged: bool,
    #[serde(skip)]
    factors: Factors,
}

/// Cached factorization: lower Cholesky factor L of K+σ_n²I, its inverse,
/// and α = (K+σ_n²I)⁻¹ y.
#[derive(Clone, Debug, PartialEq, Default)]
struct Factors {
    linv: DMatrix<f64>,
    alpha: DVector<f64>,
}

impl GprModel {
    /// Builds a model with fixed hyperparameters (no optimization).
    pub fn with_hyperparameters(
        spec: KernelSpec,
        train_x: Vec<Point>,
        train_y: Vec<f64>,
        scaler: ScalerParams,
        anchor_id: usize,
        feature_id: FeatureId,
    ) -> Result<Self, GprError> {
        spec.validate()?;
        if train_x.len() < 2 || train_x.len() != train_y.len() {
            return Err(GprError::BadData(format!(
                "{} positions, {} targets",
                train_x.len(),
                train_y.len()
            )));
        }
        let factors = compute_factors(&spec, &train_x, &train_y)?;
        Ok(Self {
            kernel: spec,
            train_x,
            train_y,
            scaler,
            anchor_id,
            feature_id,
            validation_score: f64::NAN,
            diverged: false,
            factors,
        })
    }

    /// Posterior mean and variance at one position.
    pub fn predict(&self, x: Point) -> (f64, f64) {
        let n = self.train_x.len();
        let kstar = DVector::from_fn(n, |i, _| self.kernel.eval(self.train_x[i], x));
        let mu = kstar.dot(&self.factors.alpha);
        let v = &self.factors.linv * &kstar;
        let var = (self.kernel.signal_variance - v.norm_squared()).max(0.0)
            + self.kernel.noise_variance;
        (mu, var)
    }

    /// Posterior mean and variance at many positions. One matrix product of
    /// L⁻¹ against all kernel columns; same math as [`Self::predict`] up to
    /// float summation order.
    pub fn predict_batch(&self, xs: &[Point]) -> Vec<(f64, f64)> {
        let n = self.train_x.len();
        let m = xs.len();
        if m == 0 {
            return Vec::new();
        }
        let kstar = DMatrix::from_fn(n, m, |i, j| self.kernel.eval(self.train_x[i], xs[j]));
        let v = &self.factors.linv * &kstar;
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let mu = kstar.column(j).dot(&self.factors.alpha);
            let var = (self.kernel.signal_variance - v.column(j).norm_squared()).max(0.0)
                + self.kernel.noise_variance;
            out.push((mu, var));
        }
        out
    }

    /// Gaussian observation log-likelihood of scaled value `z` at `x`.
    pub fn log_likelihood(&self, x: Point, z: f64) -> f64 {
        let (mu, var) = self.predict(x);
        gaussian_log_density(z, mu, var)
    }

    /// Batched observation log-likelihood over positions, one observed `z`.
    pub fn log_likelihood_batch(&self, xs: &[Point], z: f64) -> Vec<f64> {
        self.predict_batch(xs)
            .into_iter()
            .map(|(mu, var)| gaussian_log_density(z, mu, var))
            .collect()
    }
}

fn gaussian_log_density(z: f64, mu: f64, var: f64) -> f64 {
    -(z - mu) * (z - mu) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

fn compute_factors(spec: &KernelSpec, xs: &[Point], ys: &[f64]) -> Result<Factors, GprError> {
    let chol = factorize(spec, xs)?;
    let y = DVector::from_column_slice(ys);
    let alpha = chol.solve(&y);
    let n = xs.len();
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(GprError::CholeskyFailed)?;
    Ok(Factors { linv, alpha })
}

/// Mean negative predictive log-likelihood of (xs, ys) under the model.
fn holdout_score(model: &GprModel, xs: &[Point], ys: &[f64]) -> f64 {
    let preds = model.predict_batch(xs);
    let mut s = 0.0;
    for ((mu, var), &z) in preds.iter().zip(ys) {
        s -= gaussian_log_density(z, *mu, *var);
    }
    s / xs.len() as f64
}

/// Fits hyperparameters by gradient ascent on the training-split log
/// marginal likelihood, returning the model whose hyperparameters scored
/// the best validation negative log-likelihood. The returned model keeps
/// the training split as its data. Deterministic.
pub fn fit(
    fps: &FingerprintSet,
    scaler: ScalerParams,
    cfg: &GprConfig,
) -> Result<GprModel, GprError> {
    fps.validate()?;
    let n = fps.positions.len();
    if n < 10 {
        return Err(GprError::TooFewPoints { need: 10, got: n });
    }
    let (train_idx, val_idx) = validation_split(n, cfg.val_fraction);
    let tx: Vec<Point> = train_idx.iter().map(|&i| fps.positions[i]).collect();
    let ty: Vec<f64> = train_idx.iter().map(|&i| fps.targets[i]).collect();
    let vx: Vec<Point> = val_idx.iter().map(|&i| fps.positions[i]).collect();
    let vy: Vec<f64> = val_idx.iter().map(|&i| fps.targets[i]).collect();
    let train_set = FingerprintSet {
        positions: tx.clone(),
        targets: ty.clone(),
        anchor_id: fps.anchor_id,
        feature_id: fps.feature_id,
    };

    // Scale-aware start: ℓ at 10% of the bounding-box diagonal.
    let (mut lo, mut hi) = (tx[0], tx[0]);
    for p in &tx {
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let diagonal = lo.dist(hi).max(1e-3);
    let mut spec = KernelSpec {
        family: cfg.kernel,
        length_scale: 0.1 * diagonal,
        signal_variance: 1.0,
        noise_variance: 0.1,
    };

    let score_of = |s: &KernelSpec| -> Result<f64, GprError> {
        let m = GprModel::with_hyperparameters(
            *s,
            tx.clone(),
            ty.clone(),
            scaler,
            fps.anchor_id,
            fps.feature_id,
        )?;
        Ok(holdout_score(&m, &vx, &vy))
    };

    let mut best_spec = spec;
    let mut best_score = score_of(&spec)?;
    let mut diverged = false;

    for iter in 0..cfg.iterations {
        let step = match log_marginal_likelihood(&train_set, &spec) {
            Ok((value, grad)) if value.is_finite() && grad.iter().all(|g| g.is_finite()) => grad,
            _ => {
                log::warn!("hyperparameter ascent diverged at iteration {iter}; keeping best");
                diverged = true;
                break;
            }
        };
        let mut logs = [
            spec.length_scale.ln(),
            spec.signal_variance.ln(),
            spec.noise_variance.ln(),
        ];
        for (l, g) in logs.iter_mut().zip(step) {
            *l += cfg.learning_rate * g.clamp(-cfg.max_gradient, cfg.max_gradient);
        }
        spec = KernelSpec {
            family: cfg.kernel,
            length_scale: logs[0].exp(),
            signal_variance: logs[1].exp(),
            noise_variance: logs[2].exp().max(JITTER_FLOOR),
        };
        match score_of(&spec) {
            Ok(score) if score.is_finite() => {
                if score < best_score {
                    best_score = score;
                    best_spec = spec;
                }
            }
            _ => {
                log::warn!("validation scoring failed at iteration {iter}; keeping best");
                diverged = true;
                break;
            }
        }
    }

    let mut model = GprModel::with_hyperparameters(
        best_spec,
        tx,
        ty,
        scaler,
        fps.anchor_id,
        fps.feature_id,
    )?;
    model.validation_score = best_score;
    model.diverged = diverged;
    Ok(model)
}

/// One cell of an exported prediction field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Dense posterior evaluation on a `resolution` × `resolution` grid spanning
/// `bounds` inclusively, row-major (y outer, x inner).
pub fn predict_grid(model: &GprModel, bounds: Rect, resolution: usize) -> Vec<GridPoint> {
    assert!(resolution >= 2, "grid needs at least 2 points per axis");
    let nx = resolution;
    let ny = resolution;
    let mut points = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y = bounds.min_y + bounds.height() * iy as f64 / (ny - 1) as f64;
        for ix in 0..nx {
            let x = bounds.min_x + bounds.width() * ix as f64 / (nx - 1) as f64;
            points.push(Point::new(x, y));
        }
    }
    model
        .predict_batch(&points)
        .into_iter()
        .zip(points)
        .map(|((mu, var), p)| GridPoint { x: p.x, y: p.y, mu, sigma: var.sqrt() })
        .collect()
}

/// Draws one function sample of the zero-mean GP prior at `xs`.
pub fn sample_prior(spec: &KernelSpec, xs: &[Point], seed: u64) -> Result<Vec<f64>, GprError> {
    spec.validate()?;
    let chol = factorize(spec, xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(xs.len(), |_, _| StandardNormal.sample(&mut rng));
    Ok((chol.l() * z).iter().cloned().collect())
}

// --- serialization ------------------------------------------------------

/// Flat JSON form; the factorization is rebuilt on load.
#[derive(Serialize, Deserialize)]
pub struct GprModelFile {
    kernel: KernelSpec,
    positions: Vec<(f64, f64)>,
    targets: Vec<f64>,
    scaler: ScalerParams,
    anchor_id: usize,
    feature_id: FeatureId,
    validation_score: f64,
    diverged: bool,
}

impl From<GprModel> for GprModelFile {
    fn from(m: GprModel) -> Self {
        GprModelFile {
            kernel: m.kernel,
            positions: m.train_x.iter().map(|p| (p.x, p.y)).collect(),
            targets: m.train_y,
            scaler: m.scaler,
            anchor_id: m.anchor_id,
            feature_id: m.feature_id,
            validation_score: m.validation_score,
            diverged: m.diverged,
        }
    }
}

impl TryFrom<GprModelFile> for GprModel {
    type Error = GprError;

    fn try_from(f: GprModelFile) -> Result<Self, Self::Error> {
        let train_x: Vec<Point> = f.positions.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let mut model = GprModel::with_hyperparameters(
            f.kernel,
            train_x,
            f.targets,
            f.scaler,
            f.anchor_id,
            f.feature_id,
        )
        .map_err(|e| GprError::BadSerialization(e.to_string()))?;
        model.validation_score = f.validation_score;
        model.diverged = f.diverged;
        Ok(model)
    }
}
