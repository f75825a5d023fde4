//! Federated learning core: model containers, local training, update
//! clipping, noise addition, accumulation, and federated averaging.
//!
//! A round moves a global model `G` forward as
//! `G' = G + (eta / n) * sum_i (L_i - G)`, where each `L_i` is a locally
//! trained model. Differentially private rounds clip each update to L2 norm
//! `S` and add Gaussian noise before accumulation. Every operation here is a
//! pure function of its inputs and explicit seeds, so runs are reproducible
//! bit for bit.

pub mod codec;
pub mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use task::{DifferentiableTask, Examples};

/// Errors from model algebra and local training.
#[derive(Debug, Error)]
pub enum FlError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite {0} (training diverged; lower the learning rate)")]
    NonFinite(&'static str),
    #[error("model shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// One named parameter tensor: a shape and its row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        ParamEntry {
            name: name.into(),
            shape,
            values,
        }
    }
}

/// Ordered, named collection of 64-bit float parameters.
///
/// Invariants (enforced at construction and on decode): entry names are
/// unique, every shape's element product equals its value count, the total
/// parameter count is positive, and all values are finite. Two models are
/// conformable iff names, order, and shapes match exactly; all elementwise
/// operations require conformability.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, FlError> {
        let mut total = 0usize;
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(FlError::InvalidParams(format!(
                    "duplicate entry name `{}`",
                    e.name
                )));
            }
            let count: usize = e.shape.iter().product();
            if count != e.values.len() {
                return Err(FlError::InvalidParams(format!(
                    "entry `{}`: shape {:?} holds {} elements but {} values given",
                    e.name,
                    e.shape,
                    count,
                    e.values.len()
                )));
            }
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(FlError::InvalidParams(format!(
                    "entry `{}` contains a non-finite value",
                    e.name
                )));
            }
            total += count;
        }
        if total == 0 {
            return Err(FlError::InvalidParams(
                "total parameter count is zero".into(),
            ));
        }
        Ok(ModelParams { entries })
    }

    /// Single-entry convenience constructor for flat vectors.
    pub fn flat(name: impl Into<String>, values: Vec<f64>) -> Result<Self, FlError> {
        let shape = vec![values.len()];
        ModelParams::new(vec![ParamEntry::new(name, shape, values)])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// All scalar values in entry order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.values.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Names, order, and shapes all match exactly.
    pub fn conformable(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies `f` to every value, keeping names and shapes.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry::new(e.name.clone(), e.shape.clone(), e.values.iter().map(|&v| f(v)).collect()))
            .collect();
        ModelParams { entries }
    }

    /// Elementwise combination of two conformable models.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self, FlError> {
        if !self.conformable(other) {
            return Err(FlError::ShapeMismatch(format!(
                "{} vs {}",
                self.describe(),
                other.describe()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                let values = a
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                ParamEntry::new(a.name.clone(), a.shape.clone(), values)
            })
            .collect();
        Ok(ModelParams { entries })
    }

    pub fn add(&self, other: &Self) -> Result<Self, FlError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FlError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}{:?}", e.name, e.shape))
            .collect();
        parts.join(",")
    }
}

/// Local training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of passes over the local dataset. Must be >= 1.
    pub epochs: u32,
    /// SGD step size.
    pub local_lr: f64,
    /// Mini-batch size. Must be >= 1; larger than the dataset means full batch.
    pub batch_size: usize,
    /// Seed for the batch-order RNG; training is deterministic given it.
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), FlError> {
        if self.epochs < 1 {
            return Err(FlError::InvalidArg("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(FlError::InvalidArg("batch_size must be >= 1".into()));
        }
        if !self.local_lr.is_finite() {
            return Err(FlError::InvalidArg("local_lr must be finite".into()));
        }
        Ok(())
    }
}

/// Differential privacy parameters for one group's rounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DpConfig {
    /// L2 clipping bound S for each participant's update. Must be > 0.
    pub clip_bound: f64,
    /// Std of the total Gaussian noise on a round's accumulated sum. With
    /// local placement each of the `round_size` users draws noise with std
    /// `noise_sigma / sqrt(round_size)`, so the independent draws sum to a
    /// round total of exactly this scale.
    pub noise_sigma: f64,
    /// Number of sampled users per round (m). Must be >= 1.
    pub round_size: usize,
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if !(self.clip_bound > 0.0) {
            return Err(FlError::InvalidArg("clip_bound must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(FlError::InvalidArg("noise_sigma must be >= 0".into()));
        }
        if self.round_size < 1 {
            return Err(FlError::InvalidArg("round_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where round noise is injected: by each user before release, or by the
/// server on the accumulated sum. Total noise scale is identical either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    Local,
    Server,
}

impl Default for NoisePlacement {
    fn default() -> Self {
        NoisePlacement::Local
    }
}

/// Trains a copy of `global` on `data` by mini-batch SGD.
///
/// Initializes `L` from `global`, then for each epoch visits the rows in a
/// freshly shuffled order (one RNG seeded from `cfg.seed` drives all epochs)
/// and steps `L <- L - lr * grad(L, batch)` per batch. Deterministic given
/// `(global, data, cfg)`.
pub fn train_local(
    global: &ModelParams,
    data: &Examples,
    cfg: &TrainConfig,
    task: &dyn DifferentiableTask,
) -> Result<ModelParams, FlError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut local = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grad = task.gradient(&local, data, batch);
            if !grad.is_finite() {
                return Err(FlError::NonFinite("gradient"));
            }
            // A zero step must leave the model bit-identical, which the
            // subtraction would not (it rewrites -0.0 to 0.0).
            if cfg.local_lr != 0.0 {
                local = local.zip_map(&grad, |l, g| l - cfg.local_lr * g)?;
            }
        }
    }
    if !local.is_finite() {
        return Err(FlError::NonFinite("model"));
    }
    Ok(local)
}

/// Fisher-Yates shuffle driven by the training RNG.
fn shuffle(order: &mut [usize], rng: &mut ChaCha20Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Scales `delta` by `1 / max(1, ||delta||_2 / clip_bound)`.
///
/// The output norm is at most `clip_bound`, direction is preserved, and
/// vectors already inside the ball pass through unchanged (scale factor
/// exactly 1, so bit-identical).
pub fn clip_update(delta: &ModelParams, clip_bound: f64) -> ModelParams {
    assert!(clip_bound > 0.0, "clip bound must be positive");
    let scale = 1.0 / 1.0f64.max(delta.l2_norm() / clip_bound);
    delta.map(|v| v * scale)
}

/// Locally trains, clips the update to `dp.clip_bound`, and adds per-user
/// Gaussian noise.
///
/// The per-coordinate noise std is `dp.noise_sigma / sqrt(dp.round_size)`,
/// so a round's `round_size` independent user draws accumulate to a total of
/// std `noise_sigma`. With `noise_sigma == 0` no noise term is added and the
/// result bit-equals the clipped update. Deterministic given `rng_seed`.
pub fn train_local_dp(
    global: &ModelParams,
    data: &Examples,
    cfg: &TrainConfig,
    dp: &DpConfig,
    task: &dyn DifferentiableTask,
    rng_seed: u64,
) -> Result<ModelParams, FlError> {
    dp.validate()?;
    let local = train_local(global, data, cfg, task)?;
    let update = local.sub(global)?;
    let clipped = clip_update(&update, dp.clip_bound);
    let std = dp.noise_sigma / (dp.round_size as f64).sqrt();
    Ok(add_gaussian_noise(&clipped, std, rng_seed))
}

/// Adds iid `N(0, std^2)` per coordinate, seeded. `std == 0` returns the
/// input unchanged (no `+ 0.0` pass, so `-0.0` values survive bit-exactly).
pub fn add_gaussian_noise(params: &ModelParams, std: f64, rng_seed: u64) -> ModelParams {
    if std == 0.0 {
        return params.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    params.map(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + std * z
    })
}

/// Elementwise sum of a running accumulator and one update.
///
/// Float addition only commutes up to rounding, so callers that need
/// reproducible sums must fix an arrival order; the round aggregation in
/// this crate accumulates in participant-id order.
pub fn accumulate(partial: &ModelParams, update: &ModelParams) -> Result<ModelParams, FlError> {
    partial.add(update)
}

/// Federated averaging step: `G + (eta / n) * sum_of_updates`.
pub fn average(
    global: &ModelParams,
    sum_of_updates: &ModelParams,
    eta: f64,
    n: usize,
) -> Result<ModelParams, FlError> {
    if n < 1 {
        return Err(FlError::InvalidArg("divisor n must be >= 1".into()));
    }
    let k = eta / n as f64;
    global.zip_map(sum_of_updates, |g, s| g + k * s)
}
