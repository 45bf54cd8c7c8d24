//! Fully connected autoencoder anomaly detector.
//!
//! Samples are min-max scaled per feature (fitted on the training split),
//! propagated through affine layers with linear or sigmoid activations, and
//! scored by the mean squared reconstruction error in scaled space,
//! `R = ||z - z_hat||^2 / d_0`. Training minimizes the batch mean of `R` with
//! Adam. A sample is flagged when its score exceeds the alpha-th percentile
//! of validation scores.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::stats;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Columns scored per forward pass. Fixed so that batch composition, and
/// therefore every floating-point result, is independent of thread count.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum AeError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite activation at epoch {epoch}, batch {batch}")]
    NonFiniteActivation { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("percentile {0} must lie in (0, 100]")]
    BadPercentile(f64),
    #[error("detector threshold has not been calibrated")]
    UncalibratedDetector,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("format version mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Sigmoid,
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Layer widths from input to output and the activation applied after each
/// affine map (`activations.len() == layer_dims.len() - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
}

impl NetworkArchitecture {
    /// Encoder-side widths must not grow from the input to the bottleneck
    /// (strictly decreasing after the first hidden layer), decoder-side
    /// widths mirror that, and input and output widths agree.
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self, AeError> {
        let bad = |m: String| Err(AeError::InvalidArchitecture(m));
        if layer_dims.len() < 3 {
            return bad("need input, at least one hidden layer and output".into());
        }
        if activations.len() != layer_dims.len() - 1 {
            return bad(format!(
                "{} activations for {} weight layers",
                activations.len(),
                layer_dims.len() - 1
            ));
        }
        if layer_dims.iter().any(|d| *d == 0) {
            return bad("layer widths must be positive".into());
        }
        let d0 = layer_dims[0];
        let last = layer_dims.len() - 1;
        if layer_dims[last] != d0 {
            return bad(format!("output width {} differs from input width {d0}", layer_dims[last]));
        }
        let hidden = &layer_dims[1..last];
        let b = (0..hidden.len())
            .min_by_key(|&i| hidden[i])
            .expect("at least one hidden layer");
        if hidden[0] > d0 || hidden[hidden.len() - 1] > d0 {
            return bad("hidden layers may not be wider than the input".into());
        }
        if hidden[..=b].windows(2).any(|w| w[1] >= w[0]) {
            return bad("encoder widths must strictly decrease towards the bottleneck".into());
        }
        if hidden[b..].windows(2).any(|w| w[1] <= w[0]) {
            return bad("decoder widths must strictly increase away from the bottleneck".into());
        }
        Ok(Self {
            layer_dims,
            activations,
        })
    }

    /// Default activation placement: first hidden layer linear, remaining
    /// hidden layers sigmoid, output linear.
    pub fn with_default_activations(layer_dims: Vec<usize>) -> Result<Self, AeError> {
        let n = layer_dims.len().saturating_sub(1);
        let activations = (0..n)
            .map(|l| {
                if l == 0 || l + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Sigmoid
                }
            })
            .collect();
        Self::new(layer_dims, activations)
    }

    /// `d0, d0, 256, 128, 64, 32, 64, 128, 256, d0`.
    pub fn paper(d0: usize) -> Result<Self, AeError> {
        Self::with_default_activations(vec![d0, d0, 256, 128, 64, 32, 64, 128, 256, d0])
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Per-layer weights (`out x in`) and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ModelParams {
    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        let dims = arch.layer_dims();
        Self {
            weights: dims.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: dims.windows(2).map(|w| DVector::zeros(w[1])).collect(),
        }
    }

    fn check_shapes(&self, arch: &NetworkArchitecture) -> Result<(), AeError> {
        let dims = arch.layer_dims();
        if self.weights.len() != arch.n_layers() || self.biases.len() != arch.n_layers() {
            return Err(AeError::ShapeMismatch(format!(
                "{} weight / {} bias layers for {} layers",
                self.weights.len(),
                self.biases.len(),
                arch.n_layers()
            )));
        }
        for (l, w) in dims.windows(2).enumerate() {
            if self.weights[l].shape() != (w[1], w[0]) || self.biases[l].len() != w[1] {
                return Err(AeError::ShapeMismatch(format!("layer {l}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Uniform fan-based initialization `U(-g*sqrt(6/(fan_in+fan_out)), +...)`
/// with zero biases; the gain `g` is 4 for layers feeding sigmoid units and
/// 1 for linear layers.
pub fn init_params(arch: &NetworkArchitecture, seed: u64) -> ModelParams {
    let mut rng = seeds::rng(seed);
    let mut params = ModelParams::zeros(arch);
    for (l, w) in params.weights.iter_mut().enumerate() {
        let (fan_out, fan_in) = w.shape();
        let gain = match arch.activations()[l] {
            Activation::Sigmoid => 4.0,
            Activation::Linear => 1.0,
        };
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        // row-major fill so the draw order matches the serialized layout
        for r in 0..fan_out {
            for c in 0..fan_in {
                w[(r, c)] = rng.random_range(-limit..=limit);
            }
        }
    }
    params
}

/// Per-feature min-max scaling to `[0, 1]`. Constant features map to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Clamp scaled values of out-of-range inputs to `[0, 1]`.
    pub clamp: bool,
}

impl FeatureScaler {
    pub fn fit(rows: &[Vec<f64>], clamp: bool) -> Result<Self, AeError> {
        let first = rows.first().ok_or(AeError::EmptyTrainingSet)?;
        let mut min = first.clone();
        let mut max = first.clone();
        for row in rows {
            if row.len() != min.len() {
                return Err(AeError::DimensionMismatch {
                    expected: min.len(),
                    got: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Ok(Self { min, max, clamp })
    }

    /// Identity scaling on `[0, 1]^d`.
    pub fn unit(d: usize) -> Self {
        Self {
            min: vec![0.0; d],
            max: vec![1.0; d],
            clamp: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range <= 0.0 {
            return 0.5;
        }
        let s = (v - self.min[j]) / range;
        if self.clamp {
            s.clamp(0.0, 1.0)
        } else {
            s
        }
    }

    pub fn scale(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(j, x)| self.scale_value(j, *x)).collect()
    }

    pub fn inverse_scale(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(j, x)| {
                let range = self.max[j] - self.min[j];
                if range <= 0.0 {
                    self.min[j]
                } else {
                    self.min[j] + x * range
                }
            })
            .collect()
    }

    /// Scaled samples as columns of a `d x n` matrix.
    fn scale_columns(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, rows.len());
        for (c, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m[(j, c)] = self.scale_value(j, *v);
            }
        }
        m
    }
}

/// Layer outputs of a batched forward pass; `activations[0]` is the scaled
/// input and the last entry the scaled reconstruction. Columns are samples.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

/// Forward pass over a `d0 x S` batch of scaled samples.
pub fn forward_scaled(
    params: &ModelParams,
    arch: &NetworkArchitecture,
    input: DMatrix<f64>,
) -> ForwardCache {
    let mut activations = Vec::with_capacity(arch.n_layers() + 1);
    activations.push(input);
    for (l, act) in arch.activations().iter().enumerate() {
        let prev = activations.last().expect("input pushed");
        let mut u = &params.weights[l] * prev;
        let b = &params.biases[l];
        for mut col in u.column_iter_mut() {
            col += b;
        }
        if *act == Activation::Sigmoid {
            u.apply(|x| *x = sigmoid(*x));
        }
        activations.push(u);
    }
    ForwardCache { activations }
}

/// Reconstruction of a single MW sample together with its layer cache.
pub fn forward(
    params: &ModelParams,
    scaler: &FeatureScaler,
    arch: &NetworkArchitecture,
    z: &[f64],
) -> Result<(Vec<f64>, ForwardCache), AeError> {
    if z.len() != arch.input_dim() {
        return Err(AeError::DimensionMismatch {
            expected: arch.input_dim(),
            got: z.len(),
        });
    }
    let x = DMatrix::from_column_slice(z.len(), 1, &scaler.scale(z));
    let cache = forward_scaled(params, arch, x);
    let out = cache.output();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AeError::NonFiniteActivation { epoch: 0, batch: 0 });
    }
    Ok((scaler.inverse_scale(out.as_slice()), cache))
}

/// `||a - b||^2 / d`; callers pass scaled vectors.
pub fn reconstruction_error(z: &[f64], z_hat: &[f64]) -> Result<f64, AeError> {
    if z.len() != z_hat.len() {
        return Err(AeError::DimensionMismatch {
            expected: z.len(),
            got: z_hat.len(),
        });
    }
    if z.is_empty() {
        return Ok(0.0);
    }
    Ok(z.iter().zip(z_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z.len() as f64)
}

fn column_errors(input: &DMatrix<f64>, output: &DMatrix<f64>) -> Vec<f64> {
    let d = input.nrows() as f64;
    input
        .column_iter()
        .zip(output.column_iter())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d)
        .collect()
}

/// Gradients of `J = (1/S) sum_j ||x_j - x_hat_j||^2 / d0` by reverse-mode
/// differentiation through the cached forward pass.
pub fn backward(
    params: &ModelParams,
    arch: &NetworkArchitecture,
    batch: &DMatrix<f64>,
    cache: &ForwardCache,
) -> ModelParams {
    let s = batch.ncols() as f64;
    let d0 = batch.nrows() as f64;
    let mut grads = ModelParams::zeros(arch);
    let mut delta = (cache.output() - batch) * (2.0 / (s * d0));
    for l in (0..arch.n_layers()).rev() {
        if arch.activations()[l] == Activation::Sigmoid {
            let a = &cache.activations[l + 1];
            delta.zip_apply(a, |g, y| *g *= y * (1.0 - y));
        }
        grads.weights[l] = &delta * cache.activations[l].transpose();
        grads.biases[l] = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
        if l > 0 {
            delta = params.weights[l].transpose() * &delta;
        }
    }
    grads
}

/// Batch loss `J` for scaled inputs.
pub fn batch_loss(params: &ModelParams, arch: &NetworkArchitecture, batch: &DMatrix<f64>) -> f64 {
    let cache = forward_scaled(params, arch, batch.clone());
    let errs = column_errors(batch, cache.output());
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(arch: &NetworkArchitecture) -> Self {
        Self {
            m: ModelParams::zeros(arch),
            v: ModelParams::zeros(arch),
        }
    }
}

/// Bias-corrected Adam update on a flat parameter slice.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamHyper) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// One Adam step over every layer; `t` is the 1-based step index.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, t: u64, hp: &AdamHyper) {
    assert!(t >= 1, "Adam step index starts at 1");
    for l in 0..params.weights.len() {
        adam_update(
            params.weights[l].as_mut_slice(),
            grads.weights[l].as_slice(),
            state.m.weights[l].as_mut_slice(),
            state.v.weights[l].as_mut_slice(),
            t,
            hp,
        );
        adam_update(
            params.biases[l].as_mut_slice(),
            grads.biases[l].as_slice(),
            state.m.biases[l].as_mut_slice(),
            state.v.biases[l].as_mut_slice(),
            t,
            hp,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 256, learning rate 1e-5, 2000 epochs.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-5,
            epochs: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
        }
    }

    /// Batch 64, learning rate 1e-3, 200 epochs.
    pub fn desk(seed: u64) -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 200,
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<(), AeError> {
        if self.batch_size == 0 {
            return Err(AeError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AeError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(AeError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Trained model, scaler and (once calibrated) the alarm threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub arch: NetworkArchitecture,
    pub params: ModelParams,
    pub scaler: FeatureScaler,
    pub threshold: Option<f64>,
    /// Percentile used for the threshold, in (0, 100].
    pub alpha: f64,
    pub train_config: TrainConfig,
}

impl DetectorState {
    /// Reconstruction error of one MW sample.
    pub fn score(&self, z: &[f64]) -> Result<f64, AeError> {
        if z.len() != self.arch.input_dim() {
            return Err(AeError::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: z.len(),
            });
        }
        let x = self.scaler.scale(z);
        let cache = forward_scaled(&self.params, &self.arch, DMatrix::from_column_slice(x.len(), 1, &x));
        reconstruction_error(&x, cache.output().as_slice())
    }

    /// Reconstruction errors of many MW samples, in input order. Runs on the
    /// current rayon pool; results do not depend on its size.
    pub fn scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, AeError> {
        let d = self.arch.input_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(AeError::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let chunks: Vec<Vec<f64>> = rows
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| {
                let x = self.scaler.scale_columns(chunk);
                let cache = forward_scaled(&self.params, &self.arch, x.clone());
                column_errors(&x, cache.output())
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn threshold(&self) -> Result<f64, AeError> {
        self.threshold.ok_or(AeError::UncalibratedDetector)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean training reconstruction error at the start of each epoch.
    pub epoch_loss: Vec<f64>,
    pub final_loss: f64,
    pub validation_loss: Option<f64>,
}

fn mean_error(params: &ModelParams, arch: &NetworkArchitecture, x: &DMatrix<f64>) -> f64 {
    let n = x.ncols();
    let starts: Vec<usize> = (0..n).step_by(SCORE_CHUNK).collect();
    let sums: Vec<f64> = starts
        .par_iter()
        .map(|&s| {
            let w = SCORE_CHUNK.min(n - s);
            let batch = x.columns(s, w).into_owned();
            let cache = forward_scaled(params, arch, batch.clone());
            column_errors(&batch, cache.output()).iter().sum::<f64>()
        })
        .collect();
    sums.iter().sum::<f64>() / n.max(1) as f64
}

/// Fits the scaler on `train_set`, initializes the network and runs Adam over
/// shuffled mini-batches. The returned detector is not yet calibrated.
pub fn train(
    arch: &NetworkArchitecture,
    config: &TrainConfig,
    train_set: &[Vec<f64>],
    validation_set: &[Vec<f64>],
) -> Result<(DetectorState, TrainLog), AeError> {
    train_with_progress(arch, config, train_set, validation_set, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, loss)` as each epoch starts.
pub fn train_with_progress(
    arch: &NetworkArchitecture,
    config: &TrainConfig,
    train_set: &[Vec<f64>],
    validation_set: &[Vec<f64>],
    mut progress: impl FnMut(usize, f64),
) -> Result<(DetectorState, TrainLog), AeError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(AeError::EmptyTrainingSet);
    }
    let d0 = arch.input_dim();
    if let Some(bad) = train_set.iter().chain(validation_set).find(|r| r.len() != d0) {
        return Err(AeError::DimensionMismatch {
            expected: d0,
            got: bad.len(),
        });
    }
    let scaler = FeatureScaler::fit(train_set, true)?;
    let x = scaler.scale_columns(train_set);
    let n = x.ncols();

    let mut params = init_params(arch, seeds::child_seed(config.seed, "init"));
    let mut adam = AdamState::new(arch);
    let hp = config.adam();
    let mut shuffle_rng = seeds::rng(seeds::child_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let loss = mean_error(&params, arch, &x);
        if !loss.is_finite() {
            return Err(AeError::NonFiniteActivation { epoch, batch: 0 });
        }
        epoch_loss.push(loss);
        progress(epoch, loss);

        order.shuffle(&mut shuffle_rng);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = x.select_columns(idx.iter());
            let cache = forward_scaled(&params, arch, batch.clone());
            if cache.output().iter().any(|v| !v.is_finite()) {
                return Err(AeError::NonFiniteActivation { epoch, batch: b });
            }
            let grads = backward(&params, arch, &batch, &cache);
            step += 1;
            adam_step(&mut params, &grads, &mut adam, step, &hp);
        }
    }
    let final_loss = mean_error(&params, arch, &x);
    if !final_loss.is_finite() || !params.is_finite() {
        return Err(AeError::NonFiniteActivation {
            epoch: config.epochs,
            batch: 0,
        });
    }
    let validation_loss = (!validation_set.is_empty())
        .then(|| mean_error(&params, arch, &scaler.scale_columns(validation_set)));

    Ok((
        DetectorState {
            arch: arch.clone(),
            params,
            scaler,
            threshold: None,
            alpha: 97.0,
            train_config: config.clone(),
        },
        TrainLog {
            epoch_loss,
            final_loss,
            validation_loss,
        },
    ))
}

/// Sets the threshold to the nearest-rank `alpha`-th percentile of the
/// validation reconstruction errors. Also returns the sorted errors.
pub fn calibrate_threshold(
    state: &DetectorState,
    validation_set: &[Vec<f64>],
    alpha: f64,
) -> Result<(DetectorState, Vec<f64>), AeError> {
    if validation_set.is_empty() {
        return Err(AeError::EmptyValidationSet);
    }
    let mut errors = state.scores(validation_set)?;
    let state = calibrate_from_scores(state, &errors, alpha)?;
    errors.sort_by(f64::total_cmp);
    Ok((state, errors))
}

/// Threshold from precomputed validation scores.
pub fn calibrate_from_scores(state: &DetectorState, scores: &[f64], alpha: f64) -> Result<DetectorState, AeError> {
    if !(alpha > 0.0 && alpha <= 100.0) {
        return Err(AeError::BadPercentile(alpha));
    }
    let tau = stats::nearest_rank_quantile(scores, alpha / 100.0).ok_or(AeError::EmptyValidationSet)?;
    Ok(DetectorState {
        threshold: Some(tau),
        alpha,
        ..state.clone()
    })
}

/// Flags `z` when its reconstruction error exceeds the threshold.
pub fn detect(state: &DetectorState, z: &[f64]) -> Result<(bool, f64), AeError> {
    let tau = state.threshold()?;
    let r = state.score(z)?;
    Ok((r > tau, r))
}

#[derive(Serialize, Deserialize)]
struct ScalerRecord {
    min: Vec<f64>,
    max: Vec<f64>,
    clamp: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    layer_dims: Vec<usize>,
    activation_map: Vec<Activation>,
    scaler: ScalerRecord,
    /// Row-major per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    alpha: f64,
    threshold: Option<f64>,
    train_config: TrainConfig,
    seed: u64,
}

/// Canonical JSON encoding of a detector.
pub fn model_to_json(state: &DetectorState) -> String {
    let weights = state
        .params
        .weights
        .iter()
        .map(|w| {
            let mut v = Vec::with_capacity(w.len());
            for r in 0..w.nrows() {
                v.extend(w.row(r).iter());
            }
            v
        })
        .collect();
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        layer_dims: state.arch.layer_dims().to_vec(),
        activation_map: state.arch.activations().to_vec(),
        scaler: ScalerRecord {
            min: state.scaler.min.clone(),
            max: state.scaler.max.clone(),
            clamp: state.scaler.clamp,
        },
        weights,
        biases: state.params.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
        alpha: state.alpha,
        threshold: state.threshold.filter(|t| t.is_finite()),
        train_config: state.train_config.clone(),
        seed: state.train_config.seed,
    };
    let mut s = serde_json::to_string(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<DetectorState, AeError> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| AeError::ShapeMismatch(format!("invalid model JSON: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
        other => {
            return Err(AeError::FormatVersionMismatch(format!(
                "model version {other:?}, expected {MODEL_FORMAT_VERSION}"
            )))
        }
    }
    let file: ModelFile =
        serde_json::from_value(raw).map_err(|e| AeError::ShapeMismatch(format!("invalid model record: {e}")))?;
    let arch = NetworkArchitecture::new(file.layer_dims, file.activation_map)?;
    let dims = arch.layer_dims();
    if file.weights.len() != arch.n_layers() || file.biases.len() != arch.n_layers() {
        return Err(AeError::ShapeMismatch("layer count differs from layer_dims".into()));
    }
    let mut params = ModelParams::zeros(&arch);
    for (l, w) in dims.windows(2).enumerate() {
        let (rows, cols) = (w[1], w[0]);
        if file.weights[l].len() != rows * cols || file.biases[l].len() != rows {
            return Err(AeError::ShapeMismatch(format!("layer {l} does not match layer_dims")));
        }
        params.weights[l] = DMatrix::from_row_slice(rows, cols, &file.weights[l]);
        params.biases[l] = DVector::from_column_slice(&file.biases[l]);
    }
    params.check_shapes(&arch)?;
    let d0 = arch.input_dim();
    if file.scaler.min.len() != d0 || file.scaler.max.len() != d0 {
        return Err(AeError::ShapeMismatch("scaler width differs from input width".into()));
    }
    Ok(DetectorState {
        arch,
        params,
        scaler: FeatureScaler {
            min: file.scaler.min,
            max: file.scaler.max,
            clamp: file.scaler.clamp,
        },
        threshold: file.threshold,
        alpha: file.alpha,
        train_config: file.train_config,
    })
}

pub fn save_model(state: &DetectorState, path: &Path) -> Result<(), AeError> {
    std::fs::write(path, model_to_json(state)).map_err(|e| AeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_model(path: &Path) -> Result<DetectorState, AeError> {
    let text = std::fs::read_to_string(path).map_err(|e| AeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    model_from_json(&text)
}
