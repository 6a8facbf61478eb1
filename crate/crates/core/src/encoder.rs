//! Two-layer MLP encoder with unit-norm outputs, manual backprop, and SGD
//! with momentum.
//!
//! The map is `v = normalize(w2 . relu(w1 . x + b1) + b2)` row-wise. Rows
//! whose pre-normalization magnitude falls below 1e-12 are mapped to the
//! first basis vector so downstream cosine similarities stay finite.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Pre-normalization magnitudes below this are routed through the basis
/// vector guard.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Architecture and initialization knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Embedding dimension of the unit-norm output space.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Multiplier on the fan-in-scaled uniform init bound.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_embed_dim() -> usize {
    128
}

fn default_init_scale() -> f64 {
    1.0
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dim,
            embed_dim,
            init_scale: default_init_scale(),
            seed,
        }
    }
}

/// Trainable parameters. The same shape doubles as the gradient and
/// velocity container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub w1: Array2<F>, // hidden x input
    pub b1: Array1<F>,
    pub w2: Array2<F>, // embed x hidden
    pub b2: Array1<F>,
}

impl<F: Real> EncoderParams<F> {
    /// Seeded uniform init in `[-s, s]` with `s = init_scale / sqrt(fan_in)`.
    /// Tensors are filled in declaration order (w1, b1, w2, b2) from a
    /// ChaCha8 stream, so the result is bitwise reproducible.
    pub fn init(config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s1 = config.init_scale / (config.input_dim as f64).sqrt();
        let s2 = config.init_scale / (config.hidden_dim as f64).sqrt();
        let mut draw = |scale: f64| F::real(rng.random_range(-scale..scale));
        let w1 = Array2::from_shape_fn((config.hidden_dim, config.input_dim), |_| draw(s1));
        let b1 = Array1::from_shape_fn(config.hidden_dim, |_| draw(s1));
        let w2 = Array2::from_shape_fn((config.embed_dim, config.hidden_dim), |_| draw(s2));
        let b2 = Array1::from_shape_fn(config.embed_dim, |_| draw(s2));
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Euclidean norm over all parameter entries.
    pub fn l2_norm(&self) -> F {
        let mut acc = F::zero();
        for x in self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
        {
            acc += *x * *x;
        }
        acc.sqrt()
    }

    /// Entrywise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .zip(
                other
                    .w1
                    .iter()
                    .chain(other.b1.iter())
                    .chain(other.w2.iter())
                    .chain(other.b2.iter()),
            )
        {
            *a += scale * *b;
        }
    }
}

/// Intermediates retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    input: Array2<F>,
    hidden: Array2<F>, // post-ReLU activations
    w1: Array2<F>,
    w2: Array2<F>,
    norms: Array1<F>,
    output: Array2<F>,
    guarded: Vec<bool>,
}

impl<F> ForwardCache<F> {
    pub fn embeddings(&self) -> &Array2<F> {
        &self.output
    }
}

/// Forward pass: returns the unit-norm embeddings and the cache for
/// [`backward`].
pub fn forward<F: Real>(
    params: &EncoderParams<F>,
    x: &Array2<F>,
) -> Result<(Array2<F>, ForwardCache<F>), EncoderError> {
    if x.ncols() != params.input_dim() {
        return Err(EncoderError::DimensionMismatch(format!(
            "input has {} columns, encoder expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let n = x.nrows();
    let mut hidden = x.dot(&params.w1.t());
    for mut row in hidden.rows_mut() {
        for (h, b) in row.iter_mut().zip(params.b1.iter()) {
            *h = (*h + *b).max(F::zero());
        }
    }
    let mut pre_norm = hidden.dot(&params.w2.t());
    for mut row in pre_norm.rows_mut() {
        for (u, b) in row.iter_mut().zip(params.b2.iter()) {
            *u += *b;
        }
    }
    let guard = F::real(NORM_GUARD);
    let mut norms = Array1::<F>::zeros(n);
    let mut guarded = vec![false; n];
    let mut output = pre_norm;
    for (i, mut row) in output.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|u| *u * *u).sum::<F>().sqrt();
        norms[i] = norm;
        if norm < guard {
            guarded[i] = true;
            row.fill(F::zero());
            row[0] = F::one();
        } else {
            row.mapv_inplace(|u| u / norm);
        }
    }
    let cache = ForwardCache {
        input: x.clone(),
        hidden,
        w1: params.w1.clone(),
        w2: params.w2.clone(),
        norms,
        output: output.clone(),
        guarded,
    };
    Ok((output, cache))
}

/// Exact gradients of the composed map, including the normalization
/// Jacobian `(I - v v^T) / ||u||` per row. Guarded rows are locally
/// constant and receive zero gradient. Returns the parameter gradients and
/// the gradient with respect to the input.
pub fn backward<F: Real>(
    cache: &ForwardCache<F>,
    grad_v: &Array2<F>,
) -> Result<(EncoderParams<F>, Array2<F>), EncoderError> {
    if grad_v.dim() != cache.output.dim() {
        return Err(EncoderError::StaleCache(format!(
            "upstream gradient is {:?} but cached output is {:?}",
            grad_v.dim(),
            cache.output.dim()
        )));
    }
    let (n, e) = grad_v.dim();
    let mut grad_pre = Array2::<F>::zeros((n, e));
    for i in 0..n {
        if cache.guarded[i] {
            continue;
        }
        let norm = cache.norms[i];
        let v = cache.output.row(i);
        let g = grad_v.row(i);
        let radial: F = g.iter().zip(v.iter()).map(|(a, b)| *a * *b).sum();
        for j in 0..e {
            grad_pre[[i, j]] = (g[j] - radial * v[j]) / norm;
        }
    }
    let grad_w2 = grad_pre.t().dot(&cache.hidden);
    let grad_b2 = grad_pre.sum_axis(Axis(0));
    let mut grad_z1 = grad_pre.dot(&cache.w2);
    for (mut row, hid) in grad_z1.rows_mut().into_iter().zip(cache.hidden.rows()) {
        for (g, h) in row.iter_mut().zip(hid.iter()) {
            if *h <= F::zero() {
                *g = F::zero();
            }
        }
    }
    let grad_w1 = grad_z1.t().dot(&cache.input);
    let grad_b1 = grad_z1.sum_axis(Axis(0));
    let grad_x = grad_z1.dot(&cache.w1);
    Ok((
        EncoderParams {
            w1: grad_w1,
            b1: grad_b1,
            w2: grad_w2,
            b2: grad_b2,
        },
        grad_x,
    ))
}

/// SGD-with-momentum state. Velocity buffers are congruent to the
/// parameters they update.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub velocity: EncoderParams<F>,
    pub momentum: F,
    pub weight_decay: F,
    pub base_lr: F,
    pub epoch_count: usize,
    /// Fractions of the run at which the learning rate divides by 10.
    pub decay_points: (f64, f64),
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &EncoderParams<F>, base_lr: F, momentum: F, weight_decay: F) -> Self {
        Self {
            velocity: params.zeros_like(),
            momentum,
            weight_decay,
            base_lr,
            epoch_count: 0,
            decay_points: (0.5, 0.75),
        }
    }
}

/// One SGD step:
/// `velocity <- momentum * velocity + grad + weight_decay * param` then
/// `param <- param - lr * velocity`.
pub fn sgd_step<F: Real>(
    params: &mut EncoderParams<F>,
    grads: &EncoderParams<F>,
    opt: &mut OptimizerState<F>,
    lr: F,
) {
    let momentum = opt.momentum;
    let wd = opt.weight_decay;
    step_tensor(&mut params.w1, &grads.w1, &mut opt.velocity.w1, momentum, wd, lr);
    step_tensor1(&mut params.b1, &grads.b1, &mut opt.velocity.b1, momentum, wd, lr);
    step_tensor(&mut params.w2, &grads.w2, &mut opt.velocity.w2, momentum, wd, lr);
    step_tensor1(&mut params.b2, &grads.b2, &mut opt.velocity.b2, momentum, wd, lr);
}

fn step_tensor<F: Real>(
    p: &mut Array2<F>,
    g: &Array2<F>,
    v: &mut Array2<F>,
    momentum: F,
    wd: F,
    lr: F,
) {
    for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
        *v = momentum * *v + *g + wd * *p;
        *p -= lr * *v;
    }
}

fn step_tensor1<F: Real>(
    p: &mut Array1<F>,
    g: &Array1<F>,
    v: &mut Array1<F>,
    momentum: F,
    wd: F,
    lr: F,
) {
    for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
        *v = momentum * *v + *g + wd * *p;
        *p -= lr * *v;
    }
}

/// Learning rate at `epoch` of `total_epochs`: the base rate, divided by 10
/// and then 100 once the run passes its decay points. Boundary epochs
/// belong to the later regime.
pub fn lr_at<F: Real>(opt: &OptimizerState<F>, epoch: usize, total_epochs: usize) -> F {
    let frac = if total_epochs == 0 {
        0.0
    } else {
        epoch as f64 / total_epochs as f64
    };
    if frac >= opt.decay_points.1 {
        opt.base_lr / F::real(100.0)
    } else if frac >= opt.decay_points.0 {
        opt.base_lr / F::real(10.0)
    } else {
        opt.base_lr
    }
}

/// JSON header of the binary checkpoint format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Writes a checkpoint: a little-endian `u32` header length, the JSON
/// header, then each parameter tensor in declaration order as raw
/// little-endian `f32` row-major arrays.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    params: &EncoderParams<F>,
    header: &CheckpointHeader,
) -> Result<(), EncoderError> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut write_tensor = |iter: &mut dyn Iterator<Item = &F>| -> Result<(), EncoderError> {
        for x in iter {
            file.write_all(&(x.to_f64().unwrap_or(0.0) as f32).to_le_bytes())?;
        }
        Ok(())
    };
    write_tensor(&mut params.w1.iter())?;
    write_tensor(&mut params.b1.iter())?;
    write_tensor(&mut params.w2.iter())?;
    write_tensor(&mut params.b2.iter())?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Values are widened
/// from the stored `f32` into `F`.
pub fn load_checkpoint<F: Real>(
    path: &Path,
) -> Result<(CheckpointHeader, EncoderParams<F>), EncoderError> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| EncoderError::CorruptCheckpoint("missing header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| EncoderError::CorruptCheckpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    let counts = [
        header.hidden_dim * header.input_dim,
        header.hidden_dim,
        header.embed_dim * header.hidden_dim,
        header.embed_dim,
    ];
    let mut tensors: Vec<Vec<F>> = Vec::with_capacity(4);
    for count in counts {
        let mut buf = vec![0u8; count * 4];
        file.read_exact(&mut buf)
            .map_err(|_| EncoderError::CorruptCheckpoint("truncated tensor data".into()))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| F::real(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.push(values);
    }
    let b2 = Array1::from_vec(tensors.pop().unwrap());
    let w2 = Array2::from_shape_vec((header.embed_dim, header.hidden_dim), tensors.pop().unwrap())
        .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    let b1 = Array1::from_vec(tensors.pop().unwrap());
    let w1 = Array2::from_shape_vec((header.hidden_dim, header.input_dim), tensors.pop().unwrap())
        .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    Ok((header, EncoderParams { w1, b1, w2, b2 }))
}
