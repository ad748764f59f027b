//! Low-rank residual adapter over frozen image and text embeddings, trained
//! with a one-of-n softmax objective.
//!
//! Both modalities go through the same projection `P(x) = x + A·(B·x)`. For a
//! prompt with text embedding `t` and candidate images `e₁..eₙ`, the logits are
//! `s·cos(P(eᵢ), P(t))` and the loss is the cross-entropy of the preferred
//! index under their softmax.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, PreferenceInstance};
use crate::embedding::{EmbeddingProvider, VectorError};
use crate::linalg::Matrix;
use crate::optim::{AdamW, CosineSchedule};
use crate::scalar::{self, Scalar};
use crate::scoring::argmax;
use crate::shuffle;

pub const ADP1_MAGIC: &[u8; 4] = b"ADP1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("embedding {id:?} has dimension {actual}, adapter expects {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("preferred index {index} out of range for {n} images")]
    BadInstance { index: usize, n: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid adapter file: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image embeddings keyed by image id, text embeddings keyed by prompt id.
#[derive(Clone, Copy)]
pub struct EmbeddingSources<'a> {
    pub images: &'a dyn EmbeddingProvider,
    pub texts: &'a dyn EmbeddingProvider,
}

impl EmbeddingSources<'_> {
    fn fetch<T: Scalar>(&self, provider: &dyn EmbeddingProvider, id: &str, dim: usize) -> Result<Vec<T>, TrainError> {
        let v = provider
            .lookup(id)
            .ok_or_else(|| TrainError::MissingEmbedding(id.to_owned()))?;
        if v.len() != dim {
            return Err(TrainError::DimensionMismatch { id: id.to_owned(), expected: dim, actual: v.len() });
        }
        Ok(scalar::convert_slice(&v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    /// `dim × rank`
    pub a: Matrix<T>,
    /// `rank × dim`
    pub b: Matrix<T>,
    pub logit_scale: T,
}

impl<T: Scalar> AdapterParams<T> {
    /// `A = 0`, `B = 0`: the identity projection.
    pub fn zero(dim: usize, rank: usize, logit_scale: T) -> Self {
        Self {
            a: Matrix::zeros(dim, rank),
            b: Matrix::zeros(rank, dim),
            logit_scale,
        }
    }

    /// `A = 0` and `B ~ N(0, 1/dim)`, so training starts from the identity
    /// projection with a non-degenerate gradient for `A`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rank: usize, logit_scale: T, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let b = Matrix::from_fn(rank, dim, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal) * std));
        Self { a: Matrix::zeros(dim, rank), b, logit_scale }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let (d, r) = (self.dim(), self.rank());
        if r == 0 || r > d || self.b.rows() != r || self.b.cols() != d {
            return Err(TrainError::InvalidConfig(format!("adapter shapes {d}x{r} / {}x{} are inconsistent", self.b.rows(), self.b.cols())));
        }
        if !(self.logit_scale > T::zero()) || !self.a.is_finite() || !self.b.is_finite() || !self.logit_scale.is_finite() {
            return Err(TrainError::InvalidConfig("adapter parameters must be finite with a positive logit scale".into()));
        }
        Ok(())
    }

    /// `P(x) = x + A·(B·x)`.
    pub fn project(&self, x: &[T]) -> Vec<T> {
        let h = self.b.matvec(x);
        let mut out = self.a.matvec(&h);
        out.iter_mut().zip(x).for_each(|(o, &xi)| *o += xi);
        out
    }

    fn flat_len(&self) -> usize {
        self.a.as_slice().len() + self.b.as_slice().len()
    }

    fn write_flat(&self, out: &mut Vec<T>) {
        out.clear();
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    fn read_flat(&mut self, flat: &[T]) {
        let na = self.a.as_slice().len();
        self.a.as_mut_slice().copy_from_slice(&flat[..na]);
        self.b.as_mut_slice().copy_from_slice(&flat[na..]);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.flat_len());
        out.extend_from_slice(ADP1_MAGIC);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        let f = |v: T| v.to_f32().unwrap_or(f32::NAN).to_le_bytes();
        out.extend_from_slice(&f(self.logit_scale));
        for &v in self.a.as_slice().iter().chain(self.b.as_slice()) {
            out.extend_from_slice(&f(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 16 || &bytes[..4] != ADP1_MAGIC {
            return Err(TrainError::InvalidFile("missing ADP1 header".into()));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let dim = u32::from_le_bytes(word(4)) as usize;
        let rank = u32::from_le_bytes(word(8)) as usize;
        let expected = 16 + 8 * dim * rank;
        if bytes.len() != expected {
            return Err(TrainError::InvalidFile(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let float = |i: usize| T::from(f32::from_le_bytes(word(i))).unwrap_or_else(T::nan);
        let logit_scale = float(12);
        let values: Vec<T> = (0..2 * dim * rank).map(|k| float(16 + 4 * k)).collect();
        let (a, b) = values.split_at(dim * rank);
        let params = Self {
            a: Matrix::from_vec(dim, rank, a.to_vec()),
            b: Matrix::from_vec(rank, dim, b.to_vec()),
            logit_scale,
        };
        params.check()?;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Gradient of the loss with respect to `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> AdapterGrad<T> {
    fn zeros_like(params: &AdapterParams<T>) -> Self {
        Self {
            a: Matrix::zeros(params.a.rows(), params.a.cols()),
            b: Matrix::zeros(params.b.rows(), params.b.cols()),
        }
    }

    fn flat(&self) -> Vec<T> {
        self.a.as_slice().iter().chain(self.b.as_slice()).copied().collect()
    }

    /// Accumulates the gradient through `P` at input `x` for output gradient `g`.
    fn accumulate(&mut self, params: &AdapterParams<T>, x: &[T], g: &[T]) {
        let h = params.b.matvec(x);
        let atg = params.a.tr_matvec(g);
        for (i, &gi) in g.iter().enumerate() {
            for (k, &hk) in h.iter().enumerate() {
                self.a[(i, k)] += gi * hk;
            }
        }
        for (k, &ak) in atg.iter().enumerate() {
            for (j, &xj) in x.iter().enumerate() {
                self.b[(k, j)] += ak * xj;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub logits: Vec<T>,
}

struct Forward<T> {
    images: Vec<Vec<T>>,
    text: Vec<T>,
    projected: Vec<Vec<T>>,
    projected_text: Vec<T>,
    norms: Vec<T>,
    text_norm: T,
    cosines: Vec<T>,
    probs: Vec<T>,
    out: LossOutput<T>,
}

fn forward<T: Scalar>(inst: &PreferenceInstance, sources: &EmbeddingSources<'_>, params: &AdapterParams<T>) -> Result<Forward<T>, TrainError> {
    let n = inst.image_ids.len();
    if inst.preferred_index >= n {
        return Err(TrainError::BadInstance { index: inst.preferred_index, n });
    }
    let dim = params.dim();
    let text: Vec<T> = sources.fetch(sources.texts, &inst.prompt_id, dim)?;
    let images = inst
        .image_ids
        .iter()
        .map(|id| sources.fetch(sources.images, id, dim))
        .collect::<Result<Vec<Vec<T>>, _>>()?;

    let projected_text = params.project(&text);
    let text_norm = scalar::norm(&projected_text);
    if text_norm == T::zero() {
        return Err(VectorError::ZeroVector.into());
    }
    let projected: Vec<Vec<T>> = images.iter().map(|e| params.project(e)).collect();
    let norms: Vec<T> = projected.iter().map(|z| scalar::norm(z)).collect();
    if norms.iter().any(|&nz| nz == T::zero()) {
        return Err(VectorError::ZeroVector.into());
    }
    let cosines: Vec<T> = projected
        .iter()
        .zip(&norms)
        .map(|(z, &nz)| scalar::dot(z, &projected_text) / (nz * text_norm))
        .collect();
    let logits: Vec<T> = cosines.iter().map(|&c| params.logit_scale * c).collect();

    let top = argmax(&logits).map_or(0, |c| c.index);
    let max = logits[top];
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    // log Σ exp(lᵢ − max) = log1p(Σ_{i≠top} exp(lᵢ − max)), exact for tiny tails
    let tail: T = exps.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, &e)| e).sum();
    let total = T::one() + tail;
    let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
    let loss = (tail.ln_1p() - (logits[inst.preferred_index] - max)).max(T::zero());

    Ok(Forward {
        images,
        text,
        projected,
        projected_text,
        norms,
        text_norm,
        cosines,
        probs,
        out: LossOutput { loss, logits },
    })
}

/// Loss `−log softmax(logits)[preferred]` and the logits themselves.
pub fn forward_loss<T: Scalar>(inst: &PreferenceInstance, sources: &EmbeddingSources<'_>, params: &AdapterParams<T>) -> Result<LossOutput<T>, TrainError> {
    Ok(forward(inst, sources, params)?.out)
}

fn instance_grad<T: Scalar>(inst: &PreferenceInstance, sources: &EmbeddingSources<'_>, params: &AdapterParams<T>, acc: &mut AdapterGrad<T>) -> Result<T, TrainError> {
    let f = forward(inst, sources, params)?;
    let u = &f.projected_text;
    let nu = f.text_norm;
    let mut grad_u = vec![T::zero(); u.len()];
    for (i, z) in f.projected.iter().enumerate() {
        let target = if i == inst.preferred_index { T::one() } else { T::zero() };
        let dl_dc = params.logit_scale * (f.probs[i] - target);
        let (nz, c) = (f.norms[i], f.cosines[i]);
        // ∂cos/∂z = u/(|z||u|) − c·z/|z|²,  ∂cos/∂u = z/(|z||u|) − c·u/|u|²
        let grad_z: Vec<T> = z
            .iter()
            .zip(u)
            .map(|(&zk, &uk)| dl_dc * (uk / (nz * nu) - c * zk / (nz * nz)))
            .collect();
        for ((gu, &zk), &uk) in grad_u.iter_mut().zip(z).zip(u) {
            *gu += dl_dc * (zk / (nz * nu) - c * uk / (nu * nu));
        }
        acc.accumulate(params, &f.images[i], &grad_z);
    }
    acc.accumulate(params, &f.text, &grad_u);
    Ok(f.out.loss)
}

/// Mean loss over the batch and its gradient with respect to `A` and `B`
/// (the logit scale is frozen).
pub fn grad<T: Scalar>(batch: &[PreferenceInstance], sources: &EmbeddingSources<'_>, params: &AdapterParams<T>) -> Result<(T, AdapterGrad<T>), TrainError> {
    let refs: Vec<&PreferenceInstance> = batch.iter().collect();
    grad_refs(&refs, sources, params)
}

fn grad_refs<T: Scalar>(batch: &[&PreferenceInstance], sources: &EmbeddingSources<'_>, params: &AdapterParams<T>) -> Result<(T, AdapterGrad<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = AdapterGrad::zeros_like(params);
    let mut loss = T::zero();
    for inst in batch {
        loss += instance_grad(inst, sources, params, &mut acc)?;
    }
    let inv = T::one() / T::from_count(batch.len());
    acc.a = acc.a.scale(inv);
    acc.b = acc.b.scale(inv);
    Ok((loss * inv, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub rank: usize,
    /// Fixed during training.
    pub logit_scale: f64,
    pub seed: u64,
    /// Stop after the first epoch whose validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
}

impl Default for TrainerConfig {
    /// The usual fine-tuning recipe (AdamW, 1 epoch, batch 5, weight decay 3.1e-3,
    /// cosine decay) with the learning rate raised from 1.7e-5 to 1.7e-2 for
    /// training an adapter over frozen embeddings.
    fn default() -> Self {
        Self {
            learning_rate: 1.7e-2,
            epochs: 1,
            batch_size: 5,
            weight_decay: 3.1e-3,
            rank: 32,
            logit_scale: 100.0,
            seed: 0,
            stop_at_val_accuracy: None,
        }
    }
}

impl TrainerConfig {
    fn check(&self, dim: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if self.rank == 0 || self.rank > dim {
            return bad(format!("rank {} must be in 1..={dim}", self.rank));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return bad("logit scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss before the first update.
    pub initial_train_loss: Option<f64>,
    pub initial_val_accuracy: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `step,lr,loss` rows with a header line.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:e},{:e}\n", s.step, s.learning_rate, s.train_loss));
        }
        out
    }
}

pub fn mean_loss<T: Scalar>(dataset: &Dataset, sources: &EmbeddingSources<'_>, params: &AdapterParams<T>) -> Result<T, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = T::zero();
    for inst in &dataset.instances {
        total += forward_loss(inst, sources, params)?.loss;
    }
    Ok(total / T::from_count(dataset.len()))
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train<T: Scalar>(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    sources: &EmbeddingSources<'_>,
    config: &TrainerConfig,
) -> Result<(AdapterParams<T>, TrainHistory), TrainError> {
    let dim = sources.images.dim();
    if sources.texts.dim() != dim {
        return Err(TrainError::InvalidConfig(format!("image dim {dim} differs from text dim {}", sources.texts.dim())));
    }
    config.check(dim)?;
    let mut rng = shuffle::seeded_rng(config.seed);
    let params = AdapterParams::init(dim, config.rank, T::lit(config.logit_scale), &mut rng);
    train_from(params, train_set, val_set, sources, config, &mut rng)
}

/// Continues training from `params`.
pub fn train_from<T: Scalar, R: Rng + ?Sized>(
    mut params: AdapterParams<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    sources: &EmbeddingSources<'_>,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<(AdapterParams<T>, TrainHistory), TrainError> {
    params.check()?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }
    config.check(params.dim())?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyBatch);
    }

    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule { base_lr: T::lit(config.learning_rate), total_steps: steps_per_epoch * config.epochs };
    let mut opt = AdamW::new(params.flat_len(), T::lit(config.weight_decay));
    let mut flat = Vec::with_capacity(params.flat_len());

    history.initial_train_loss = Some(mean_loss(train_set, sources, &params)?.to_f64_lossy());
    if let Some(val) = val_set.filter(|v| !v.is_empty()) {
        history.initial_val_accuracy = Some(evaluate(&params, val, sources)?);
    }

    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        shuffle::fisher_yates(&mut order, rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreferenceInstance> = chunk.iter().map(|&i| &train_set.instances[i]).collect();
            let (loss, g) = grad_refs(&batch, sources, &params)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let lr = schedule.lr(step);
            params.write_flat(&mut flat);
            opt.step(&mut flat, &g.flat(), lr);
            params.read_flat(&flat);

            let loss = loss.to_f64_lossy();
            epoch_loss += loss * batch.len() as f64;
            history.steps.push(StepRecord { step, learning_rate: lr.to_f64_lossy(), train_loss: loss });
            step += 1;
        }
        let val_accuracy = match val_set.filter(|v| !v.is_empty()) {
            Some(val) => Some(evaluate(&params, val, sources)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_train_loss: epoch_loss / train_set.len() as f64,
            val_accuracy,
        });
        if let (Some(target), Some(acc)) = (config.stop_at_val_accuracy, val_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    Ok((params, history))
}

/// Fraction of instances whose highest logit is the preferred image.
pub fn evaluate<T: Scalar>(params: &AdapterParams<T>, dataset: &Dataset, sources: &EmbeddingSources<'_>) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut hits = 0usize;
    for inst in &dataset.instances {
        let logits = forward_loss(inst, sources, params)?.logits;
        if argmax(&logits).map(|c| c.index) == Some(inst.preferred_index) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}
