//! Losses, AdamW, the epoch/batch training loop, and two-stage fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ModelWeights};
use crate::numerics::ops::{check_targets, cross_entropy_scaled, softmax_in_place};
use crate::numerics::{Real, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    Hinge,
    Mse,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::CrossEntropy, LossKind::Hinge, LossKind::Mse];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Hinge => "hinge",
            LossKind::Mse => "mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "hinge" => Ok(LossKind::Hinge),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    SentenceCompletion,
    Qa,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::SentenceCompletion => "sentence_completion",
            Stage::Qa => "qa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub mask_prompt_loss: bool,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            batch_size: 8,
            loss_kind: LossKind::CrossEntropy,
            seed: 0,
            mask_prompt_loss: false,
            stage: Stage::Qa,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::config(format!(
                "weight_decay {} not in [0, 1)",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

fn hinge_row<T: Real>(z: &[T], y: usize, scale: T, g: &mut [T]) -> T {
    let mut best = None;
    for (j, &v) in z.iter().enumerate() {
        if j != y && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    let Some((j, other)) = best else {
        return T::zero();
    };
    let margin = T::one() + other - z[y];
    if margin > T::zero() {
        g[j] = g[j] + scale;
        g[y] = g[y] - scale;
        margin
    } else {
        T::zero()
    }
}

fn mse_row<T: Real>(z: &[T], y: usize, scale: T, g: &mut [T]) -> T {
    let c = T::of_usize(z.len());
    let mut p = z.to_vec();
    softmax_in_place(&mut p);
    let mut loss = T::zero();
    // d/dp of Σ(p − e)²/C, pushed through the softmax Jacobian.
    let mut dp: Vec<T> = Vec::with_capacity(p.len());
    for (i, &pi) in p.iter().enumerate() {
        let r = if i == y { pi - T::one() } else { pi };
        loss = loss + r * r;
        dp.push((r + r) / c);
    }
    let dot = p
        .iter()
        .zip(&dp)
        .fold(T::zero(), |a, (&pi, &di)| a + pi * di);
    for ((gi, &pi), &di) in g.iter_mut().zip(&p).zip(&dp) {
        *gi = *gi + scale * pi * (di - dot);
    }
    loss / c
}

/// Sum of per-position losses over unmasked rows divided by `denom`, and
/// the matching gradient. At least one row must be unmasked.
pub(crate) fn compute_loss_scaled<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
    kind: LossKind,
    denom: T,
) -> Result<(T, Tensor<T>)> {
    let row_fn = match kind {
        LossKind::CrossEntropy => return cross_entropy_scaled(logits, labels, mask, denom),
        LossKind::Hinge => hinge_row::<T>,
        LossKind::Mse => mse_row::<T>,
    };
    check_targets(logits, labels, mask)?;
    let mut grad = Tensor::zeros(logits.shape());
    let scale = T::one() / denom;
    let mut total = T::zero();
    for (t, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            let z = logits.row(t);
            total = total + row_fn(z, y as usize, scale, grad.row_mut(t));
        }
    }
    Ok((total / denom, grad))
}

/// Mean loss over unmasked positions and its gradient.
///
/// * cross-entropy: `−log softmax(z)[y]`
/// * hinge: `max(0, 1 + max_{j≠y} z_j − z_y)`
/// * mse: `‖softmax(z) − onehot(y)‖² / C`
pub fn compute_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
    kind: LossKind,
) -> Result<(T, Tensor<T>)> {
    let count = check_targets(logits, labels, mask)?;
    compute_loss_scaled(logits, labels, mask, kind, T::of_usize(count))
}

/// Optimizer moments and loop bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// First moments, one per trainable tensor in [`ModelWeights::named`] order.
    pub m: Vec<(String, Tensor<T>)>,
    pub v: Vec<(String, Tensor<T>)>,
    pub step: u64,
    /// Base stream; shuffles and dropout draw from forks keyed by epoch and step.
    pub rng: RngStream,
    /// Mean batch loss of each completed epoch.
    pub history: Vec<f64>,
    pub stage: Stage,
}

impl<T: Real> TrainState<T> {
    pub fn new(weights: &ModelWeights<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<(String, Tensor<T>)> = weights
            .named()
            .into_iter()
            .filter(|(_, kind, _)| kind.is_trainable())
            .map(|(name, _, t)| (name, Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            rng: RngStream::new(config.seed),
            history: Vec::new(),
            stage: config.stage,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

/// One decoupled-decay AdamW update of every trainable tensor.
///
/// Decayed tensors use `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`; norm
/// parameters skip the decay factor.
pub fn adamw_step<T: Real>(
    weights: &mut ModelWeights<T>,
    grads: &Gradients<T>,
    state: &mut TrainState<T>,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let bc1 = T::of(1.0 - libm::pow(config.beta1, t));
    let bc2 = T::of(1.0 - libm::pow(config.beta2, t));
    let lr = T::of(config.lr);
    let eps = T::of(config.eps);
    let decay = T::one() - lr * T::of(config.weight_decay);
    let grads = grads.named();
    let mut slot = 0;
    for ((name, kind, theta), (_, _, g)) in weights.named_mut().into_iter().zip(grads) {
        if !kind.is_trainable() {
            continue;
        }
        let (Some((mn, m)), Some((_, v))) = (state.m.get_mut(slot), state.v.get_mut(slot)) else {
            return Err(Error::precondition(format!(
                "no optimizer moment for {name}"
            )));
        };
        slot += 1;
        if *mn != name
            || m.shape() != theta.shape()
            || g.shape() != theta.shape()
            || v.shape() != theta.shape()
        {
            return Err(Error::Dimension {
                op: "adamw_step",
                left: theta.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let factor = if kind.decays() { decay } else { T::one() };
        let it = theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p * factor - lr * (m_hat / (v_hat.sqrt() + eps));
        }
    }
    if slot != state.m.len() {
        return Err(Error::precondition("optimizer state has extra moments"));
    }
    Ok(())
}

const SHUFFLE_STREAM: u64 = 1 << 62;

/// Epoch-`epoch` visiting order (zero-based epoch index).
pub fn epoch_order(rng: &RngStream, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.fork(SHUFFLE_STREAM | epoch as u64).shuffle(&mut order);
    order
}

/// Loss and gradients for one batch; the loss is the mean over every
/// unmasked position in the batch. `None` when nothing in the batch is
/// unmasked.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[&EncodedExample],
    kind: LossKind,
    rng: &mut RngStream,
) -> Result<Option<(T, Gradients<T>)>> {
    let count: usize = batch.iter().map(|e| e.target_count()).sum();
    if count == 0 {
        return Ok(None);
    }
    let denom = T::of_usize(count);
    let mut grads = ModelWeights::zeros_like(&model.config);
    let mut loss = T::zero();
    for ex in batch {
        if ex.target_count() == 0 {
            continue;
        }
        let (logits, cache) = model.forward_with_cache(&ex.input_ids, true, rng)?;
        let (l, dlogits) = compute_loss_scaled(&logits, &ex.label_ids, &ex.loss_mask, kind, denom)?;
        model.backward_from_logits(&cache, &dlogits, &mut grads)?;
        loss = loss + l;
    }
    Ok(Some((loss, grads)))
}

/// Runs epochs `state.epochs_done() .. config.epochs`: per epoch a seeded
/// shuffle, then forward, loss, backward and one AdamW step per batch of
/// `batch_size` (the last batch may be short).
///
/// Passing the state of an interrupted run resumes it exactly.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &[EncodedExample],
    config: &TrainConfig,
    state: Option<TrainState<T>>,
) -> Result<TrainState<T>> {
    train_with(model, data, config, state, |_, _| Ok(()))
}

/// [`train`] with a callback after each epoch.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    data: &[EncodedExample],
    config: &TrainConfig,
    state: Option<TrainState<T>>,
    mut on_epoch: impl FnMut(&Model<T>, &TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(&model.weights, config));
    state.stage = config.stage;
    for epoch in state.epochs_done()..config.epochs {
        let order = epoch_order(&state.rng, epoch, data.len());
        let mut losses = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut drop_rng = state.rng.fork(state.step);
            let Some((loss, grads)) =
                batch_gradients(model, &batch, config.loss_kind, &mut drop_rng)?
            else {
                continue;
            };
            adamw_step(&mut model.weights, &grads, &mut state, config)?;
            losses += loss.as_f64();
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::data("no example has a position in the loss"));
        }
        state.history.push(losses / batches as f64);
        on_epoch(model, &state)?;
    }
    Ok(state)
}

/// States of the two fine-tuning stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialOutcome<T> {
    pub sentence_completion: Option<TrainState<T>>,
    pub qa: TrainState<T>,
}

/// Sentence completion first, then QA on the same weights with fresh
/// optimizer moments. The stage fields of the configs are overridden.
/// `on_stage` runs after each finished stage, e.g. to write a checkpoint.
pub fn finetune_sequential<T: Real>(
    model: &mut Model<T>,
    sc: &[EncodedExample],
    qa: &[EncodedExample],
    sc_config: &TrainConfig,
    qa_config: &TrainConfig,
    skip_sentence_completion: bool,
    mut on_stage: impl FnMut(&Model<T>, &TrainState<T>) -> Result<()>,
) -> Result<SequentialOutcome<T>> {
    if qa.is_empty() || (!skip_sentence_completion && sc.is_empty()) {
        return Err(Error::data("both fine-tuning corpora must be nonempty"));
    }
    let sentence_completion = if skip_sentence_completion {
        None
    } else {
        let cfg = TrainConfig {
            stage: Stage::SentenceCompletion,
            ..sc_config.clone()
        };
        let state = train(model, sc, &cfg, None)?;
        on_stage(model, &state)?;
        Some(state)
    };
    let cfg = TrainConfig {
        stage: Stage::Qa,
        ..qa_config.clone()
    };
    let state = train(model, qa, &cfg, None)?;
    on_stage(model, &state)?;
    Ok(SequentialOutcome {
        sentence_completion,
        qa: state,
    })
}
