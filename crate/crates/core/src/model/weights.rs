use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{BiasMode, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Tensor};

const INIT_STD: f64 = 0.02;

/// Role of a named tensor; decides whether and how it is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    /// Layer-norm γ or β; exempt from weight decay.
    Norm,
    Slope,
    /// Fixed buffer (the position table); never trained.
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Norm | ParamKind::Buffer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    /// Per-head distance slopes; present only with [`BiasMode::AlibiLearnable`].
    pub slopes: Option<Tensor<T>>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub wte: Tensor<T>,
    pub wpe: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    /// `[d_model × vocab]`; `None` when the head is tied to `wte`.
    pub lm_head: Option<Tensor<T>>,
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`.
pub fn sinusoidal_table<T: Real>(n_ctx: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::config(format!(
            "d_model must be even, got {d_model}"
        )));
    }
    if n_ctx == 0 {
        return Err(Error::config("n_ctx must be at least 1"));
    }
    let mut table = Tensor::zeros(&[n_ctx, d_model]);
    for pos in 0..n_ctx {
        let row = table.row_mut(pos);
        for i in 0..d_model / 2 {
            let angle = pos as f64 / libm::pow(10000.0, (2 * i) as f64 / d_model as f64);
            row[2 * i] = T::of(libm::sin(angle));
            row[2 * i + 1] = T::of(libm::cos(angle));
        }
    }
    Ok(table)
}

fn gaussian<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(INIT_STD * rng.gaussian()))
}

/// Slopes `2^(−8h/H)` for heads `h = 1..=H`.
pub(crate) fn geometric_slopes<T: Real>(n_heads: usize) -> Tensor<T> {
    Tensor::from_fn(&[n_heads], |i| {
        T::of(libm::pow(2.0, -8.0 * (i + 1) as f64 / n_heads as f64))
    })
}

impl<T: Real> BlockWeights<T> {
    fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: gaussian(&[d, d], rng),
            b_q: Tensor::zeros(&[d]),
            w_k: gaussian(&[d, d], rng),
            b_k: Tensor::zeros(&[d]),
            w_v: gaussian(&[d, d], rng),
            b_v: Tensor::zeros(&[d]),
            w_o: gaussian(&[d, d], rng),
            b_o: Tensor::zeros(&[d]),
            slopes: match cfg.bias_mode {
                BiasMode::None => None,
                BiasMode::AlibiLearnable => Some(geometric_slopes(cfg.n_heads)),
            },
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            w_1: gaussian(&[d, f], rng),
            b_1: Tensor::zeros(&[f]),
            w_2: gaussian(&[f, d], rng),
            b_2: Tensor::zeros(&[d]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamKind, &'a Tensor<T>)>) {
        use ParamKind::*;
        let mut push = |name: &str, kind, t| out.push((format!("{prefix}.{name}"), kind, t));
        push("ln_1.gamma", Norm, &self.ln1_gamma);
        push("ln_1.beta", Norm, &self.ln1_beta);
        push("attn.w_q", Weight, &self.w_q);
        push("attn.b_q", Bias, &self.b_q);
        push("attn.w_k", Weight, &self.w_k);
        push("attn.b_k", Bias, &self.b_k);
        push("attn.w_v", Weight, &self.w_v);
        push("attn.b_v", Bias, &self.b_v);
        push("attn.w_o", Weight, &self.w_o);
        push("attn.b_o", Bias, &self.b_o);
        if let Some(s) = &self.slopes {
            push("attn.slopes", Slope, s);
        }
        push("ln_2.gamma", Norm, &self.ln2_gamma);
        push("ln_2.beta", Norm, &self.ln2_beta);
        push("mlp.w_1", Weight, &self.w_1);
        push("mlp.b_1", Bias, &self.b_1);
        push("mlp.w_2", Weight, &self.w_2);
        push("mlp.b_2", Bias, &self.b_2);
    }

    fn named_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ParamKind, &'a mut Tensor<T>)>,
    ) {
        use ParamKind::*;
        let mut push = |name: &str, kind, t| out.push((format!("{prefix}.{name}"), kind, t));
        push("ln_1.gamma", Norm, &mut self.ln1_gamma);
        push("ln_1.beta", Norm, &mut self.ln1_beta);
        push("attn.w_q", Weight, &mut self.w_q);
        push("attn.b_q", Bias, &mut self.b_q);
        push("attn.w_k", Weight, &mut self.w_k);
        push("attn.b_k", Bias, &mut self.b_k);
        push("attn.w_v", Weight, &mut self.w_v);
        push("attn.b_v", Bias, &mut self.b_v);
        push("attn.w_o", Weight, &mut self.w_o);
        push("attn.b_o", Bias, &mut self.b_o);
        if let Some(s) = &mut self.slopes {
            push("attn.slopes", Slope, s);
        }
        push("ln_2.gamma", Norm, &mut self.ln2_gamma);
        push("ln_2.beta", Norm, &mut self.ln2_beta);
        push("mlp.w_1", Weight, &mut self.w_1);
        push("mlp.b_1", Bias, &mut self.b_1);
        push("mlp.w_2", Weight, &mut self.w_2);
        push("mlp.b_2", Bias, &mut self.b_2);
    }
}

impl<T: Real> ModelWeights<T> {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.d_model;
        let wte = gaussian(&[cfg.vocab, d], rng);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights::init(cfg, rng))
            .collect();
        Ok(Self {
            wte,
            wpe: sinusoidal_table(cfg.n_ctx, d)?,
            blocks,
            lnf_gamma: Tensor::full(&[d], T::one()),
            lnf_beta: Tensor::zeros(&[d]),
            lm_head: (!cfg.tie_lm_head).then(|| Tensor::zeros(&[d, cfg.vocab])),
        })
    }

    /// All-zero tensors with the same layout as `cfg` (used for gradients
    /// and optimizer moments).
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let z = |shape: &[usize]| Tensor::zeros(shape);
        let block = || BlockWeights {
            ln1_gamma: z(&[d]),
            ln1_beta: z(&[d]),
            w_q: z(&[d, d]),
            b_q: z(&[d]),
            w_k: z(&[d, d]),
            b_k: z(&[d]),
            w_v: z(&[d, d]),
            b_v: z(&[d]),
            w_o: z(&[d, d]),
            b_o: z(&[d]),
            slopes: match cfg.bias_mode {
                BiasMode::None => None,
                BiasMode::AlibiLearnable => Some(z(&[cfg.n_heads])),
            },
            ln2_gamma: z(&[d]),
            ln2_beta: z(&[d]),
            w_1: z(&[d, f]),
            b_1: z(&[f]),
            w_2: z(&[f, d]),
            b_2: z(&[d]),
        };
        Self {
            wte: z(&[cfg.vocab, d]),
            wpe: z(&[cfg.n_ctx, d]),
            blocks: (0..cfg.n_blocks).map(|_| block()).collect(),
            lnf_gamma: z(&[d]),
            lnf_beta: z(&[d]),
            lm_head: (!cfg.tie_lm_head).then(|| z(&[d, cfg.vocab])),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push((String::from("wte"), ParamKind::Embedding, &self.wte));
        out.push((String::from("wpe"), ParamKind::Buffer, &self.wpe));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("h.{i}"), &mut out);
        }
        out.push((String::from("ln_f.gamma"), ParamKind::Norm, &self.lnf_gamma));
        out.push((String::from("ln_f.beta"), ParamKind::Norm, &self.lnf_beta));
        if let Some(h) = &self.lm_head {
            out.push((String::from("lm_head"), ParamKind::Weight, h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        let mut out = Vec::new();
        out.push((String::from("wte"), ParamKind::Embedding, &mut self.wte));
        out.push((String::from("wpe"), ParamKind::Buffer, &mut self.wpe));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.named_mut(&format!("h.{i}"), &mut out);
        }
        out.push((
            String::from("ln_f.gamma"),
            ParamKind::Norm,
            &mut self.lnf_gamma,
        ));
        out.push((
            String::from("ln_f.beta"),
            ParamKind::Norm,
            &mut self.lnf_beta,
        ));
        if let Some(h) = &mut self.lm_head {
            out.push((String::from("lm_head"), ParamKind::Weight, h));
        }
        out
    }

    /// Rebuilds weights for `cfg` from named tensors (e.g. a checkpoint).
    pub fn from_named(cfg: &ModelConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut out = Self::zeros_like(cfg);
        {
            let mut slots = out.named_mut();
            if slots.len() != tensors.len() {
                return Err(Error::Format(format!(
                    "expected {} tensors for this configuration, found {}",
                    slots.len(),
                    tensors.len()
                )));
            }
            for (name, _, slot) in slots.iter_mut() {
                let pos = tensors
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                let (_, t) = tensors.swap_remove(pos);
                if t.shape() != slot.shape() {
                    return Err(Error::Dimension {
                        op: "load",
                        left: slot.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                **slot = t;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros_like(cfg);
        let want = expected.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, _, wt), (hn, _, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::Dimension {
                    op: "weights",
                    left: wt.shape().to_vec(),
                    right: ht.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
