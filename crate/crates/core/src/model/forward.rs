use alloc::vec::Vec;

use super::{BlockWeights, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    add_row_bias, gelu, layer_norm_forward, matmul, matmul_nt, softmax_rows, DropoutMask,
    LayerNormStats, Real, RngStream, Tensor, LAYER_NORM_EPS,
};

/// Activations kept from the forward pass of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub x_in: Tensor<T>,
    pub ln1_out: Tensor<T>,
    pub ln1_stats: LayerNormStats<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Per-head attention probabilities `[T × T]`.
    pub probs: Vec<Tensor<T>>,
    pub attn: Tensor<T>,
    pub drop_attn: DropoutMask<T>,
    pub x_mid: Tensor<T>,
    pub ln2_out: Tensor<T>,
    pub ln2_stats: LayerNormStats<T>,
    pub h_pre: Tensor<T>,
    pub h_act: Tensor<T>,
    pub drop_mlp: DropoutMask<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) tokens: Vec<u32>,
    pub(crate) drop_embed: DropoutMask<T>,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) x_final: Tensor<T>,
    pub(crate) lnf_stats: LayerNormStats<T>,
    pub(crate) lnf_out: Tensor<T>,
}

fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    add_row_bias(&mut y, b)?;
    Ok(y)
}

/// Copies columns `[start, start + width)` of `x` into a new matrix.
pub(crate) fn take_cols<T: Real>(x: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[start..start + width]);
    }
    out
}

pub(crate) fn put_cols<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, start: usize) {
    let width = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + width].copy_from_slice(src.row(r));
    }
}

pub(crate) fn head_scale<T: Real>(d_head: usize) -> T {
    T::of_usize(d_head).sqrt()
}

/// Causal multi-head attention on already-normalized input. Returns the
/// concatenated head outputs plus q, k, v and per-head probabilities.
#[allow(clippy::type_complexity)]
fn attend<T: Real>(
    cfg: &ModelConfig,
    block: &BlockWeights<T>,
    h: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Vec<Tensor<T>>)> {
    let t = h.rows();
    let dh = cfg.d_head;
    let q = linear(h, &block.w_q, &block.b_q)?;
    let k = linear(h, &block.w_k, &block.b_k)?;
    let v = linear(h, &block.w_v, &block.b_v)?;
    let sqrt_d = head_scale::<T>(dh);
    let mut attn = Tensor::zeros(&[t, cfg.d_model]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = take_cols(&q, head * dh, dh);
        let kh = take_cols(&k, head * dh, dh);
        let vh = take_cols(&v, head * dh, dh);
        let mut scores = matmul_nt(&qh, &kh)?;
        let slope = block.slopes.as_ref().map(|s| s.data()[head]);
        for i in 0..t {
            let row = scores.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                if j > i {
                    *s = T::neg_infinity();
                } else {
                    *s = *s / sqrt_d;
                    if let Some(m) = slope {
                        *s = *s + -(m * T::of_usize(i - j));
                    }
                }
            }
        }
        let p = softmax_rows(&scores);
        put_cols(&mut attn, &matmul(&p, &vh)?, head * dh);
        probs.push(p);
    }
    Ok((attn, q, k, v, probs))
}

fn block_forward<T: Real>(
    cfg: &ModelConfig,
    block: &BlockWeights<T>,
    x: Tensor<T>,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let eps = T::of(LAYER_NORM_EPS);
    let (ln1_out, ln1_stats) = layer_norm_forward(&x, &block.ln1_gamma, &block.ln1_beta, eps)?;
    let (attn, q, k, v, probs) = attend(cfg, block, &ln1_out)?;
    let mut proj = linear(&attn, &block.w_o, &block.b_o)?;
    let drop_attn = DropoutMask::sample(proj.len(), cfg.dropout_p, training, rng)?;
    drop_attn.apply(&mut proj);
    let x_mid = x.add(&proj)?;

    let (ln2_out, ln2_stats) = layer_norm_forward(&x_mid, &block.ln2_gamma, &block.ln2_beta, eps)?;
    let h_pre = linear(&ln2_out, &block.w_1, &block.b_1)?;
    let h_act = gelu(&h_pre);
    let mut mlp = linear(&h_act, &block.w_2, &block.b_2)?;
    let drop_mlp = DropoutMask::sample(mlp.len(), cfg.dropout_p, training, rng)?;
    drop_mlp.apply(&mut mlp);
    let out = x_mid.add(&mlp)?;

    Ok((
        out,
        BlockCache {
            x_in: x,
            ln1_out,
            ln1_stats,
            q,
            k,
            v,
            probs,
            attn,
            drop_attn,
            x_mid,
            ln2_out,
            ln2_stats,
            h_pre,
            h_act,
            drop_mlp,
        },
    ))
}

/// Pre-norm attention sub-block: `x + dropout(W_o · Attn(ln_1(x)) + b_o)`.
pub fn attention_block<T: Real>(
    cfg: &ModelConfig,
    block: &BlockWeights<T>,
    x: &Tensor<T>,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let (t, d) = x.matrix_dims("attention_block")?;
    if d != cfg.d_model {
        return Err(Error::Dimension {
            op: "attention_block",
            left: x.shape().to_vec(),
            right: alloc::vec![t, cfg.d_model],
        });
    }
    if t > cfg.n_ctx {
        return Err(Error::ContextLength {
            requested: t,
            limit: cfg.n_ctx,
        });
    }
    let eps = T::of(LAYER_NORM_EPS);
    let (h, _) = layer_norm_forward(x, &block.ln1_gamma, &block.ln1_beta, eps)?;
    let (attn, ..) = attend(cfg, block, &h)?;
    let mut proj = linear(&attn, &block.w_o, &block.b_o)?;
    DropoutMask::sample(proj.len(), cfg.dropout_p, training, rng)?.apply(&mut proj);
    x.add(&proj)
}

impl<T: Real> Model<T> {
    /// Logits `[T × vocab]` for a token sequence.
    pub fn forward(
        &self,
        tokens: &[u32],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<T>> {
        self.forward_with_cache(tokens, training, rng)
            .map(|(logits, _)| logits)
    }

    pub fn forward_with_cache(
        &self,
        tokens: &[u32],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cache = self.hidden_states(tokens, training, rng)?;
        let logits = self.lm_head(&cache.lnf_out)?;
        Ok((logits, cache))
    }

    /// Logits for the last position only; bitwise equal to the last row of
    /// [`Model::forward`].
    pub fn last_logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let cache = self.hidden_states(tokens, false, &mut RngStream::new(0))?;
        let last = take_rows(&cache.lnf_out, tokens.len() - 1, 1);
        self.lm_head(&last)
    }

    fn lm_head(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.weights.lm_head {
            Some(w) => matmul(h, w),
            None => matmul_nt(h, &self.weights.wte),
        }
    }

    fn hidden_states(
        &self,
        tokens: &[u32],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (t, &id) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, &e), &p) in row.iter_mut().zip(w.wte.row(id as usize)).zip(w.wpe.row(t)) {
                *o = e + p;
            }
        }
        let drop_embed = DropoutMask::sample(x.len(), cfg.dropout_p, training, rng)?;
        drop_embed.apply(&mut x);

        let mut blocks = Vec::with_capacity(w.blocks.len());
        for block in &w.blocks {
            let (next, cache) = block_forward(cfg, block, x, training, rng)?;
            blocks.push(cache);
            x = next;
        }
        let (lnf_out, lnf_stats) =
            layer_norm_forward(&x, &w.lnf_gamma, &w.lnf_beta, T::of(LAYER_NORM_EPS))?;
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            drop_embed,
            blocks,
            x_final: x,
            lnf_stats,
            lnf_out,
        })
    }
}

fn take_rows<T: Real>(x: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let c = x.cols();
    Tensor::new(
        &[count, c],
        x.data()[start * c..(start + count) * c].to_vec(),
    )
    .expect("row slice is well-formed")
}
