use super::forward::{head_scale, put_cols, take_cols, BlockCache, ForwardCache};
use super::{BlockWeights, Model, ModelWeights};
use crate::error::Result;
use crate::numerics::{
    cross_entropy, gelu_backward, layer_norm_backward, matmul, matmul_nt, matmul_tn,
    softmax_rows_backward, sum_rows, Real, RngStream, Tensor,
};

/// Gradients share the weight layout; the position-table slot stays zero.
pub type Gradients<T> = ModelWeights<T>;

fn accumulate<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) -> Result<()> {
    dst.add_assign(src)
}

/// Backward through `y = x·W + b`; returns `dx`.
fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    accumulate(dw, &matmul_tn(x, dy)?)?;
    accumulate(db, &sum_rows(dy))?;
    matmul_nt(dy, w)
}

fn block_backward<T: Real>(
    model: &Model<T>,
    block: &BlockWeights<T>,
    cache: &BlockCache<T>,
    grad: &mut BlockWeights<T>,
    dout: Tensor<T>,
) -> Result<Tensor<T>> {
    let cfg = &model.config;
    let dh = cfg.d_head;
    let t = dout.rows();

    // x_out = x_mid + dropout(mlp(ln_2(x_mid)))
    let mut d_mlp = dout.clone();
    cache.drop_mlp.apply(&mut d_mlp);
    let d_act = linear_backward(
        &cache.h_act,
        &block.w_2,
        &d_mlp,
        &mut grad.w_2,
        &mut grad.b_2,
    )?;
    let d_pre = gelu_backward(&cache.h_pre, &d_act)?;
    let d_ln2 = linear_backward(
        &cache.ln2_out,
        &block.w_1,
        &d_pre,
        &mut grad.w_1,
        &mut grad.b_1,
    )?;
    let (dx_ln2, dg2, db2) =
        layer_norm_backward(&cache.x_mid, &block.ln2_gamma, &cache.ln2_stats, &d_ln2)?;
    accumulate(&mut grad.ln2_gamma, &dg2)?;
    accumulate(&mut grad.ln2_beta, &db2)?;
    let mut d_mid = dout;
    d_mid.add_assign(&dx_ln2)?;

    // x_mid = x_in + dropout(W_o · attn + b_o)
    let mut d_proj = d_mid.clone();
    cache.drop_attn.apply(&mut d_proj);
    let d_attn = linear_backward(
        &cache.attn,
        &block.w_o,
        &d_proj,
        &mut grad.w_o,
        &mut grad.b_o,
    )?;

    let sqrt_d = head_scale::<T>(dh);
    let mut dq = Tensor::zeros(&[t, cfg.d_model]);
    let mut dk = Tensor::zeros(&[t, cfg.d_model]);
    let mut dv = Tensor::zeros(&[t, cfg.d_model]);
    for head in 0..cfg.n_heads {
        let p = &cache.probs[head];
        let qh = take_cols(&cache.q, head * dh, dh);
        let kh = take_cols(&cache.k, head * dh, dh);
        let vh = take_cols(&cache.v, head * dh, dh);
        let d_out = take_cols(&d_attn, head * dh, dh);
        let dp = matmul_nt(&d_out, &vh)?;
        put_cols(&mut dv, &matmul_tn(p, &d_out)?, head * dh);
        // masked entries have p = 0 and therefore zero score gradient
        let mut ds = softmax_rows_backward(p, &dp)?;
        if let Some(slopes) = &mut grad.slopes {
            let mut acc = T::zero();
            for i in 0..t {
                for (j, &g) in ds.row(i)[..=i].iter().enumerate() {
                    acc = acc - g * T::of_usize(i - j);
                }
            }
            slopes.data_mut()[head] = slopes.data()[head] + acc;
        }
        for g in ds.data_mut() {
            *g = *g / sqrt_d;
        }
        put_cols(&mut dq, &matmul(&ds, &kh)?, head * dh);
        put_cols(&mut dk, &matmul_tn(&ds, &qh)?, head * dh);
    }

    let mut d_ln1 = linear_backward(
        &cache.ln1_out,
        &block.w_q,
        &dq,
        &mut grad.w_q,
        &mut grad.b_q,
    )?;
    d_ln1.add_assign(&linear_backward(
        &cache.ln1_out,
        &block.w_k,
        &dk,
        &mut grad.w_k,
        &mut grad.b_k,
    )?)?;
    d_ln1.add_assign(&linear_backward(
        &cache.ln1_out,
        &block.w_v,
        &dv,
        &mut grad.w_v,
        &mut grad.b_v,
    )?)?;
    let (dx_ln1, dg1, db1) =
        layer_norm_backward(&cache.x_in, &block.ln1_gamma, &cache.ln1_stats, &d_ln1)?;
    accumulate(&mut grad.ln1_gamma, &dg1)?;
    accumulate(&mut grad.ln1_beta, &db1)?;
    d_mid.add_assign(&dx_ln1)?;
    Ok(d_mid)
}

impl<T: Real> Model<T> {
    /// Adds the gradients implied by `dlogits` into `grads`.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let w = &self.weights;
        let mut dx = match (&w.lm_head, &mut grads.lm_head) {
            (Some(head), Some(g_head)) => {
                accumulate(g_head, &matmul_tn(&cache.lnf_out, dlogits)?)?;
                matmul_nt(dlogits, head)?
            }
            _ => {
                accumulate(&mut grads.wte, &matmul_tn(dlogits, &cache.lnf_out)?)?;
                matmul(dlogits, &w.wte)?
            }
        };
        let (d_final, dg, db) =
            layer_norm_backward(&cache.x_final, &w.lnf_gamma, &cache.lnf_stats, &dx)?;
        accumulate(&mut grads.lnf_gamma, &dg)?;
        accumulate(&mut grads.lnf_beta, &db)?;
        dx = d_final;

        for ((block, bc), bg) in w
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            dx = block_backward(self, block, bc, bg, dx)?;
        }

        cache.drop_embed.apply(&mut dx);
        for (t, &id) in cache.tokens.iter().enumerate() {
            let row = grads.wte.row_mut(id as usize);
            for (g, &d) in row.iter_mut().zip(dx.row(t)) {
                *g = *g + d;
            }
        }
        Ok(())
    }

    /// Mean cross-entropy over unmasked positions and the gradient of every
    /// trainable tensor, computed in eval mode (no dropout).
    pub fn backward(
        &self,
        tokens: &[u32],
        labels: &[u32],
        mask: &[bool],
    ) -> Result<(T, Gradients<T>)> {
        let (logits, cache) = self.forward_with_cache(tokens, false, &mut RngStream::new(0))?;
        let (loss, dlogits) = cross_entropy(&logits, labels, mask)?;
        let mut grads = ModelWeights::zeros_like(&self.config);
        self.backward_from_logits(&cache, &dlogits, &mut grads)?;
        Ok((loss, grads))
    }
}
