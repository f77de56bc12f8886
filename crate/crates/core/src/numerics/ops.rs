use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Real, RngStream, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dim_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(dim_err("matmul", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, n]);
    let cd = out.data_mut();
    for i in 0..m {
        let crow = &mut cd[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    }
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(dim_err("matmul_nt", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, n]);
    let cd = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            cd[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.matrix_dims("matmul_tn")?;
    let (k2, n) = b.matrix_dims("matmul_tn")?;
    if k != k2 {
        return Err(dim_err("matmul_tn", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, n]);
    let cd = out.data_mut();
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in ad[p * m..(p + 1) * m].iter().enumerate() {
            let crow = &mut cd[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a·b`: `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Adds a bias vector to every last-axis row.
pub fn add_row_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if bias.len() != x.cols() {
        return Err(dim_err("add_row_bias", x, bias));
    }
    let c = x.cols();
    for row in x.data_mut().chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(())
}

/// Column sums; the gradient of a broadcast row bias.
pub fn sum_rows<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let c = dy.cols();
    let mut out = Tensor::zeros(&[c]);
    for row in dy.data().chunks(c) {
        for (o, &g) in out.data_mut().iter_mut().zip(row) {
            *o = *o + g;
        }
    }
    out
}

/// Row-wise softmax over the last axis with max subtraction.
///
/// Entries may be `-inf` (masked) as long as every row keeps one finite
/// entry; masked entries come out as exact zeros.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = Real::exp(*v - max);
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Given `y = softmax_rows(x)` and `dy`, returns `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(dim_err("softmax_rows_backward", y, dy));
    }
    let c = y.cols();
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
        let dot = drow
            .iter()
            .zip(yrow)
            .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
        for (g, &p) in drow.iter_mut().zip(yrow) {
            *g = p * (*g - dot);
        }
    }
    Ok(dx)
}

/// Per-row statistics saved by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

/// `(x − μ)/sqrt(var + eps) · γ + β` per last-axis row (biased variance).
pub fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let n = x.cols();
    if gamma.len() != n {
        return Err(dim_err("layer_norm", x, gamma));
    }
    if beta.len() != n {
        return Err(dim_err("layer_norm", x, beta));
    }
    if n < 2 {
        return Err(Error::precondition("layer_norm needs rows of length >= 2"));
    }
    let inv_n = T::one() / T::of_usize(n);
    let mut y = x.clone();
    let mut stats = LayerNormStats {
        mean: Vec::with_capacity(x.rows()),
        rstd: Vec::with_capacity(x.rows()),
    };
    for row in y.data_mut().chunks_mut(n) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((y, stats))
}

/// Returns `(dx, dγ, dβ)`.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &LayerNormStats<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.shape() != dy.shape() {
        return Err(dim_err("layer_norm_backward", x, dy));
    }
    let n = x.cols();
    let inv_n = T::one() / T::of_usize(n);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[n]);
    let mut dbeta = Tensor::zeros(&[n]);
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for r in 0..x.rows() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let (xr, dyr) = (x.row(r), dy.row(r));
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..n {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma.data()[j];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
            dgamma.data_mut()[j] = dgamma.data()[j] + dyr[j] * xhat[j];
            dbeta.data_mut()[j] = dbeta.data()[j] + dyr[j];
        }
        let (mean_d, mean_dx) = (sum_d * inv_n, sum_dx * inv_n);
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::of(libm::sqrt(2.0 / core::f64::consts::PI)),
        T::of(0.044715),
    )
}

/// Tanh-approximation GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    x.map(|v| half * v * (T::one() + Real::tanh(c * (v + a * v * v * v))))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(dim_err("gelu_backward", x, dy));
    }
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let three = T::of(3.0);
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let t = Real::tanh(c * (v + a * v * v * v));
        let d = half * (T::one() + t)
            + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
        *g = *g * d;
    }
    Ok(dx)
}

/// Inverted-dropout multipliers: each entry is `0` with probability `p`,
/// otherwise `1/(1−p)`. `None` means identity (eval mode or `p = 0`).
#[derive(Debug, Clone)]
pub struct DropoutMask<T>(pub Option<Vec<T>>);

impl<T: Real> DropoutMask<T> {
    pub fn sample(len: usize, p: f64, training: bool, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(Self(None));
        }
        let keep = T::of(1.0 / (1.0 - p));
        Ok(Self(Some(
            (0..len)
                .map(|_| if rng.next_f64() < p { T::zero() } else { keep })
                .collect(),
        )))
    }

    pub fn apply(&self, x: &mut Tensor<T>) {
        if let Some(m) = &self.0 {
            for (v, &k) in x.data_mut().iter_mut().zip(m) {
                *v = *v * k;
            }
        }
    }
}

pub fn dropout<T: Real>(
    x: &Tensor<T>,
    p: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let mask = DropoutMask::sample(x.len(), p, training, rng)?;
    let mut y = x.clone();
    mask.apply(&mut y);
    Ok(y)
}

pub(crate) fn check_targets<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
) -> Result<usize> {
    let (t, c) = logits.matrix_dims("loss")?;
    if labels.len() != t || mask.len() != t {
        return Err(Error::Dimension {
            op: "loss",
            left: logits.shape().to_vec(),
            right: vec![labels.len(), mask.len()],
        });
    }
    for (pos, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m && y as usize >= c {
            return Err(Error::DataAt {
                position: pos,
                message: format!("label {y} outside [0, {c})"),
            });
        }
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::precondition(
            "every position is masked out of the loss",
        ));
    }
    Ok(count)
}

/// Sum of per-position cross-entropy divided by `denom`, and its gradient.
pub(crate) fn cross_entropy_scaled<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
    denom: T,
) -> Result<(T, Tensor<T>)> {
    check_targets(logits, labels, mask)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (t, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let z = logits.row(t);
        let (arg, max) = z
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
        // ln Σ exp(z − max) = ln(1 + rest), kept accurate for tiny `rest`.
        let rest = z
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .fold(T::zero(), |a, (_, &v)| a + Real::exp(v - max));
        let lse_shift = Real::ln_1p(rest);
        total = total + (max - z[y as usize]) + lse_shift;
        let norm = T::one() + rest;
        let g = grad.row_mut(t);
        for (gi, &v) in g.iter_mut().zip(z) {
            *gi = Real::exp(v - max) / norm / denom;
        }
        g[y as usize] = g[y as usize] - T::one() / denom;
    }
    Ok((total / denom, grad))
}

/// Mean over unmasked positions of `−log softmax(logits)[label]`, with the
/// gradient `(softmax − onehot)/count` at unmasked rows and zero elsewhere.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let count = check_targets(logits, labels, mask)?;
    cross_entropy_scaled(logits, labels, mask, T::of_usize(count))
}
