use std::sync::Arc;

use super::params::{Bound, Init, ParamId, ParamStore};
use super::window::WindowStack;
use crate::autodiff::Var;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row of the `(2m-1)^2` relative-offset table used by each (query, key)
/// token pair of an `m x m` window, flattened query-major.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            idx.push((yi + m - 1 - yj) * side + (xi + m - 1 - xj));
        }
    }
    idx
}

/// Projections of one window multi-head self-attention instance.
///
/// The logit scale is `1/alpha` with `alpha = exp(log_alpha)`, initialised to
/// `sqrt(head_dim)`.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub rel_bias: ParamId,
    pub log_alpha: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    rel_index: Arc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(HitError::Config(format!(
                "{channels} channels are not divisible into {heads} heads"
            )));
        }
        let c = channels;
        let side = 2 * window - 1;
        let head_dim = (c / heads) as f64;
        Ok(Self {
            wq: store.add(format!("{name}.wq"), init.trunc_normal(&[c, c], 0.02)),
            wk: store.add(format!("{name}.wk"), init.trunc_normal(&[c, c], 0.02)),
            wv: store.add(format!("{name}.wv"), init.trunc_normal(&[c, c], 0.02)),
            wo: store.add(format!("{name}.wo"), init.trunc_normal(&[c, c], 0.02)),
            bo: store.add(format!("{name}.bo"), Tensor::zeros(&[c])),
            rel_bias: store.add(
                format!("{name}.rel_bias"),
                init.trunc_normal(&[side * side, heads], 0.02),
            ),
            log_alpha: store.add(
                format!("{name}.log_alpha"),
                Tensor::scalar(T::c(head_dim.sqrt().ln())),
            ),
            channels,
            heads,
            window,
            rel_index: Arc::new(relative_position_index(window)),
        })
    }
}

/// W-MSA over a window stack: per-window scaled dot-product attention with
/// relative position bias, heads concatenated and output-projected.
pub fn wmsa<'t, T: Scalar>(
    b: &Bound<'t, T>,
    x: &WindowStack<Var<'t, T>>,
    attn: &WindowAttention,
) -> Result<WindowStack<Var<'t, T>>> {
    Ok(wmsa_with_weights(b, x, attn)?.0)
}

/// [`wmsa`] plus the attention probabilities, shaped `[windows*heads, N, N]`.
pub fn wmsa_with_weights<'t, T: Scalar>(
    b: &Bound<'t, T>,
    x: &WindowStack<Var<'t, T>>,
    attn: &WindowAttention,
) -> Result<(WindowStack<Var<'t, T>>, Var<'t, T>)> {
    let (nw, n, c) = match x.windows.shape() {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(HitError::Contract(format!(
                "window stack must be rank 3, got {s:?}"
            )))
        }
    };
    if c != attn.channels || n != attn.window * attn.window {
        return Err(HitError::Config(format!(
            "attention built for {} channels and window {}, got windows {:?}",
            attn.channels,
            attn.window,
            x.windows.shape()
        )));
    }
    let (h, d) = (attn.heads, c / attn.heads);
    let tokens = x.windows.reshape(&[nw * n, c])?;
    let heads = |w: ParamId, axes: &[usize], shape: &[usize]| -> Result<Var<'t, T>> {
        tokens
            .matmul(b.p(w))?
            .reshape(&[nw, n, h, d])?
            .permute(axes)?
            .reshape(shape)
    };
    let q = heads(attn.wq, &[0, 2, 1, 3], &[nw * h, n, d])?;
    let kt = heads(attn.wk, &[0, 2, 3, 1], &[nw * h, d, n])?;
    let v = heads(attn.wv, &[0, 2, 1, 3], &[nw * h, n, d])?;

    let inv_alpha = b.p(attn.log_alpha).scale(-T::one()).exp();
    let bias = b
        .p(attn.rel_bias)
        .index_rows(attn.rel_index.clone())?
        .reshape(&[n, n, h])?
        .permute(&[2, 0, 1])?;
    let logits = q
        .bmm(&kt)?
        .mul_scalar(&inv_alpha)?
        .reshape(&[nw, h, n, n])?
        .add_bcast(&bias)?
        .reshape(&[nw * h, n, n])?;
    let probs = logits.softmax_last()?;
    let out = probs
        .bmm(&v)?
        .reshape(&[nw, h, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * n, c])?
        .matmul(b.p(attn.wo))?
        .add_bcast(b.p(attn.bo))?
        .reshape(&[nw, n, c])?;
    Ok((
        WindowStack {
            windows: out,
            source_h: x.source_h,
            source_w: x.source_w,
            m: x.m,
        },
        probs,
    ))
}
