use rayon::prelude::*;

use super::Tensor;
use crate::error::{dim_err, HitError, Result};
use crate::scalar::Scalar;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[i,j] = sum_t a[i,t] * b[t,j]`, accumulated in ascending `t` from zero.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => return dim_err("matmul", a.shape(), b.shape()),
    };
    let mut out = vec![T::zero(); m * n];
    gemm_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::with_shape(out, &[m, n]))
}

fn gemm_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (t, &av) in ar.iter().enumerate() {
            let br = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Batched matmul over a shared leading axis: `[B,m,k] x [B,k,n] -> [B,m,n]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n) = match (a.shape(), b.shape()) {
        ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
        _ => return dim_err("bmm", a.shape(), b.shape()),
    };
    let mut out = vec![T::zero(); bs * m * n];
    let body = |(bi, o): (usize, &mut [T])| {
        gemm_serial(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            o,
            m,
            k,
            n,
        )
    };
    if bs * m * k * n >= PAR_THRESHOLD && bs > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(body);
    }
    Ok(Tensor::with_shape(out, &[bs, m, n]))
}

fn gemm_serial<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            for (cv, &bv) in c.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// General axis permutation: `out.shape[i] = x.shape[axes[i]]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return dim_err("permute", x.shape(), axes);
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let src = x.data();
    // The innermost output axis is walked in a tight loop.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    for _ in 0..n / inner {
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::with_shape(out, &out_shape))
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return dim_err("transpose2d", x.shape(), &[2]);
    }
    permute(x, &[1, 0])
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(HitError::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(HitError::Numeric("softmax input contains NaN".into()));
    }
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mx = (0..n).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
            let mut sum = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Ok(Tensor::with_shape(out, x.shape()))
}

/// Backward of softmax along the last axis given its output `y`.
pub fn softmax_last_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let mut gx = vec![T::zero(); y.numel()];
    for ((gxr, yr), gr) in gx
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(gy.data().chunks(n))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            gxr[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::with_shape(gx, y.shape())
}

/// Saved statistics of a layer norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalization over the last (channel) axis: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err("layer_norm", x.shape(), gamma.shape());
    }
    let cf = T::c(c as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / c);
    for ((xr, hr), or) in x
        .data()
        .chunks(c)
        .zip(xhat.chunks_mut(c))
        .zip(out.chunks_mut(c))
    {
        let mean = xr.iter().copied().sum::<T>() / cf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..c {
            hr[j] = (xr[j] - mean) * rstd;
            or[j] = gamma.data()[j] * hr[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::with_shape(out, x.shape()),
        LayerNormCache {
            normalized: Tensor::with_shape(xhat, x.shape()),
            inv_std,
        },
    ))
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let cf = T::c(c as f64);
    let mut gx = vec![T::zero(); gy.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let rows = cache
        .normalized
        .data()
        .chunks(c)
        .zip(gy.data().chunks(c))
        .zip(gx.chunks_mut(c))
        .zip(&cache.inv_std);
    for (((hr, gr), gxr), &rstd) in rows {
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for j in 0..c {
            let d = gr[j] * gamma.data()[j];
            sum_d += d;
            sum_dh += d * hr[j];
            gg[j] += gr[j] * hr[j];
            gb[j] += gr[j];
        }
        for j in 0..c {
            let d = gr[j] * gamma.data()[j];
            gxr[j] = rstd / cf * (cf * d - sum_d - hr[j] * sum_dh);
        }
    }
    (
        Tensor::with_shape(gx, gy.shape()),
        Tensor::with_shape(gg, &[c]),
        Tensor::with_shape(gb, &[c]),
    )
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// `a + b` where `b`'s shape is a suffix of `a`'s; `b` repeats over the leading axes.
pub fn add_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if rb > ra || a.shape()[ra - rb..] != *b.shape() {
        return dim_err("add_broadcast", a.shape(), b.shape());
    }
    let n = b.numel();
    let mut out = a.data().to_vec();
    for chunk in out.chunks_mut(n) {
        for (o, &bv) in chunk.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(Tensor::with_shape(out, a.shape()))
}

/// Sum of `g` over the leading axes down to `shape`; the adjoint of [`add_broadcast`].
pub fn reduce_leading<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::with_shape(out, shape)
}

/// Concatenation along the last axis; all leading extents must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| HitError::Contract("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return dim_err("concat_last", first.shape(), p.shape());
        }
        widths.push(*p.shape().last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::with_shape(out, &shape))
}

/// Slice `[start, start+len)` of the last axis.
pub fn narrow_last<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap();
    if len == 0 || start + len > c {
        return dim_err("narrow_last", x.shape(), &[start, len]);
    }
    let out: Vec<T> = x
        .data()
        .chunks(c)
        .flat_map(|r| r[start..start + len].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::with_shape(out, &shape))
}

/// Adjoint of [`narrow_last`]: embeds `g` into zeros of width `c`.
pub fn unnarrow_last<T: Scalar>(g: &Tensor<T>, start: usize, c: usize) -> Tensor<T> {
    let len = *g.shape().last().unwrap();
    let rows = g.numel() / len;
    let mut out = vec![T::zero(); rows * c];
    for (o, r) in out.chunks_mut(c).zip(g.data().chunks(len)) {
        o[start..start + len].copy_from_slice(r);
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Tensor::with_shape(out, &shape)
}

/// Mirror index into `[0, n)` without repeating the edge sample; periodic for any `i`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right of an `H x W x C` map by `ph`, `pw`.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    let (oh, ow) = (h + ph, w + pw);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = reflect_index(y, h);
        for xx in 0..ow {
            let sx = reflect_index(xx, w);
            let at = (sy * w + sx) * c;
            out.extend_from_slice(&x.data()[at..at + c]);
        }
    }
    Ok(Tensor::with_shape(out, &[oh, ow, c]))
}

pub fn pad_reflect_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = g.hwc()?;
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..oh {
        let sy = reflect_index(y, h);
        for xx in 0..ow {
            let sx = reflect_index(xx, w);
            let src = &g.data()[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            let dst = &mut out[(sy * w + sx) * c..(sy * w + sx + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Tensor::with_shape(out, &[h, w, c]))
}

/// Keeps the top-left `h x w` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ih, iw, c) = x.hwc()?;
    if h > ih || w > iw || h == 0 || w == 0 {
        return dim_err("crop", x.shape(), &[h, w, c]);
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        out.extend_from_slice(&x.data()[y * iw * c..(y * iw + w) * c]);
    }
    Ok(Tensor::with_shape(out, &[h, w, c]))
}

pub fn crop_backward<T: Scalar>(g: &Tensor<T>, ih: usize, iw: usize) -> Result<Tensor<T>> {
    let (h, w, c) = g.hwc()?;
    let mut out = vec![T::zero(); ih * iw * c];
    for y in 0..h {
        out[y * iw * c..(y * iw + w) * c].copy_from_slice(&g.data()[y * w * c..(y + 1) * w * c]);
    }
    Ok(Tensor::with_shape(out, &[ih, iw, c]))
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred linear resampling.
fn linear_taps(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `H x W x C` map (half-pixel centres, edge clamped).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    if oh == 0 || ow == 0 {
        return dim_err("resize_bilinear", x.shape(), &[oh, ow, c]);
    }
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let src = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy1, fy0) = (T::c(fy), T::c(1.0 - fy));
        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx1, fx0) = (T::c(fx), T::c(1.0 - fx));
            let o = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for ch in 0..c {
                let p = |yy: usize, xi: usize| src[(yy * w + xi) * c + ch];
                o[ch] = fy0 * (fx0 * p(y0, x0) + fx1 * p(y0, x1))
                    + fy1 * (fx0 * p(y1, x0) + fx1 * p(y1, x1));
            }
        }
    }
    Ok(Tensor::with_shape(out, &[oh, ow, c]))
}

pub fn resize_bilinear_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = g.hwc()?;
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut out = vec![T::zero(); h * w * c];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy1, fy0) = (T::c(fy), T::c(1.0 - fy));
        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx1, fx0) = (T::c(fx), T::c(1.0 - fx));
            for ch in 0..c {
                let gv = g.data()[(y * ow + xx) * c + ch];
                out[(y0 * w + x0) * c + ch] += fy0 * fx0 * gv;
                out[(y0 * w + x1) * c + ch] += fy0 * fx1 * gv;
                out[(y1 * w + x0) * c + ch] += fy1 * fx0 * gv;
                out[(y1 * w + x1) * c + ch] += fy1 * fx1 * gv;
            }
        }
    }
    Ok(Tensor::with_shape(out, &[h, w, c]))
}

/// Channel index range `[start, end)` averaged into output bin `b` when pooling
/// `cin` channels down to `cout`. The bins partition `0..cin`.
pub fn pool_bin(b: usize, cin: usize, cout: usize) -> (usize, usize) {
    (b * cin / cout, (b + 1) * cin / cout)
}

/// Adaptive average pooling over the last axis, `cin -> cout` with `cout <= cin`.
pub fn channel_pool<T: Scalar>(x: &Tensor<T>, cout: usize) -> Result<Tensor<T>> {
    let cin = *x.shape().last().unwrap();
    if cout == 0 || cout > cin {
        return dim_err("channel_pool", x.shape(), &[cout]);
    }
    let mut out = Vec::with_capacity(x.numel() / cin * cout);
    for r in x.data().chunks(cin) {
        for b in 0..cout {
            let (s, e) = pool_bin(b, cin, cout);
            let sum: T = r[s..e].iter().copied().sum();
            out.push(sum / T::c((e - s) as f64));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::with_shape(out, &shape))
}

pub fn channel_pool_backward<T: Scalar>(g: &Tensor<T>, cin: usize) -> Tensor<T> {
    let cout = *g.shape().last().unwrap();
    let mut out = Vec::with_capacity(g.numel() / cout * cin);
    for r in g.data().chunks(cout) {
        for (b, &gv) in r.iter().enumerate() {
            let (s, e) = pool_bin(b, cin, cout);
            let share = gv / T::c((e - s) as f64);
            out.extend(std::iter::repeat(share).take(e - s));
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = cin;
    Tensor::with_shape(out, &shape)
}

/// Gathers rows of a `[R, K]` table.
pub fn index_rows<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (r, k) = match table.shape() {
        [r, k] => (*r, *k),
        s => return dim_err("index_rows", s, &[idx.len()]),
    };
    if idx.is_empty() || idx.iter().any(|&i| i >= r) {
        return Err(HitError::Contract(format!("row index out of range for table of {r} rows")));
    }
    let mut out = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        out.extend_from_slice(&table.data()[i * k..(i + 1) * k]);
    }
    Ok(Tensor::with_shape(out, &[idx.len(), k]))
}

pub fn index_rows_backward<T: Scalar>(g: &Tensor<T>, idx: &[usize], rows: usize) -> Tensor<T> {
    let k = g.shape()[1];
    let mut out = vec![T::zero(); rows * k];
    for (n, &i) in idx.iter().enumerate() {
        for j in 0..k {
            out[i * k + j] += g.data()[n * k + j];
        }
    }
    Tensor::with_shape(out, &[rows, k])
}
