//! Independent reference implementations used as test oracles. They are
//! written for clarity with plain loops and share no code with the library.
#![allow(dead_code)]

use hit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Cross-correlation with zero padding; kernel layout `kh x kw x (cin/groups) x cout`.
/// Each output accumulates over `(ky, kx, ci)` in that order starting from zero.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cg, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cg * groups, cin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let og = cout / groups;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let g = co / og;
                let mut s = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cg {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(iy as usize * wd + ix as usize) * cin + g * cg + ci];
                            let wv = w.data()[((ky * kw + kx) * cg + ci) * cout + co];
                            s += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).unwrap()
}

/// Mean SSIM evaluated window by window with an explicit 2-D Gaussian
/// (11x11, sigma 1.5, K1 0.01, K2 0.03, peak 1), averaged over channels.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    const K: usize = 11;
    let mut g2 = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (u, row) in g2.iter_mut().enumerate() {
        for (v, g) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *g = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *g;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for ch in 0..c {
        let at = |y: usize, x: usize, t: &Tensor<f64>| t.data()[(y * w + x) * c + ch];
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - K {
            for x0 in 0..=w - K {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..K {
                    for v in 0..K {
                        let g = g2[u][v] / total;
                        ma += g * at(y0 + u, x0 + v, a);
                        mb += g * at(y0 + u, x0 + v, b);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..K {
                    for v in 0..K {
                        let g = g2[u][v] / total;
                        let da = at(y0 + u, x0 + v, a) - ma;
                        let db = at(y0 + u, x0 + v, b) - mb;
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / c as f64
}

/// Row-wise softmax in the straightforward form, for comparison.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// GELU in the tanh form, evaluated directly.
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

/// Row-wise layer normalisation over the last axis of a flat buffer.
pub fn layer_norm_rows(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            (0..c)
                .map(|j| gamma[j] * (r[j] - mean) * rstd + beta[j])
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `x W + b` for row-major `x: [n, ci]`, `w: [ci, co]`.
pub fn affine_rows(x: &[f64], ci: usize, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let co = w.shape()[1];
    let n = x.len() / ci;
    let mut out = vec![0.0; n * co];
    for r in 0..n {
        for j in 0..co {
            let mut s = b.map_or(0.0, |b| b.data()[j]);
            for t in 0..ci {
                s += x[r * ci + t] * w.data()[t * co + j];
            }
            out[r * co + j] = s;
        }
    }
    out
}

pub struct WmsaWeights<'a> {
    pub wq: &'a Tensor<f64>,
    pub wk: &'a Tensor<f64>,
    pub wv: &'a Tensor<f64>,
    pub wo: &'a Tensor<f64>,
    pub bo: &'a Tensor<f64>,
    /// `[(2m-1)^2, heads]`
    pub rel_bias: &'a Tensor<f64>,
    pub alpha: f64,
    pub heads: usize,
}

/// Window self-attention on an `H x W x C` map, window by window, written
/// directly from the definition. Returns the map in `H x W x C` layout.
pub fn dense_wmsa(x: &Tensor<f64>, m: usize, p: &WmsaWeights) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / p.heads;
    let side = 2 * m - 1;
    let mut out = vec![0.0; h * w * c];
    for ty in 0..h / m {
        for tx in 0..w / m {
            let pos: Vec<(usize, usize)> =
                (0..m * m).map(|i| (ty * m + i / m, tx * m + i % m)).collect();
            let tokens: Vec<f64> = pos
                .iter()
                .flat_map(|&(y, xx)| x.data()[(y * w + xx) * c..(y * w + xx + 1) * c].to_vec())
                .collect();
            let q = affine_rows(&tokens, c, p.wq, None);
            let k = affine_rows(&tokens, c, p.wk, None);
            let v = affine_rows(&tokens, c, p.wv, None);
            let n = m * m;
            let mut heads_out = vec![0.0; n * c];
            for hd in 0..p.heads {
                for i in 0..n {
                    let mut logits = vec![0.0; n];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for t in 0..d {
                            s += q[i * c + hd * d + t] * k[j * c + hd * d + t];
                        }
                        let (yi, xi) = (i / m, i % m);
                        let (yj, xj) = (j / m, j % m);
                        let r = (yi + m - 1 - yj) * side + (xi + m - 1 - xj);
                        *l = s / p.alpha + p.rel_bias.data()[r * p.heads + hd];
                    }
                    let probs = softmax_rows(&logits, n);
                    for t in 0..d {
                        heads_out[i * c + hd * d + t] =
                            (0..n).map(|j| probs[j] * v[j * c + hd * d + t]).sum();
                    }
                }
            }
            let proj = affine_rows(&heads_out, c, p.wo, Some(p.bo));
            for (i, &(y, xx)) in pos.iter().enumerate() {
                out[(y * w + xx) * c..(y * w + xx + 1) * c].copy_from_slice(&proj[i * c..(i + 1) * c]);
            }
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

/// Locally-enhanced FFN on an `H x W x C` map from its four stages.
pub fn staged_ffn(
    x: &Tensor<f64>,
    w1: &Tensor<f64>,
    b1: &Tensor<f64>,
    dw: &Tensor<f64>,
    dwb: &Tensor<f64>,
    w2: &Tensor<f64>,
    b2: &Tensor<f64>,
) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hidden = w1.shape()[1];
    let e = Tensor::new(vec![h, w, hidden], affine_rows(x.data(), c, w1, Some(b1))).unwrap();
    let conv = naive_conv2d(&e, dw, 1, 1, hidden);
    let act: Vec<f64> = conv
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| gelu(v + dwb.data()[i % hidden]))
        .collect();
    Tensor::new(vec![h, w, c], affine_rows(&act, hidden, w2, Some(b2))).unwrap()
}
