use rayon::prelude::*;

use super::Tensor;
use crate::error::{dim_err, HitError, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-D cross-correlation with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, `same` padding for an odd kernel of size `k`.
    pub const fn same(k: usize) -> Self {
        Self::new(1, k / 2, 1)
    }

    pub const fn depthwise(k: usize, channels: usize) -> Self {
        Self::new(1, k / 2, channels)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout: usize,
    cout_g: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Geometry> {
    let (h, wd, cin) = x.hwc()?;
    let (kh, kw, cin_g, cout) = match w.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return dim_err("conv2d", x.shape(), s),
    };
    let g = spec.groups;
    if g == 0 || spec.stride == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(HitError::Dimension {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(HitError::Dimension {
            op: "conv2d (kernel larger than padded input)",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(Geometry {
        h,
        w: wd,
        cin,
        kh,
        kw,
        cin_g,
        cout,
        cout_g: cout / g,
        oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
        ow: (wd + 2 * spec.padding - kw) / spec.stride + 1,
    })
}

/// Output extents and multiply-accumulate count of a convolution.
pub fn conv2d_macs(out_h: usize, out_w: usize, kh: usize, kw: usize, cin_g: usize, cout: usize) -> u64 {
    (out_h * out_w * kh * kw * cin_g * cout) as u64
}

/// Source coordinate for output `o` and tap `k`, `None` when it lands in padding.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < pad || p - pad >= n {
        None
    } else {
        Some(p - pad)
    }
}

/// Cross-correlation of an `H x W x Cin` map with a `kh x kw x (Cin/groups) x Cout`
/// kernel. Each output accumulates from zero over `(ky, kx, ci)` in ascending order.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    let src = x.data();
    let wt = w.data();
    let row = |(oy, orow): (usize, &mut [T])| {
        for ox in 0..g.ow {
            let acc = &mut orow[ox * g.cout..(ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, spec.stride, spec.padding, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, spec.stride, spec.padding, g.w) else {
                        continue;
                    };
                    let px = &src[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wk = &wt[(ky * g.kw + kx) * g.cin_g * g.cout..];
                    for grp in 0..spec.groups {
                        let accg = &mut acc[grp * g.cout_g..(grp + 1) * g.cout_g];
                        for ci in 0..g.cin_g {
                            let xv = px[grp * g.cin_g + ci];
                            let wr = &wk[ci * g.cout + grp * g.cout_g..ci * g.cout + (grp + 1) * g.cout_g];
                            for (a, &wv) in accg.iter_mut().zip(wr) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    let work = g.oh * g.ow * g.kh * g.kw * g.cin_g * g.cout;
    if work >= 1 << 16 && g.oh > 1 {
        out.par_chunks_mut(g.ow * g.cout).enumerate().for_each(row);
    } else {
        out.chunks_mut(g.ow * g.cout).enumerate().for_each(row);
    }
    Ok(Tensor::with_shape(out, &[g.oh, g.ow, g.cout]))
}

/// Gradient with respect to the input map.
pub fn conv2d_grad_input<T: Scalar>(
    x_shape: &[usize],
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(x_shape);
    let g = geometry(&probe, w, spec)?;
    let mut gx = vec![T::zero(); g.h * g.w * g.cin];
    let wt = w.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gy.data()[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, spec.stride, spec.padding, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, spec.stride, spec.padding, g.w) else {
                        continue;
                    };
                    let px = &mut gx[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wk = &wt[(ky * g.kw + kx) * g.cin_g * g.cout..];
                    for grp in 0..spec.groups {
                        let gog = &go[grp * g.cout_g..(grp + 1) * g.cout_g];
                        for ci in 0..g.cin_g {
                            let wr = &wk[ci * g.cout + grp * g.cout_g..ci * g.cout + (grp + 1) * g.cout_g];
                            let s: T = gog.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                            px[grp * g.cin_g + ci] += s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::with_shape(gx, x_shape))
}

/// Gradient with respect to the kernel.
pub fn conv2d_grad_weight<T: Scalar>(
    x: &Tensor<T>,
    w_shape: &[usize],
    gy: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(w_shape);
    let g = geometry(x, &probe, spec)?;
    let mut gw = vec![T::zero(); probe.numel()];
    let src = x.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gy.data()[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, spec.stride, spec.padding, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, spec.stride, spec.padding, g.w) else {
                        continue;
                    };
                    let px = &src[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let base = (ky * g.kw + kx) * g.cin_g * g.cout;
                    for grp in 0..spec.groups {
                        let gog = &go[grp * g.cout_g..(grp + 1) * g.cout_g];
                        for ci in 0..g.cin_g {
                            let xv = px[grp * g.cin_g + ci];
                            let at = base + ci * g.cout + grp * g.cout_g;
                            for (wv, &gv) in gw[at..at + g.cout_g].iter_mut().zip(gog) {
                                *wv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::with_shape(gw, w_shape))
}
