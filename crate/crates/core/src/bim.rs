//! Bidirectional interaction between adjacent scales.
//!
//! Two transposed (channel x channel) cross-attentions exchange queries and
//! keys/values between `F_l` and the upsampled `F_{l+1}`; each direction is
//! concatenated with a spatially enhanced copy of its values and the two
//! directions are fused by a 1x1 projection back to `C'` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{HitError, Result};
use crate::nn::{Bound, Conv, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// Adjacent-scale inputs: `fine` is `H x W x C'`, `coarse` is
/// `H/2 x W/2 x 2C'`, `coarse_resized` is `coarse` bilinearly upsampled to `H x W`.
#[derive(Clone)]
pub struct CrossScalePair<'t, T: Scalar> {
    pub fine: Var<'t, T>,
    pub coarse: Var<'t, T>,
    pub coarse_resized: Var<'t, T>,
}

impl<'t, T: Scalar> CrossScalePair<'t, T> {
    pub fn new(fine: Var<'t, T>, coarse: Var<'t, T>) -> Result<Self> {
        let (h, w, c) = fine.value().hwc()?;
        let (hc, wc, cc) = coarse.value().hwc()?;
        if h != 2 * hc || w != 2 * wc || cc != 2 * c {
            return Err(HitError::Contract(format!(
                "coarse feature {:?} must be half the extents and twice the channels of {:?}",
                coarse.shape(),
                fine.shape()
            )));
        }
        let coarse_resized = coarse.resize_bilinear(h, w)?;
        Ok(Self {
            fine,
            coarse,
            coarse_resized,
        })
    }
}

/// Multiply-accumulate counts of the BIM core (`O(BIM) = 2(O(SEU) + O(SA))`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub seu_macs: u64,
    pub sa_macs: u64,
    pub total_macs: u64,
}

/// Closed-form complexity of BIM for a `h x w x c` feature: `hwc(18 + 4c)`.
pub fn bim_flops(h: i64, w: i64, c: i64) -> Result<FlopReport> {
    if h <= 0 || w <= 0 || c <= 0 {
        return Err(HitError::Domain(format!(
            "extents must be positive, got h={h} w={w} c={c}"
        )));
    }
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let seu_macs = 9 * h * w * c;
    let sa_macs = 2 * h * w * c * c;
    Ok(FlopReport {
        seu_macs,
        sa_macs,
        total_macs: h * w * c * (18 + 4 * c),
    })
}

/// `softmax(q_hat k_hat / alpha) v_hat` with `q_hat: [Cq, N]`, `k_hat: [N, Ckv]`,
/// `v_hat: [Ckv, N]`; softmax runs along the key-channel axis. Returns the
/// `[Cq, N]` output and the `[Cq, Ckv]` attention probabilities.
pub fn transposed_attention<'t, T: Scalar>(
    q_hat: &Var<'t, T>,
    k_hat: &Var<'t, T>,
    v_hat: &Var<'t, T>,
    log_alpha: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let inv_alpha = log_alpha.scale(-T::one()).exp();
    let probs = q_hat.matmul(k_hat)?.mul_scalar(&inv_alpha)?.softmax_last()?;
    Ok((probs.matmul(v_hat)?, probs))
}

/// Cross attention with queries projected from `q_src` and keys/values from
/// `kv_src`, both `H' x W'` maps. Output is `[Cq, H'W']`.
#[allow(clippy::too_many_arguments)]
pub fn transposed_cross_attention<'t, T: Scalar>(
    b: &Bound<'t, T>,
    q_src: &Var<'t, T>,
    kv_src: &Var<'t, T>,
    wq: &Linear,
    wk: &Linear,
    wv: &Linear,
    log_alpha: ParamId,
) -> Result<Var<'t, T>> {
    let (h, w, cq) = q_src.value().hwc()?;
    let (hk, wkk, ckv) = kv_src.value().hwc()?;
    if (h, w) != (hk, wkk) {
        return Err(HitError::Contract(format!(
            "query source is {h}x{w} but key/value source is {hk}x{wkk}"
        )));
    }
    let n = h * w;
    let q_tokens = q_src.reshape(&[n, cq])?;
    let kv_tokens = kv_src.reshape(&[n, ckv])?;
    let q_hat = wq.forward(b, &q_tokens)?.transpose()?;
    let k_hat = wk.forward(b, &kv_tokens)?;
    let v_hat = wv.forward(b, &kv_tokens)?.transpose()?;
    Ok(transposed_attention(&q_hat, &k_hat, &v_hat, b.p(log_alpha))?.0)
}

/// Spatial enhancement of channel-major values `[C, H'W']`: depthwise 3x3
/// over the `H' x W'` layout followed by GELU, returned channel-major.
pub fn seu<'t, T: Scalar>(
    b: &Bound<'t, T>,
    v_hat: &Var<'t, T>,
    h: usize,
    w: usize,
    dw: &Conv,
) -> Result<Var<'t, T>> {
    let (c, n) = match v_hat.shape() {
        [c, n] if *n == h * w => (*c, *n),
        s => {
            return Err(HitError::Contract(format!(
                "value tensor {s:?} does not carry a {h}x{w} spatial layout"
            )))
        }
    };
    let y = dw.forward(b, &v_hat.transpose()?.reshape(&[h, w, c])?)?.gelu();
    y.reshape(&[n, c])?.transpose()
}

/// Channel-major projections of both scales.
pub struct ProjectedPair<'t, T: Scalar> {
    pub q_fine: Var<'t, T>,
    pub k_fine: Var<'t, T>,
    pub v_fine: Var<'t, T>,
    pub q_coarse: Var<'t, T>,
    pub k_coarse: Var<'t, T>,
    pub v_coarse: Var<'t, T>,
}

/// The attention and SEU part of BIM, which is what the closed-form
/// complexity accounts for. Returns the two directions token-major:
/// `[softmax(Q_c K_f) V_f, SEU(V_f)]` and `[softmax(Q_f K_c) V_c, SEU(V_c)]`.
#[allow(clippy::too_many_arguments)]
pub fn bim_core<'t, T: Scalar>(
    b: &Bound<'t, T>,
    p: &ProjectedPair<'t, T>,
    h: usize,
    w: usize,
    seu_fine: &Conv,
    seu_coarse: &Conv,
    log_alpha_a: ParamId,
    log_alpha_b: ParamId,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (att_a, _) = transposed_attention(&p.q_coarse, &p.k_fine, &p.v_fine, b.p(log_alpha_a))?;
    let enh_f = seu(b, &p.v_fine, h, w, seu_fine)?;
    let dir_a = Var::concat_last(&[&att_a.transpose()?, &enh_f.transpose()?])?;
    let (att_b, _) = transposed_attention(&p.q_fine, &p.k_coarse, &p.v_coarse, b.p(log_alpha_b))?;
    let enh_c = seu(b, &p.v_coarse, h, w, seu_coarse)?;
    let dir_b = Var::concat_last(&[&att_b.transpose()?, &enh_c.transpose()?])?;
    Ok((dir_a, dir_b))
}

#[derive(Clone, Debug)]
pub struct Bim {
    pub channels: usize,
    pub q_fine: Linear,
    pub k_fine: Linear,
    pub v_fine: Linear,
    pub q_coarse: Linear,
    pub k_coarse: Linear,
    pub v_coarse: Linear,
    pub seu_fine: Conv,
    pub seu_coarse: Conv,
    pub log_alpha_a: ParamId,
    pub log_alpha_b: ParamId,
    pub fuse: Linear,
}

impl Bim {
    /// BIM between a `C'`-channel fine scale and a `2C'`-channel coarse scale.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize) -> Self {
        let c2 = 2 * c;
        let mut lin = |s: &mut ParamStore<T>, n: &str, k: usize| {
            Linear::new(s, init, &format!("{name}.{n}"), k, k, false)
        };
        let q_fine = lin(store, "q_fine", c);
        let k_fine = lin(store, "k_fine", c);
        let v_fine = lin(store, "v_fine", c);
        let q_coarse = lin(store, "q_coarse", c2);
        let k_coarse = lin(store, "k_coarse", c2);
        let v_coarse = lin(store, "v_coarse", c2);
        Self {
            channels: c,
            q_fine,
            k_fine,
            v_fine,
            q_coarse,
            k_coarse,
            v_coarse,
            seu_fine: Conv::new(
                store,
                init,
                &format!("{name}.seu_fine"),
                3,
                c,
                c,
                Conv2dSpec::depthwise(3, c),
                true,
            ),
            seu_coarse: Conv::new(
                store,
                init,
                &format!("{name}.seu_coarse"),
                3,
                c2,
                c2,
                Conv2dSpec::depthwise(3, c2),
                true,
            ),
            log_alpha_a: store.add(format!("{name}.log_alpha_a"), Tensor::scalar(T::zero())),
            log_alpha_b: store.add(format!("{name}.log_alpha_b"), Tensor::scalar(T::zero())),
            fuse: Linear::new(store, init, &format!("{name}.fuse"), 6 * c, c, true),
        }
    }

    pub fn project<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        pair: &CrossScalePair<'t, T>,
    ) -> Result<ProjectedPair<'t, T>> {
        let (h, w, c) = pair.fine.value().hwc()?;
        if c != self.channels {
            return Err(HitError::Config(format!(
                "BIM built for {} channels, fine feature has {c}",
                self.channels
            )));
        }
        let n = h * w;
        let tf = pair.fine.reshape(&[n, c])?;
        let tc = pair.coarse_resized.reshape(&[n, 2 * c])?;
        Ok(ProjectedPair {
            q_fine: self.q_fine.forward(b, &tf)?.transpose()?,
            k_fine: self.k_fine.forward(b, &tf)?,
            v_fine: self.v_fine.forward(b, &tf)?.transpose()?,
            q_coarse: self.q_coarse.forward(b, &tc)?.transpose()?,
            k_coarse: self.k_coarse.forward(b, &tc)?,
            v_coarse: self.v_coarse.forward(b, &tc)?.transpose()?,
        })
    }

    /// `F_sl`: `H' x W' x C'`.
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        pair: &CrossScalePair<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = b.tape();
        let (h, w, c) = pair.fine.value().hwc()?;
        let p = {
            let _s = tape.scope("proj");
            self.project(b, pair)?
        };
        let (dir_a, dir_b) = {
            let _s = tape.scope("core");
            bim_core(
                b,
                &p,
                h,
                w,
                &self.seu_fine,
                &self.seu_coarse,
                self.log_alpha_a,
                self.log_alpha_b,
            )?
        };
        let _s = tape.scope("fuse");
        let cat = Var::concat_last(&[&dir_b, &dir_a])?;
        self.fuse.forward(b, &cat)?.reshape(&[h, w, c])
    }

    /// Closed-form core MACs of this module's actual `C'`/`2C'` channel split.
    pub fn core_macs(h: usize, w: usize, c: usize) -> u64 {
        let n = (h * w) as u64;
        let c = c as u64;
        8 * n * c * c + 27 * n * c
    }
}

/// Runs the BIM core with `c` channels on both scales (the setting the
/// closed form assumes) on a counting tape and returns the recorded MACs.
pub fn count_core_macs(h: usize, w: usize, c: usize, seed: u64) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(HitError::Domain("extents must be positive".into()));
    }
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
    let dw = |s: &mut ParamStore<f64>, i: &mut Init, n: &str| {
        Conv::new(s, i, n, 3, c, c, Conv2dSpec::depthwise(3, c), true)
    };
    let seu_a = dw(&mut store, &mut init, "seu_a");
    let seu_b = dw(&mut store, &mut init, "seu_b");
    let la = store.add("log_alpha_a", Tensor::scalar(0.0));
    let lb = store.add("log_alpha_b", Tensor::scalar(0.0));
    let n = h * w;
    let mut rand = |shape: &[usize]| init.trunc_normal::<f64>(shape, 1.0);
    let (cm, tm) = ([c, n], [n, c]);
    let hats = [rand(&cm), rand(&tm), rand(&cm), rand(&cm), rand(&tm), rand(&cm)];
    let tape = Tape::new();
    let b = Bound::new(&tape, &store, false);
    let [qf, kf, vf, qc, kc, vc] = hats.map(|t| tape.constant(t));
    let p = ProjectedPair {
        q_fine: qf,
        k_fine: kf,
        v_fine: vf,
        q_coarse: qc,
        k_coarse: kc,
        v_coarse: vc,
    };
    let _s = tape.scope("core");
    bim_core(&b, &p, h, w, &seu_a, &seu_b, la, lb)?;
    Ok(tape.macs_in("core"))
}
