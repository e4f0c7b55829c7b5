//! Charbonnier loss, AdamW with cosine decay, flip augmentation and the
//! deterministic training loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::metrics::psnr;
use crate::data::{clamp01, ImagePair};
use crate::error::{dim_err, HitError, Result};
use crate::model::Model;
use crate::nn::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `sqrt(||pred - target||^2 + eps^2)` over the whole image.
    #[default]
    GlobalNorm,
    /// Mean over elements of `sqrt((pred - target)^2 + eps^2)`.
    PixelMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub eps_char: f64,
    pub loss_reduction: LossReduction,
    pub batch_size: usize,
    /// Square training crop; `None` trains on whole images.
    pub patch_size: Option<usize>,
    pub seed: u64,
    pub flip_prob: f64,
    /// `(first_step, patch_size)` entries, sorted by step, overriding `patch_size`.
    pub progressive_schedule: Option<Vec<(usize, usize)>>,
    /// Validation PSNR is computed every this many steps and after the last one.
    pub val_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_final: 1e-6,
            total_steps: 1000,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.02,
            eps_char: 1e-3,
            loss_reduction: LossReduction::GlobalNorm,
            batch_size: 1,
            patch_size: None,
            seed: 0,
            flip_prob: 0.5,
            progressive_schedule: None,
            val_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HitError::Config(m.to_owned()));
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return bad("need 0 <= lr_final < lr_init");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if !(self.eps_char > 0.0) || !(self.adam_eps > 0.0) {
            return bad("eps_char and adam_eps must be positive");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patch_size == Some(0) {
            return bad("patch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if self.val_every == Some(0) {
            return bad("val_every must be positive");
        }
        if let Some(s) = &self.progressive_schedule {
            if s.iter().any(|&(_, p)| p == 0) || s.windows(2).any(|w| w[0].0 >= w[1].0) {
                return bad("progressive_schedule needs positive patches and increasing steps");
            }
        }
        Ok(())
    }

    /// Crop size in effect at `step`.
    pub fn patch_at(&self, step: usize) -> Option<usize> {
        self.progressive_schedule
            .as_ref()
            .and_then(|s| s.iter().rev().find(|&&(from, _)| from <= step).map(|&(_, p)| p))
            .or(self.patch_size)
    }
}

fn check_same(pred: &[usize], target: &[usize]) -> Result<()> {
    if pred != target {
        return Err(HitError::Contract(format!(
            "charbonnier: prediction {pred:?} and target {target:?} differ in shape"
        )));
    }
    Ok(())
}

/// Differentiable Charbonnier loss.
pub fn charbonnier_var<'t, T: Scalar>(
    pred: &Var<'t, T>,
    target: &Var<'t, T>,
    eps: f64,
    reduction: LossReduction,
) -> Result<Var<'t, T>> {
    check_same(pred.shape(), target.shape())?;
    let sq = pred.sub(target)?.square();
    let eps2 = T::c(eps * eps);
    Ok(match reduction {
        LossReduction::GlobalNorm => sq.sum().add_scalar(eps2).sqrt(),
        LossReduction::PixelMean => sq.add_scalar(eps2).sqrt().mean(),
    })
}

pub fn charbonnier<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
    reduction: LossReduction,
) -> Result<f64> {
    check_same(pred.shape(), target.shape())?;
    let eps2 = eps * eps;
    let sq = pred.data().iter().zip(target.data()).map(|(&p, &t)| {
        let d = (p - t).f64();
        d * d
    });
    Ok(match reduction {
        LossReduction::GlobalNorm => (sq.sum::<f64>() + eps2).sqrt(),
        LossReduction::PixelMean => sq.map(|s| (s + eps2).sqrt()).sum::<f64>() / pred.numel() as f64,
    })
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at `total_steps`.
///
/// The first half is written relative to `lr_init` and the second relative to
/// `lr_final` so both endpoints come out exact in floating point.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if cfg.total_steps == 0 || step > cfg.total_steps {
        return Err(HitError::Domain(format!(
            "step {step} outside [0, {}]",
            cfg.total_steps
        )));
    }
    let span = cfg.lr_init - cfg.lr_final;
    let c = (std::f64::consts::PI * step as f64 / cfg.total_steps as f64).cos();
    Ok(if 2 * step <= cfg.total_steps {
        cfg.lr_init - 0.5 * span * (1.0 - c)
    } else {
        cfg.lr_final + 0.5 * span * (1.0 + c)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.betas.0,
            beta2: c.betas.1,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW with decoupled weight decay applied before the moment update.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, hp: &AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return dim_err("adamw", &[params.len()], &[grads.len(), self.m.len()]);
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return dim_err("adamw", p.shape(), g.shape());
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::c(1.0 - hp.beta1.powi(t));
        let bc2 = T::c(1.0 - hp.beta2.powi(t));
        let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - hp.beta1), T::c(1.0 - hp.beta2));
        let decay = T::c(1.0 - lr * hp.weight_decay);
        let (lr, eps) = (T::c(lr), T::c(hp.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, w, c) = x.hwc()?;
    let d = x.data();
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, xx, ch) = (i / c / w, i / c % w, i % c);
        d[(y * w + (w - 1 - xx)) * c + ch]
    }))
}

pub fn flip_vertical<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    let d = x.data();
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, rest) = (i / (w * c), i % (w * c));
        d[(h - 1 - y) * w * c + rest]
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn draw(rng: &mut impl Rng, prob: f64) -> Self {
        Self {
            horizontal: rng.random_bool(prob),
            vertical: rng.random_bool(prob),
        }
    }

    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = x.clone();
        if self.horizontal {
            out = flip_horizontal(&out)?;
        }
        if self.vertical {
            out = flip_vertical(&out)?;
        }
        Ok(out)
    }
}

/// Applies one random flip combination to both images of the pair.
pub fn augment<T: Scalar>(pair: &ImagePair<T>, rng: &mut impl Rng, flip_prob: f64) -> Result<ImagePair<T>> {
    let f = Flips::draw(rng, flip_prob);
    ImagePair::new(f.apply(&pair.degraded)?, f.apply(&pair.clean)?)
}

fn crop_at<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (_, w, c) = x.hwc()?;
    let d = x.data();
    Ok(Tensor::from_fn(&[ph, pw, c], |i| {
        let (y, xx, ch) = (i / c / pw, i / c % pw, i % c);
        d[((y0 + y) * w + x0 + xx) * c + ch]
    }))
}

/// Random crop of at most `patch x patch`, taken at the same place in both images.
pub fn random_crop<T: Scalar>(pair: &ImagePair<T>, patch: usize, rng: &mut impl Rng) -> Result<ImagePair<T>> {
    let (h, w, _) = pair.clean.hwc()?;
    let (ph, pw) = (patch.min(h), patch.min(w));
    if (ph, pw) == (h, w) {
        return Ok(pair.clone());
    }
    let y0 = rng.random_range(0..=h - ph);
    let x0 = rng.random_range(0..=w - pw);
    ImagePair::new(
        crop_at(&pair.degraded, y0, x0, ph, pw)?,
        crop_at(&pair.clean, y0, x0, ph, pw)?,
    )
}

/// SplitMix64 finaliser applied to `seed + index`, for per-sample seeds.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,loss,val_psnr")?;
    for r in rows {
        let v = r.val_psnr.map(|p| format!("{p}")).unwrap_or_default();
        writeln!(out, "{},{:e},{:e},{}", r.step, r.lr, r.loss, v)?;
    }
    Ok(())
}

pub fn save_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace_csv(rows, f)
}

/// Mean PSNR of the model's restorations, clamped to `[0, 1]`, over `pairs`.
pub fn mean_psnr<T: Scalar>(model: &Model<T>, pairs: &[ImagePair<T>]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += psnr(&clamp01(&model.forward(&p.degraded)?.restored), &p.clean, 1.0)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Loss and parameter gradients of one sample.
fn sample_grads<T: Scalar>(model: &Model<T>, pair: &ImagePair<T>, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let b = Bound::new(&tape, model.params(), true);
    let x = tape.constant(pair.degraded.clone());
    let (restored, _) = model.forward_var(&b, &x, None)?;
    let target = tape.constant(pair.clean.clone());
    let loss = charbonnier_var(&restored, &target, cfg.eps_char, cfg.loss_reduction)?;
    let value = loss.value().item().f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(&loss)?;
    Ok((value, b.grads(&g)))
}

/// Trains with the cosine schedule from `cfg`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[ImagePair<T>],
    val: &[ImagePair<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    train_with_schedule(model, data, val, cfg, |s| cosine_lr(s, cfg))
}

/// Training loop with an arbitrary learning-rate schedule. Each step draws
/// `batch_size` samples, crops and flips them with per-sample seeds, averages
/// the Charbonnier gradients and takes one AdamW step.
pub fn train_with_schedule<T: Scalar>(
    model: &mut Model<T>,
    data: &[ImagePair<T>],
    val: &[ImagePair<T>],
    cfg: &TrainConfig,
    lr_at: impl Fn(usize) -> Result<f64>,
) -> Result<Vec<TraceRow>> {
    if data.is_empty() {
        return Err(HitError::Domain("training needs at least one image pair".into()));
    }
    let hp = AdamParams::from(cfg);
    let mut opt = AdamW::new(model.params().tensors());
    let mut trace = Vec::with_capacity(cfg.total_steps);
    let batch = cfg.batch_size;
    for step in 0..cfg.total_steps {
        let lr = lr_at(step)?;
        let patch = cfg.patch_at(step);
        let samples: Vec<ImagePair<T>> = (0..batch)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, (step * batch + j) as u64));
                let pick = &data[rng.random_range(0..data.len())];
                let cropped = match patch {
                    Some(p) => random_crop(pick, p, &mut rng)?,
                    None => pick.clone(),
                };
                augment(&cropped, &mut rng, cfg.flip_prob)
            })
            .collect::<Result<_>>()?;
        let m: &Model<T> = model;
        let results: Vec<(f64, Vec<Tensor<T>>)> = samples
            .par_iter()
            .map(|s| sample_grads(m, s, cfg))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                // NaN or infinity inside the forward pass means the loss is not finite either
                HitError::Numeric(_) => HitError::NonFinite { step, loss: f64::NAN },
                e => e,
            })?;

        let loss = results.iter().map(|r| r.0).sum::<f64>() / batch as f64;
        if !loss.is_finite() {
            return Err(HitError::NonFinite { step, loss });
        }
        let mut it = results.into_iter();
        let mut grads = it.next().map(|r| r.1).unwrap_or_default();
        for (_, g) in it {
            for (acc, gi) in grads.iter_mut().zip(&g) {
                *acc = acc.add(gi)?;
            }
        }
        if batch > 1 {
            let s = T::one() / T::c(batch as f64);
            grads.iter_mut().for_each(|g| *g = g.scale(s));
        }
        opt.step(model.params_mut().tensors_mut(), &grads, lr, &hp)?;

        let last = step + 1 == cfg.total_steps;
        let due = cfg.val_every.is_some_and(|n| (step + 1) % n == 0);
        let val_psnr = if !val.is_empty() && (last || due) {
            Some(mean_psnr(model, val)?)
        } else {
            None
        };
        trace.push(TraceRow { step, lr, loss, val_psnr });
    }
    Ok(trace)
}

/// Means of consecutive non-overlapping `window`-sized chunks; a trailing
/// partial chunk is dropped.
pub fn windowed_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
