//! The U-shaped restoration network: input conv, window-wise injection,
//! encoder, decoder with cross-scale interaction on the skips, residual output.

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bim::{Bim, CrossScalePair};
use crate::error::{HitError, Result};
use crate::nn::{Bound, Conv, Init, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};
use crate::wim::{inject, Extractor};

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<TransformerBlock>,
    pub down: Option<Conv>,
}

/// One decoder level `l`: 2x2 stride-2 transposed conv from level `l+1`,
/// BIM on the encoder skips, 1x1 reduction of `[up, F_sl]`, attention blocks.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub bim: Bim,
    pub reduce: Linear,
    pub blocks: Vec<TransformerBlock>,
}

/// Network output for one image; `restored` is `degraded + residual`, unclamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration<T> {
    pub restored: Tensor<T>,
    pub residual: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    pub in_conv: Conv,
    pub extractor: Extractor,
    pub encoder: Vec<EncoderLevel>,
    /// Deepest level first.
    pub decoder: Vec<DecoderLevel>,
    pub out_conv: Conv,
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction: the same config and seed give bit-identical parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let c0 = cfg.base_channels;
        let m = cfg.window_size;
        let in_conv = Conv::new(&mut store, &mut init, "in_conv", 3, 3, c0, Conv2dSpec::same(3), true);
        let extractor = Extractor::new(&mut store, &mut init, "extractor", &cfg.extractor, 3)?;

        let mut encoder = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let blocks = (0..cfg.block_counts[l])
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &mut init,
                        &format!("enc{l}.block{i}"),
                        c,
                        cfg.head_counts[l],
                        m,
                        cfg.ffn_expand,
                        cfg.encoder_attention,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let down = (l + 1 < cfg.levels).then(|| {
                Conv::new(
                    &mut store,
                    &mut init,
                    &format!("enc{l}.down"),
                    4,
                    c,
                    2 * c,
                    Conv2dSpec::new(2, 1, 1),
                    true,
                )
            });
            encoder.push(EncoderLevel { blocks, down });
        }

        let mut decoder = Vec::with_capacity(cfg.levels.saturating_sub(1));
        for l in (0..cfg.levels.saturating_sub(1)).rev() {
            let c = cfg.channels(l);
            let up_w = store.add(format!("dec{l}.up.w"), init.fan_in_uniform(&[2 * c, 4 * c], 2 * c));
            let up_b = store.add(format!("dec{l}.up.b"), init.fan_in_uniform(&[c], 2 * c));
            let bim = Bim::new(&mut store, &mut init, &format!("dec{l}.bim"), c);
            let reduce = Linear::new(&mut store, &mut init, &format!("dec{l}.reduce"), 2 * c, c, true);
            let blocks = (0..cfg.block_counts[l])
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &mut init,
                        &format!("dec{l}.block{i}"),
                        c,
                        cfg.head_counts[l],
                        m,
                        cfg.ffn_expand,
                        true,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLevel {
                level: l,
                up_w,
                up_b,
                bim,
                reduce,
                blocks,
            });
        }

        let out_conv = Conv::zeroed(&mut store, "out_conv", 3, c0, 3, Conv2dSpec::same(3));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            in_conv,
            extractor,
            encoder,
            decoder,
            out_conv,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn bim_count(&self) -> usize {
        self.decoder.len()
    }

    /// Inference: restores one `H x W x 3` image without recording gradients.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Restoration<T>> {
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.store, false);
        let x = tape.constant(image.clone());
        let (restored, residual) = self.forward_var(&b, &x, None)?;
        Ok(Restoration {
            restored: restored.value().clone(),
            residual: residual.value().clone(),
        })
    }

    /// Differentiable forward. Returns `(restored, residual)` at the input's
    /// extents. `features`, when given, replaces the extractor output and must
    /// match the input's extents with `C_d` channels.
    pub fn forward_var<'t>(
        &self,
        b: &Bound<'t, T>,
        image: &Var<'t, T>,
        features: Option<&Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (h, w, c) = image.value().hwc()?;
        if c != 3 {
            return Err(HitError::Contract(format!("expected an RGB image, got {c} channels")));
        }
        let tape = b.tape();
        let mult = self.cfg.pad_multiple();
        let (ph, pw) = (h.div_ceil(mult) * mult - h, w.div_ceil(mult) * mult - w);
        let x = image.pad_reflect(ph, pw)?;

        let f0 = {
            let _s = tape.scope("in_conv");
            self.in_conv.forward(b, &x)?
        };
        let fd = match features {
            Some(f) => {
                let (fh, fw, fc) = f.value().hwc()?;
                if (fh, fw, fc) != (h, w, self.cfg.extractor.output_channels()) {
                    return Err(HitError::Alignment(format!(
                        "external features {:?} do not match image {h}x{w} with {} channels",
                        f.shape(),
                        self.cfg.extractor.output_channels()
                    )));
                }
                f.pad_reflect(ph, pw)?
            }
            None => {
                let _s = tape.scope("extractor");
                self.extractor.forward(b, &x)?
            }
        };
        let mut feat = {
            let _s = tape.scope("wim");
            inject(&f0, &fd, self.cfg.window_size)?
        };

        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (l, level) in self.encoder.iter().enumerate() {
            let _s = tape.scope(&format!("encoder{l}"));
            for blk in &level.blocks {
                feat = blk.forward(b, &feat, self.cfg.encoder_attention)?;
            }
            skips.push(feat.clone());
            if let Some(down) = &level.down {
                feat = down.forward(b, &feat)?;
            }
        }

        for dec in &self.decoder {
            let l = dec.level;
            let _s = tape.scope(&format!("decoder{l}"));
            let up = upsample(b, &feat, dec.up_w, dec.up_b)?;
            let f_sl = {
                let _s = tape.scope("bim");
                let pair = CrossScalePair::new(skips[l].clone(), skips[l + 1].clone())?;
                dec.bim.forward(b, &pair)?
            };
            feat = dec.reduce.forward(b, &Var::concat_last(&[&up, &f_sl])?)?;
            for blk in &dec.blocks {
                feat = blk.forward(b, &feat, true)?;
            }
        }

        let residual = {
            let _s = tape.scope("out_conv");
            self.out_conv.forward(b, &feat)?.crop(h, w)?
        };
        let restored = image.add(&residual)?;
        Ok((restored, residual))
    }
}

/// 2x2 stride-2 transposed convolution, as a per-pixel linear map to a 2x2
/// block followed by depth-to-space.
fn upsample<'t, T: Scalar>(
    b: &Bound<'t, T>,
    x: &Var<'t, T>,
    w: ParamId,
    bias: ParamId,
) -> Result<Var<'t, T>> {
    let (h, wd, c) = x.value().hwc()?;
    let cout = c / 2;
    x.reshape(&[h * wd, c])?
        .matmul(b.p(w))?
        .reshape(&[h, wd, 2, 2, cout])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[2 * h, 2 * wd, cout])?
        .add_bcast(b.p(bias))
}
