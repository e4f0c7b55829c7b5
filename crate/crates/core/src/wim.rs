//! Window-wise injection of high-frequency CNN features.
//!
//! A small residual CNN produces `F_d` from the degraded image; `F_0` and
//! `F_d` are split into aligned `m x m` windows, concatenated per window along
//! channels and average-pooled over channels back to `C`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{HitError, Result};
use crate::nn::{window_merge_var, window_partition_var, Bound, Conv, Init, ParamStore, WindowStack};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorStage {
    pub out_channels: usize,
    pub stride: usize,
}

/// 3x3 residual conv stages; the last stage's width is `C_d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub stages: Vec<ExtractorStage>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::from_pairs(&[(16, 1), (32, 2), (32, 1), (32, 1)])
    }
}

impl ExtractorConfig {
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            stages: pairs
                .iter()
                .map(|&(out_channels, stride)| ExtractorStage { out_channels, stride })
                .collect(),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(HitError::Config("extractor needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(HitError::Config(format!(
                    "extractor stage {i}: channels must be >= 1 and stride 1 or 2"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub stages: Vec<(Conv, bool)>,
    pub cfg: ExtractorConfig,
}

impl Extractor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ExtractorConfig,
        in_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let conv = Conv::new(
                store,
                init,
                &format!("{name}.stage{i}"),
                3,
                cin,
                s.out_channels,
                Conv2dSpec::new(s.stride, 1, 1),
                true,
            );
            stages.push((conv, cin == s.out_channels && s.stride == 1));
            cin = s.out_channels;
        }
        Ok(Self {
            stages,
            cfg: cfg.clone(),
        })
    }

    /// `F_d` at the input's extents: `H x W x C_d`.
    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, image: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w, _) = image.value().hwc()?;
        let stride = self.cfg.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(HitError::Contract(format!(
                "extractor input {h}x{w} not divisible by total stride {stride}"
            )));
        }
        let mut x = image.clone();
        for (conv, residual) in &self.stages {
            let y = conv.forward(b, &x)?.gelu();
            x = if *residual { y.add(&x)? } else { y };
        }
        if stride > 1 {
            x = x.resize_bilinear(h, w)?;
        }
        Ok(x)
    }
}

/// Split-align-fuse: window-partition `f0` (`C` channels) and `fd` (`C_d`),
/// concatenate matching windows on channels, pool `C + C_d -> C`, merge.
pub fn inject<'t, T: Scalar>(f0: &Var<'t, T>, fd: &Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let (h, w, c) = f0.value().hwc()?;
    let (hd, wd, _) = fd.value().hwc()?;
    if (h, w) != (hd, wd) {
        return Err(HitError::Alignment(format!(
            "backbone feature is {h}x{w} but injected feature is {hd}x{wd}"
        )));
    }
    let a = window_partition_var(f0, m)?;
    let d = window_partition_var(fd, m)?;
    let inter = Var::concat_last(&[&a.windows, &d.windows])?;
    let fused = inter.channel_pool(c)?;
    window_merge_var(&WindowStack {
        windows: fused,
        source_h: h,
        source_w: w,
        m,
    })
}

const FEATURE_MAGIC: &[u8; 4] = b"HITF";

/// Writes an `H x W x C` map as `"HITF"`, u32 LE `H, W, C`, then f32 LE values.
pub fn write_features<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let (h, w, c) = x.hwc()?;
    let mut buf = Vec::with_capacity(16 + 4 * x.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in x.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..4] != FEATURE_MAGIC {
        return Err(HitError::Format(format!("{} is not a HITF feature file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if buf.len() != 16 + 4 * n {
        return Err(HitError::Format(format!(
            "feature file declares {h}x{w}x{c} but holds {} payload bytes",
            buf.len() - 16
        )));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|b| T::c(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(vec![h, w, c], data)
}
