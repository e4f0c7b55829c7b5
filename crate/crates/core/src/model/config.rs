use serde::{Deserialize, Serialize};

use crate::error::{HitError, Result};
use crate::wim::ExtractorConfig;

/// Architecture of one variant. Level `l` runs at `1/2^l` resolution with
/// `2^l * base_channels` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub base_channels: usize,
    pub window_size: usize,
    pub levels: usize,
    pub block_counts: Vec<usize>,
    pub head_counts: Vec<usize>,
    pub encoder_attention: bool,
    pub ffn_expand: usize,
    pub extractor: ExtractorConfig,
}

impl ModelConfig {
    pub fn hit_t() -> Self {
        Self {
            name: "HIT-T".into(),
            base_channels: 16,
            window_size: 8,
            levels: 4,
            block_counts: vec![2, 2, 2, 2],
            head_counts: vec![1, 2, 4, 8],
            encoder_attention: false,
            ffn_expand: 4,
            extractor: ExtractorConfig::default(),
        }
    }

    pub fn hit_b() -> Self {
        Self {
            name: "HIT-B".into(),
            base_channels: 32,
            block_counts: vec![1, 2, 8, 8],
            ..Self::hit_t()
        }
    }

    /// Desk-scale variant for tests and smoke runs.
    pub fn hit_micro() -> Self {
        Self {
            name: "HIT-micro".into(),
            base_channels: 8,
            window_size: 4,
            block_counts: vec![1, 1, 1, 1],
            extractor: ExtractorConfig::from_pairs(&[(8, 1), (8, 2), (8, 1), (8, 1)]),
            ..Self::hit_t()
        }
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "hit-t" | "hit_t" | "t" => Ok(Self::hit_t()),
            "hit-b" | "hit_b" | "b" => Ok(Self::hit_b()),
            "hit-micro" | "hit_micro" | "micro" => Ok(Self::hit_micro()),
            _ => Err(HitError::Config(format!("unknown variant '{name}'"))),
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Inputs are reflect-padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        let unet = self.window_size << self.levels.saturating_sub(1);
        let stride = self.extractor.total_stride().max(1);
        unet / gcd(unet, stride) * stride
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HitError::Config(msg));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.block_counts.len() != self.levels || self.head_counts.len() != self.levels {
            return bad(format!(
                "{} levels need {} block counts and head counts, got {} and {}",
                self.levels,
                self.levels,
                self.block_counts.len(),
                self.head_counts.len()
            ));
        }
        if self.base_channels == 0 || self.window_size == 0 || self.ffn_expand == 0 {
            return bad("base_channels, window_size and ffn_expand must be positive".into());
        }
        for (l, &h) in self.head_counts.iter().enumerate() {
            if h == 0 || self.channels(l) % h != 0 {
                return bad(format!(
                    "level {l}: {} channels not divisible by {h} heads",
                    self.channels(l)
                ));
            }
        }
        self.extractor.validate()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
