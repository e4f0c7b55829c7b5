//! Seeded synthetic corruptions used to build training and evaluation pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clamp01;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationKind {
    GaussianNoise {
        sigma: f64,
    },
    /// Additive bright line segments; `angle` is in degrees from vertical.
    RainStreaks {
        count: usize,
        length: usize,
        angle: f64,
        intensity: f64,
    },
    BoxBlur {
        radius: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl Degradation {
    pub fn new(kind: DegradationKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HitError::Domain(m.into()));
        match self.kind {
            DegradationKind::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("gaussian_noise sigma must be finite and >= 0")
            }
            DegradationKind::RainStreaks { angle, intensity, .. }
                if !angle.is_finite() || !(0.0..=1.0).contains(&intensity) =>
            {
                bad("rain_streaks needs a finite angle and intensity in [0, 1]")
            }
            _ => Ok(()),
        }
    }

    /// Applied corruption before clamping to `[0, 1]`.
    pub fn apply_unclamped<T: Scalar>(&self, clean: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (h, w, c) = clean.hwc()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            DegradationKind::GaussianNoise { sigma } => {
                if sigma == 0.0 {
                    return Ok(clean.clone());
                }
                let normal = Normal::new(0.0, sigma).map_err(|e| HitError::Domain(e.to_string()))?;
                Ok(clean.map(|v| v + T::c(normal.sample(&mut rng))))
            }
            DegradationKind::RainStreaks {
                count,
                length,
                angle,
                intensity,
            } => {
                let mut out = clean.clone();
                let (dy, dx) = (angle.to_radians().cos(), angle.to_radians().sin());
                for _ in 0..count {
                    let y0 = rng.random_range(0.0..h as f64);
                    let x0 = rng.random_range(0.0..w as f64);
                    for s in 0..length {
                        let y = (y0 + dy * s as f64).round();
                        let x = (x0 + dx * s as f64).round();
                        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                            continue;
                        }
                        let at = (y as usize * w + x as usize) * c;
                        for v in &mut out.data_mut()[at..at + c] {
                            *v += T::c(intensity);
                        }
                    }
                }
                Ok(out)
            }
            DegradationKind::BoxBlur { radius } => box_blur(clean, radius),
        }
    }

    /// Corrupts `clean` and clamps to `[0, 1]`; deterministic in `seed`.
    pub fn apply<T: Scalar>(&self, clean: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(clamp01(&self.apply_unclamped(clean)?))
    }
}

/// Mean over a `(2r+1)^2` window with replicated edges.
fn box_blur<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Ok(x.clone());
    }
    let (h, w, c) = x.hwc()?;
    let norm = T::c(((2 * r + 1) * (2 * r + 1)) as f64);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![T::zero(); x.numel()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = T::zero();
                for dy in -(r as isize)..=r as isize {
                    let sy = clampi(y as isize + dy, h);
                    for dx in -(r as isize)..=r as isize {
                        let sx = clampi(xx as isize + dx, w);
                        acc += x.data()[(sy * w + sx) * c + ch];
                    }
                }
                out[(y * w + xx) * c + ch] = acc / norm;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}
