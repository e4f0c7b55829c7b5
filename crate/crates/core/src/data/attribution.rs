//! Integrated Gradients along the straight path from a baseline to the input,
//! approximated with a right Riemann sum.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, HitError, Result};
use crate::model::Model;
use crate::nn::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Attribution<T> {
    pub values: Tensor<T>,
    pub target_input: f64,
    pub target_baseline: f64,
}

impl<T: Scalar> Attribution<T> {
    pub fn total(&self) -> f64 {
        self.values.data().iter().map(|v| v.f64()).sum()
    }

    /// `|sum(attr) - (f(x) - f(x0))| / |f(x) - f(x0)|`; zero when both vanish.
    pub fn completeness_error(&self) -> f64 {
        let delta = self.target_input - self.target_baseline;
        let gap = (self.total() - delta).abs();
        if delta == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            gap / delta.abs()
        }
    }
}

/// `(x - x0) * (1/steps) * sum_{k=1..steps} grad f(x0 + k/steps (x - x0))`
/// for a scalar-valued `target`.
pub fn integrated_gradients<T, F>(
    target: F,
    input: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
) -> Result<Attribution<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Var<'t, T>) -> Result<Var<'t, T>>,
{
    if steps == 0 {
        return Err(HitError::Domain("integrated gradients needs steps >= 1".into()));
    }
    if input.shape() != baseline.shape() {
        return dim_err("integrated_gradients", input.shape(), baseline.shape());
    }
    let diff = input.sub(baseline)?;
    let eval = |x: &Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let v = target(&tape, &tape.constant(x.clone()))?;
        scalar_of(&v)
    };
    let mut acc = Tensor::zeros(input.shape());
    for k in 1..=steps {
        let t = T::c(k as f64 / steps as f64);
        let point = baseline.add(&diff.scale(t))?;
        let tape = Tape::new();
        let x = tape.leaf(point);
        let y = target(&tape, &x)?;
        scalar_of(&y)?;
        if !y.requires_grad() {
            continue;
        }
        let g = tape.backward(&y)?.wrt(&x);
        acc = acc.add(&g)?;
    }
    let values = diff.mul(&acc)?.scale(T::one() / T::c(steps as f64));
    Ok(Attribution {
        values,
        target_input: eval(input)?,
        target_baseline: eval(baseline)?,
    })
}

fn scalar_of<T: Scalar>(v: &Var<'_, T>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(HitError::Contract(format!(
            "attribution target must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.value().item().f64())
}

/// Rectangle `[y, y+h) x [x, x+w)` of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub fn whole(h: usize, w: usize) -> Self {
        Self { y: 0, x: 0, h, w }
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.y + self.h > h || self.x + self.w > w {
            return Err(HitError::Domain(format!(
                "region {self:?} does not fit inside {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Weights that turn a sum into the mean over this region and all channels.
    pub fn mean_mask<T: Scalar>(&self, h: usize, w: usize, c: usize) -> Tensor<T> {
        let wgt = T::one() / T::c((self.h * self.w * c) as f64);
        Tensor::from_fn(&[h, w, c], |i| {
            let (y, x) = (i / c / w, i / c % w);
            if (self.y..self.y + self.h).contains(&y) && (self.x..self.x + self.w).contains(&x) {
                wgt
            } else {
                T::zero()
            }
        })
    }
}

/// Mean of the restored image over `region` as a differentiable function of
/// the input image; model parameters are held constant.
pub fn region_mean_target<'m, T: Scalar>(
    model: &'m Model<T>,
    region: Region,
) -> impl for<'t> Fn(&'t Tape<T>, &Var<'t, T>) -> Result<Var<'t, T>> + 'm {
    move |tape, x| {
        let (h, w, c) = x.value().hwc()?;
        region.check(h, w)?;
        let b = Bound::new(tape, model.params(), false);
        let (restored, _) = model.forward_var(&b, x, None)?;
        let mask = tape.constant(region.mean_mask(h, w, c));
        Ok(restored.mul(&mask)?.sum())
    }
}

/// `sum(coef * x) + offset`: an affine target on which integrated gradients
/// is exact for any step count.
pub fn affine_target<T: Scalar>(
    coef: Tensor<T>,
    offset: T,
) -> impl for<'t> Fn(&'t Tape<T>, &Var<'t, T>) -> Result<Var<'t, T>> {
    move |tape, x| Ok(x.mul(&tape.constant(coef.clone()))?.sum().add_scalar(offset))
}

/// `|attr|` summed over channels, scaled so the largest pixel is 1, as a gray RGB image.
pub fn heat_image<T: Scalar>(attr: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = attr.hwc()?;
    let mag: Vec<f64> = attr
        .data()
        .chunks(c)
        .map(|p| p.iter().map(|v| v.f64().abs()).sum())
        .collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Tensor::new(
        vec![h, w, 3],
        mag.iter().flat_map(|&m| [T::c(m * scale); 3]).collect(),
    )
}
