use super::params::{Bound, Init, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// Token-wise affine map `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init.trunc_normal(&[fan_in, fan_out], 0.02));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    /// Applies to any tensor whose last axis is `fan_in`, keeping leading axes.
    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        if c != self.fan_in {
            return Err(HitError::Dimension {
                op: "linear",
                lhs: shape,
                rhs: vec![self.fan_in, self.fan_out],
            });
        }
        let rows = x.value().numel() / c;
        let mut y = x.reshape(&[rows, c])?.matmul(b.p(self.w))?;
        if let Some(bias) = self.b {
            y = y.add_bcast(b.p(bias))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        y.reshape(&out_shape)
    }
}

/// Convolution over an `H x W x C` map with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = k * k * cin_g;
        let w = store.add(format!("{name}.w"), init.fan_in_uniform(&[k, k, cin_g, cout], fan_in));
        let b = bias.then(|| store.add(format!("{name}.b"), init.fan_in_uniform(&[cout], fan_in)));
        Self { w, b, spec }
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[k, k, cin / spec.groups, cout]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Self { w, b, spec }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(b.p(self.w), self.spec)?;
        match self.b {
            Some(bias) => y.add_bcast(b.p(bias)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(b.p(self.gamma), b.p(self.beta), T::c(self.eps))
    }
}
