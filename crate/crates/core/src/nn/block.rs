use super::attention::{wmsa, WindowAttention};
use super::layers::{Conv, LayerNorm, Linear};
use super::params::{Bound, Init, ParamStore};
use super::window::{window_merge_var, window_partition_var};
use crate::autodiff::Var;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Conv2dSpec;

/// Locally-enhanced feed-forward: linear expand, depthwise 3x3 over the
/// spatial layout, GELU, linear project.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub dw: Conv,
    pub fc2: Linear,
    pub hidden: usize,
}

impl Ffn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        expand: usize,
    ) -> Self {
        let hidden = channels * expand;
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), channels, hidden, true),
            dw: Conv::new(
                store,
                init,
                &format!("{name}.dw"),
                3,
                hidden,
                hidden,
                Conv2dSpec::depthwise(3, hidden),
                true,
            ),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, channels, true),
            hidden,
        }
    }

    /// `x` must be an `H x W x C` map; the depthwise stage needs the spatial layout.
    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.value().rank() != 3 {
            return Err(HitError::Contract(format!(
                "ffn needs spatial H x W x C tokens, got shape {:?}",
                x.shape()
            )));
        }
        let h = self.fc1.forward(b, x)?;
        let h = self.dw.forward(b, &h)?.gelu();
        self.fc2.forward(b, &h)
    }
}

/// Pre-norm transformer block: optional W-MSA sub-layer, then FFN sub-layer,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: Option<LayerNorm>,
    pub attn: Option<WindowAttention>,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub window: usize,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        expand: usize,
        with_attention: bool,
    ) -> Result<Self> {
        let (norm1, attn) = if with_attention {
            (
                Some(LayerNorm::new(store, &format!("{name}.norm1"), channels)),
                Some(WindowAttention::new(
                    store,
                    init,
                    &format!("{name}.attn"),
                    channels,
                    heads,
                    window,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            norm1,
            attn,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), channels, expand),
            window,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        x: &Var<'t, T>,
        use_attention: bool,
    ) -> Result<Var<'t, T>> {
        let mut x = x.clone();
        if use_attention {
            let (Some(norm1), Some(attn)) = (&self.norm1, &self.attn) else {
                return Err(HitError::Config(
                    "block was built without attention parameters".into(),
                ));
            };
            let y = norm1.forward(b, &x)?;
            let ws = wmsa(b, &window_partition_var(&y, self.window)?, attn)?;
            x = window_merge_var(&ws)?.add(&x)?;
        }
        let y = self.norm2.forward(b, &x)?;
        self.ffn.forward(b, &y)?.add(&x)
    }
}
