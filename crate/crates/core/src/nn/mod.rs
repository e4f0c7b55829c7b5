//! Parameter storage and the transformer building blocks.

mod attention;
mod block;
mod layers;
mod params;
mod window;

pub use attention::{relative_position_index, wmsa, wmsa_with_weights, WindowAttention};
pub use block::{Ffn, TransformerBlock};
pub use layers::{Conv, LayerNorm, Linear};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use window::{window_merge, window_merge_var, window_partition, window_partition_var, WindowStack};
