//! Parameter storage and layers shared by the model components.

mod im2col;
mod layers;
pub mod ops;
mod params;

pub use layers::{key_padding_bias, Conv3x3, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use params::{Init, Param, ParamGroup, ParamStore};
