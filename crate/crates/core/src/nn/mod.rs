//! Minimal dense layers with hand-written backward passes over a flat
//! parameter store.

mod layers;
mod optim;
mod params;

pub use layers::{im2col, ChannelAttention, ChannelAttentionCache, Conv3x3, ConvHead, ConvHeadCache, Linear};
pub use optim::{clip_global_norm, AdamW};
pub use params::{Grads, ParamId, ParamSpec, ParamStore};
