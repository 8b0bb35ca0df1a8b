//! Minimal network building blocks on top of candle tensors.

pub mod adamw;
pub mod conv;
pub mod layers;
pub mod params;

pub use adamw::{AdamW, AdamWConfig};
pub use conv::conv2d;
pub use layers::{silu, Conv2d, Embedding, Linear};
pub use params::{checksum, Builder, Init, ParamSource, ParamStore, TensorMap};
