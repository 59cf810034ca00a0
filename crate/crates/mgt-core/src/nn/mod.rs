//! Minimal differentiable computation layer: tensors, a gradient tape,
//! transformer blocks, AdamW, and checkpoint serialization.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC_CHECKPOINT};
pub use layers::{
    attention, default_heads, dropout_mask, encoder_forward, ffn, multi_head_attention,
    transformer_layer, AttentionParams, FfnParams, LayerNormParams, Mode, TransformerLayerParams,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
