//! Numeric building blocks of the segmentation add-ons: the depth-fused
//! adapter with exact gradients, the convolutional modality and
//! multi-class adapters, the depth positional embedding, a transformer
//! block showing where the adapters sit, the multi-scale prediction
//! decoder, and the checkpoint container that stores weights on disk.
//!
//! Everything here is plain f64 loops. The goal is a reference
//! implementation small enough to verify against finite differences and
//! hand-computed oracles, not a fast one.

pub mod activation;
pub mod adapter;
pub mod block;
pub mod checkpoint;
pub mod conv;
pub mod embed;
pub mod msp;
pub mod tensor;

pub use activation::Activation;
pub use adapter::{
    dfused_backward, dfused_forward, dfused_gradient_check, AdapterGradients, AdapterParams,
    GradCheckReport, TensorCheck, CHANNEL_REDUCTION, DEPTH_EXPANSION, GRAD_CHECK_STEP,
};
pub use block::{
    transformer_block_forward, AttentionParams, BlockAdapters, LayerNormParams, MlpParams,
    TransformerBlockParams, LAYER_NORM_EPS, MLP_EXPANSION,
};
pub use checkpoint::{
    adapter_from_checkpoint, adapter_to_checkpoint, checkpoint_bytes, parse_checkpoint,
    read_checkpoint, write_checkpoint, Checkpoint, NamedArray,
};
pub use conv::{
    madapter_forward, mcadapter_fuse, ConvKind, ConvLayer, ConvStack, Image2d,
    CONV_ADAPTER_EXPANSION, MADAPTER_OUT_CHANNELS,
};
pub use embed::{apply_depth_pos_embed, DepthPosEmbed};
pub use msp::{MspGenerator, MspOutputs, MSP_STAGES, MSP_UPSCALE_STEPS};
pub use tensor::{Mat, Tensor3, INIT_RANGE};
