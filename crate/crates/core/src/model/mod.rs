//! 3D masked autoencoder: patch tokens, fixed sinusoidal positions, random
//! masking and an asymmetric pre-norm transformer encoder/decoder.

mod config;
mod mask;
mod params;
mod patch;
mod posenc;
mod vit;

#[cfg(test)]
mod tests;

pub use config::ModelConfig;
pub use mask::{hidden_count, make_mask_plan, MaskPlan};
pub use params::{Bound, Init, ParamId, ParamLayout, ParamSpec, ParamStore};
pub use patch::{patchify, unpatchify, unpatchify_dims, unpatchify_var};
pub use posenc::positional_encoding_3d;
pub use vit::{attention_macs, encoder_attention_macs, EncoderOutput, MaskedVit3d, INTENSITY_SCALE};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("mask plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
