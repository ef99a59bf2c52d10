use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters of the masked autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    /// Fraction of patches hidden from the encoder.
    pub mask_ratio: f64,
    pub predictor_hidden: usize,
    /// Hidden width of the transformer MLPs as a multiple of the block width.
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// 96³ four-channel input, 8³ patches, 768×12 encoder, 512×8 decoder.
    pub fn paper() -> Self {
        Self {
            input_side: 96,
            patch_side: 8,
            channels: 4,
            enc_dim: 768,
            enc_blocks: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_blocks: 8,
            dec_heads: 8,
            mask_ratio: 0.75,
            predictor_hidden: 256,
            mlp_ratio: 4,
        }
    }

    /// 32³ single-channel input, 8³ patches, 64×4 encoder, 32×2 decoder.
    pub fn desk() -> Self {
        Self {
            input_side: 32,
            patch_side: 8,
            channels: 1,
            enc_dim: 64,
            enc_blocks: 4,
            enc_heads: 4,
            dec_dim: 32,
            dec_blocks: 2,
            dec_heads: 4,
            mask_ratio: 0.75,
            predictor_hidden: 256,
            mlp_ratio: 4,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side().pow(3)
    }

    pub fn patch_voxels(&self) -> usize {
        self.channels * self.patch_side.pow(3)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_side == 0 || self.input_side == 0 || self.input_side % self.patch_side != 0 {
            return bad(format!(
                "input side {} must be a positive multiple of patch side {}",
                self.input_side, self.patch_side
            ));
        }
        if self.num_patches() < 2 {
            return bad("need at least two patches".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.predictor_hidden == 0 {
            return bad("channels, mlp_ratio and predictor_hidden must be positive".into());
        }
        for (name, dim, heads) in [("encoder", self.enc_dim, self.enc_heads), ("decoder", self.dec_dim, self.dec_heads)] {
            if dim < 6 {
                return bad(format!("{name} width {dim} is below the 6 needed for 3D positional encoding"));
            }
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} heads {heads} must divide width {dim}"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        Ok(())
    }
}
