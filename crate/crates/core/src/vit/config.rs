use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Architecture of the toy vision transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    /// Outlier threshold handed to every quantized layer.
    pub tau: f32,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            hidden_dim: 64,
            mlp_dim: 128,
            num_heads: 4,
            num_layers: 4,
            num_classes: 10,
            tau: 6.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.hidden_dim,
            self.mlp_dim,
            self.num_heads,
            self.num_layers,
        ];
        if dims.contains(&0) {
            return Err(param_err!("all ViT dimensions must be positive: {self:?}"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(param_err!(
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(param_err!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim,
                self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return Err(param_err!("need at least two classes"));
        }
        if self.tau.is_nan() {
            return Err(param_err!("tau must not be NaN"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Quantized matmuls per forward pass: fused QKV, attention output,
    /// MLP in and MLP out in every block.
    pub fn quantized_layers(&self) -> usize {
        4 * self.num_layers
    }
}
