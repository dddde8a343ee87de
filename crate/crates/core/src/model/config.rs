use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { image_size: 32, patch_size: 8, width: 64, layers: 2, heads: 4 }
    }
}

impl VisionConfig {
    pub fn patches(&self) -> usize {
        let p = self.image_size / self.patch_size;
        p * p
    }

    /// Sequence length including the CLS token.
    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub eot_id: u16,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { vocab_size: 64, max_len: 16, width: 64, layers: 2, heads: 4, eot_id: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        // Narrower than the encoders: the fusion tower is a training-time
        // regularizer discarded at inference, and its cost must stay a
        // fraction of the encoder cost. Per-modality input projections
        // adapt the encoder widths to the tower width.
        FusionConfig { blocks: 2, width: 32, heads: 2 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    /// Shared embedding dimension after the projection heads.
    pub embed_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vision.image_size % self.vision.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.vision.image_size, self.vision.patch_size
            )));
        }
        for (what, width, heads) in [
            ("vision", self.vision.width, self.vision.heads),
            ("text", self.text.width, self.text.heads),
            ("fusion", self.fusion.width, self.fusion.heads),
        ] {
            if width % heads != 0 {
                return Err(Error::Config(format!(
                    "{what} width {width} not divisible by {heads} heads"
                )));
            }
        }
        if self.fusion.blocks < 1 {
            return Err(Error::Config("fusion blocks must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Length of the concatenated fusion sequence.
    pub fn fusion_seq_len(&self) -> usize {
        self.vision.seq_len() + self.text.max_len
    }
}

impl ModelConfig {
    /// Tiny defaults: 32x32 images, patch 8, width 64, 2 layers, embed 64.
    pub fn desk(vocab_size: usize) -> Self {
        let mut cfg = ModelConfig { embed_dim: 64, ..Default::default() };
        cfg.text.vocab_size = vocab_size;
        cfg
    }
}
