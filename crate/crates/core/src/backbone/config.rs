use crate::error::{Error, Result};

/// Dimensional hyperparameters of the frozen transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    /// 32×32×3 images in 4×4 patches (64 tokens), width 64, 4 blocks of 4 heads.
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_h: 4,
            patch_w: 4,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch_h) || !self.image_w.is_multiple_of(self.patch_w)
        {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible into {}×{} patches",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_h, self.image_w / self.patch_w)
    }

    /// N = (H/h)·(W/w)
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened patch length h·w·C.
    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}
