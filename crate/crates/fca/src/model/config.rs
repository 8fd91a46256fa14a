//! Model geometry and architecture configuration.

use crate::data::DataConfig;
use crate::error::{Error, Result};

/// Transformer and tokenizer geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer blocks D.
    pub depth: usize,
    /// Model width d.
    pub dim: usize,
    pub heads: usize,
    /// Spatial patch size.
    pub patch: usize,
    /// Frames per video f.
    pub frames: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    /// Text token length l_t.
    pub text_len: usize,
    pub vocab: usize,
    /// Diffusion step count T.
    pub t_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ModelConfig {
    /// Desk-scale geometry used by the synthetic task.
    pub fn desk_default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            patch: 4,
            frames: 8,
            img_h: 32,
            img_w: 32,
            channels: 3,
            text_len: 8,
            vocab: crate::data::Vocabulary::size(),
            t_max: 1000,
        }
    }

    /// Documented full-scale preset: 720x480 at 16 frames with a temporal
    /// compression of 4 gives 4 effective frames; text length 226 puts the
    /// frame-wise query count at 226 x 4 = 904 per module. Listed for
    /// reference; it is far outside what this engine is meant to run.
    pub fn paper_preset() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            patch: 8,
            frames: 4,
            img_h: 480,
            img_w: 720,
            channels: 3,
            text_len: 226,
            vocab: crate::data::Vocabulary::size(),
            t_max: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            )));
        }
        if self.text_len == 0 {
            return Err(Error::Config("text length must be >= 1".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / self.patch
    }

    /// Tokens per frame p.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// Flattened patch feature size, channels x patch^2.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// Learnable queries per frame-wise text conditioning module.
    pub fn ftc_queries(&self) -> usize {
        self.frames * self.text_len
    }

    pub fn video_shape(&self) -> Vec<usize> {
        vec![self.frames, self.channels, self.img_h, self.img_w]
    }

    pub fn data_config(&self, init_frames: usize) -> DataConfig {
        DataConfig {
            height: self.img_h,
            width: self.img_w,
            channels: self.channels,
            frames: self.frames,
            init_frames,
            text_len: self.text_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_valid_geometry() {
        let cfg = ModelConfig::desk_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens_per_frame(), 64);
        assert_eq!(cfg.video_tokens(), 512);
        assert_eq!(cfg.patch_dim(), 48);
        assert_eq!(cfg.ftc_queries(), 64);
    }

    #[test]
    fn paper_preset_query_count() {
        let cfg = ModelConfig::paper_preset();
        assert_eq!(cfg.ftc_queries(), 904);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = ModelConfig::desk_default();
        cfg.dim = 65;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default();
        cfg.img_h = 33;
        assert!(cfg.validate().is_err());
    }
}
