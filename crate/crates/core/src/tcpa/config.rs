use crate::attention::MaskMode;
use crate::error::{Error, Result};

/// Which end of the cosine-distance ranking a token selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchDirection {
    /// Smallest distances win.
    #[default]
    MostSimilar,
    /// Largest distances win, the literal reading of the top-K rule.
    LargestDistance,
}

impl MatchDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MostSimilar => "most_similar",
            Self::LargestDistance => "largest_distance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "most_similar" => Some(Self::MostSimilar),
            "largest_distance" | "paper_literal_largest_distance" => Some(Self::LargestDistance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpaConfig {
    /// Tokens per pool entry.
    pub prompt_len: usize,
    pub cls_pool_size: usize,
    pub img_pool_size: usize,
    pub cls_top_k: usize,
    pub img_top_k: usize,
    pub match_direction: MatchDirection,
    pub mask_mode: MaskMode,
}

impl Default for TcpaConfig {
    fn default() -> Self {
        Self {
            prompt_len: 1,
            cls_pool_size: 10,
            img_pool_size: 20,
            cls_top_k: 1,
            img_top_k: 2,
            match_direction: MatchDirection::MostSimilar,
            mask_mode: MaskMode::PostSoftmaxMultiplicative,
        }
    }
}

impl TcpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if self.cls_top_k == 0 || self.cls_top_k > self.cls_pool_size {
            return Err(Error::Config(format!(
                "cls_top_k must lie in [1, {}], got {}",
                self.cls_pool_size, self.cls_top_k
            )));
        }
        if self.img_top_k == 0 || self.img_top_k > self.img_pool_size {
            return Err(Error::Config(format!(
                "img_top_k must lie in [1, {}], got {}",
                self.img_pool_size, self.img_top_k
            )));
        }
        Ok(())
    }

    /// Full attention extent `1 + N_c·L_p + N_i·L_p + N`.
    pub fn sequence_len(&self, num_patches: usize) -> usize {
        1 + (self.cls_pool_size + self.img_pool_size) * self.prompt_len + num_patches
    }
}
