use crate::numerics::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolRole {
    Cls,
    Image,
}

impl PoolRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::Image => "img",
        }
    }
}

/// Per-layer set of (prompt block, key) pairs.
///
/// Entry `k` owns prompt rows `k·L_p .. (k+1)·L_p` and key row `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub role: PoolRole,
    /// 1-based block index the pool feeds.
    pub layer_index: usize,
    pub prompt_len: usize,
    /// `[size·L_p × D]`
    pub prompts: Tensor,
    /// `[size × D]`
    pub keys: Tensor,
}

impl PromptPool {
    /// Prompts and keys drawn from a standard normal.
    pub fn init(
        role: PoolRole,
        layer_index: usize,
        size: usize,
        prompt_len: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut draw = |rows: usize| {
            Tensor::matrix(
                rows,
                dim,
                (0..rows * dim).map(|_| rng.standard_normal()).collect(),
            )
        };
        let prompts = draw(size * prompt_len);
        let keys = draw(size);
        Self {
            role,
            layer_index,
            prompt_len,
            prompts,
            keys,
        }
    }

    pub fn size(&self) -> usize {
        self.keys.rows()
    }

    pub fn prompt_block(&self, k: usize) -> &[f64] {
        let w = self.prompts.cols() * self.prompt_len;
        &self.prompts.data()[k * w..(k + 1) * w]
    }

    pub fn key(&self, k: usize) -> &[f64] {
        self.keys.row(k)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.size()).map(|k| (self.prompt_block(k), self.key(k)))
    }
}
