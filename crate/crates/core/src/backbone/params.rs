use std::path::Path;

use super::ModelConfig;
use crate::error::Result;
use crate::format::FormatError;
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::weights::ArraySet;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Query/key/value/output projections, applied as `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    /// Patch projection `[h·w·C × D]`.
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    /// Position encodings for the CLS slot and the N patch slots, `[(N+1) × D]`.
    pub pos: Tensor,
    /// Initial CLS vector, `[1 × D]`.
    pub cls: Tensor,
    pub blocks: Vec<BlockParams>,
    /// LayerNorm applied to the final CLS state before the head.
    pub norm: LayerNormParams,
    pub frozen: bool,
}

fn trunc_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.truncated_normal(INIT_STD))
            .collect(),
    )
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl BackboneParams {
    /// Seeded initialization: weights, position encodings and the CLS vector
    /// from a ±2σ truncated normal with σ = 0.02; biases zero; LayerNorm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let n = config.num_patches();
        let embed_w = trunc_matrix(&mut rng, config.patch_dim(), d);
        let pos = trunc_matrix(&mut rng, n + 1, d);
        let cls = trunc_matrix(&mut rng, 1, d);
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::identity(d),
                attn: AttentionParams {
                    wq: trunc_matrix(&mut rng, d, d),
                    bq: Tensor::zeros(&[d]),
                    wk: trunc_matrix(&mut rng, d, d),
                    bk: Tensor::zeros(&[d]),
                    wv: trunc_matrix(&mut rng, d, d),
                    bv: Tensor::zeros(&[d]),
                    wo: trunc_matrix(&mut rng, d, d),
                    bo: Tensor::zeros(&[d]),
                },
                ln2: LayerNormParams::identity(d),
                ffn: FfnParams {
                    w1: trunc_matrix(&mut rng, d, f),
                    b1: Tensor::zeros(&[f]),
                    w2: trunc_matrix(&mut rng, f, d),
                    b2: Tensor::zeros(&[d]),
                },
            })
            .collect();
        Self {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            pos,
            cls,
            blocks,
            norm: LayerNormParams::identity(d),
            frozen: true,
        }
    }

    /// Every array with its container name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.weight".into(), &self.embed_w),
            ("embed.bias".into(), &self.embed_b),
            ("pos_embed".into(), &self.pos),
            ("cls_token".into(), &self.cls),
        ];
        for (j, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{j}");
            out.extend([
                (format!("{p}.ln1.gain"), &b.ln1.gain),
                (format!("{p}.ln1.bias"), &b.ln1.bias),
                (format!("{p}.attn.wq"), &b.attn.wq),
                (format!("{p}.attn.bq"), &b.attn.bq),
                (format!("{p}.attn.wk"), &b.attn.wk),
                (format!("{p}.attn.bk"), &b.attn.bk),
                (format!("{p}.attn.wv"), &b.attn.wv),
                (format!("{p}.attn.bv"), &b.attn.bv),
                (format!("{p}.attn.wo"), &b.attn.wo),
                (format!("{p}.attn.bo"), &b.attn.bo),
                (format!("{p}.ln2.gain"), &b.ln2.gain),
                (format!("{p}.ln2.bias"), &b.ln2.bias),
                (format!("{p}.ffn.w1"), &b.ffn.w1),
                (format!("{p}.ffn.b1"), &b.ffn.b1),
                (format!("{p}.ffn.w2"), &b.ffn.w2),
                (format!("{p}.ffn.b2"), &b.ffn.b2),
            ]);
        }
        out.push(("norm.gain".into(), &self.norm.gain));
        out.push(("norm.bias".into(), &self.norm.bias));
        out
    }

    pub fn to_arrays(&self) -> ArraySet {
        let mut set = ArraySet::new();
        for (name, t) in self.named_tensors() {
            set.push(name, t.clone());
        }
        set
    }

    /// Rebuilds parameters from a container, checking every extent against
    /// `config`.
    pub fn from_arrays(config: &ModelConfig, mut set: ArraySet) -> Result<Self, FormatError> {
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let n = config.num_patches();
        let embed_w = set.take("embed.weight", &[config.patch_dim(), d])?;
        let embed_b = set.take("embed.bias", &[d])?;
        let pos = set.take("pos_embed", &[n + 1, d])?;
        let cls = set.take("cls_token", &[1, d])?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for j in 0..config.num_layers {
            let p = format!("blocks.{j}");
            let mut t = |s: &str, shape: &[usize]| set.take(&format!("{p}.{s}"), shape);
            blocks.push(BlockParams {
                ln1: LayerNormParams {
                    gain: t("ln1.gain", &[d])?,
                    bias: t("ln1.bias", &[d])?,
                },
                attn: AttentionParams {
                    wq: t("attn.wq", &[d, d])?,
                    bq: t("attn.bq", &[d])?,
                    wk: t("attn.wk", &[d, d])?,
                    bk: t("attn.bk", &[d])?,
                    wv: t("attn.wv", &[d, d])?,
                    bv: t("attn.bv", &[d])?,
                    wo: t("attn.wo", &[d, d])?,
                    bo: t("attn.bo", &[d])?,
                },
                ln2: LayerNormParams {
                    gain: t("ln2.gain", &[d])?,
                    bias: t("ln2.bias", &[d])?,
                },
                ffn: FfnParams {
                    w1: t("ffn.w1", &[d, f])?,
                    b1: t("ffn.b1", &[f])?,
                    w2: t("ffn.w2", &[f, d])?,
                    b2: t("ffn.b2", &[d])?,
                },
            });
        }
        let norm = LayerNormParams {
            gain: set.take("norm.gain", &[d])?,
            bias: set.take("norm.bias", &[d])?,
        };
        set.expect_empty()?;
        Ok(Self {
            embed_w,
            embed_b,
            pos,
            cls,
            blocks,
            norm,
            frozen: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_arrays().save(path)
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        Ok(Self::from_arrays(config, ArraySet::load(path)?)?)
    }

    /// Bitwise equality over every array.
    pub fn bits_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.bits_eq(y))
    }
}
