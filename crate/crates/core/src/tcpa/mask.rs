use std::ops::Range;

use super::{MatchResult, TcpaConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Slot order of the full attention sequence:
/// `[CLS | CLS-pool prompts | image-pool prompts | image tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub prompt_len: usize,
    pub cls_pool_size: usize,
    pub img_pool_size: usize,
    pub num_patches: usize,
}

impl SlotLayout {
    pub fn new(config: &TcpaConfig, num_patches: usize) -> Self {
        Self {
            prompt_len: config.prompt_len,
            cls_pool_size: config.cls_pool_size,
            img_pool_size: config.img_pool_size,
            num_patches,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.prompt_rows() + self.num_patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompt_rows(&self) -> usize {
        (self.cls_pool_size + self.img_pool_size) * self.prompt_len
    }

    pub fn cls_prompts(&self) -> Range<usize> {
        1..1 + self.cls_pool_size * self.prompt_len
    }

    pub fn img_prompts(&self) -> Range<usize> {
        let s = self.cls_prompts().end;
        s..s + self.img_pool_size * self.prompt_len
    }

    pub fn patches(&self) -> Range<usize> {
        let s = self.img_prompts().end;
        s..s + self.num_patches
    }

    /// Sequence rows that belong to real tokens, in token order.
    pub fn token_rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.patches()).collect()
    }

    /// Slot name of every sequence row, for export sidecars.
    pub fn describe(&self) -> Vec<String> {
        let mut out = vec!["cls".to_string()];
        for (pool, n) in [
            ("cls_prompt", self.cls_pool_size),
            ("img_prompt", self.img_pool_size),
        ] {
            for k in 0..n {
                for l in 0..self.prompt_len {
                    out.push(format!("{pool}:{k}:{l}"));
                }
            }
        }
        out.extend((0..self.num_patches).map(|m| format!("patch:{m}")));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    /// `[T × T]` 0/1 entries.
    pub mask: Tensor,
    pub layout: SlotLayout,
}

impl MaskMatrix {
    /// Rows of the mask that real tokens use, `[(1+N) × T]`.
    pub fn token_rows(&self) -> Tensor {
        let t = self.layout.len();
        let mut data = Vec::with_capacity((1 + self.layout.num_patches) * t);
        for r in self.layout.token_rows() {
            data.extend_from_slice(self.mask.row(r));
        }
        Tensor::matrix(1 + self.layout.num_patches, t, data)
    }

    /// Checks the mask contract with `K_c`/`K_i` selections per row.
    pub fn verify(&self, cls_top_k: usize, img_top_k: usize) -> Result<()> {
        verify_mask(&self.mask, &self.layout, cls_top_k, img_top_k)
    }
}

/// Builds the `T × T` mask from the two binarized matchings.
pub fn assemble_mask(
    cls_match: &MatchResult,
    img_match: &MatchResult,
    config: &TcpaConfig,
    num_patches: usize,
) -> Result<MaskMatrix> {
    let layout = SlotLayout::new(config, num_patches);
    let (cls_bits, img_bits) = match (&cls_match.binarized, &img_match.binarized) {
        (Some(c), Some(i)) => (c, i),
        _ => {
            return Err(Error::Contract(
                "mask assembly needs binarized matches".into(),
            ))
        }
    };
    if cls_bits.shape() != [1, config.cls_pool_size] {
        return Err(Error::Contract(format!(
            "CLS match shape {:?}, expected [1, {}]",
            cls_bits.shape(),
            config.cls_pool_size
        )));
    }
    if img_bits.shape() != [num_patches, config.img_pool_size] {
        return Err(Error::Contract(format!(
            "image match shape {:?}, expected [{num_patches}, {}]",
            img_bits.shape(),
            config.img_pool_size
        )));
    }

    let t = layout.len();
    let lp = layout.prompt_len;
    let mut m = vec![0.0; t * t];
    let token_rows = layout.token_rows();
    for &r in &token_rows {
        for &c in &token_rows {
            m[r * t + c] = 1.0;
        }
    }
    let cls_start = layout.cls_prompts().start;
    for (k, &bit) in cls_bits.row(0).iter().enumerate() {
        for l in 0..lp {
            m[cls_start + k * lp + l] = bit;
        }
    }
    let img_start = layout.img_prompts().start;
    for (i, r) in layout.patches().enumerate() {
        for (k, &bit) in img_bits.row(i).iter().enumerate() {
            for l in 0..lp {
                m[r * t + img_start + k * lp + l] = bit;
            }
        }
    }
    Ok(MaskMatrix {
        mask: Tensor::matrix(t, t, m),
        layout,
    })
}

/// Checks the token rows of a mask: 0/1 entries, an all-ones token block,
/// block-broadcast prompt columns, and exact per-role cardinalities.
pub fn verify_mask(
    mask: &Tensor,
    layout: &SlotLayout,
    cls_top_k: usize,
    img_top_k: usize,
) -> Result<()> {
    let t = layout.len();
    if mask.shape() != [t, t] {
        return Err(Error::Contract(format!(
            "mask shape {:?}, expected [{t}, {t}]",
            mask.shape()
        )));
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("mask entry {v} is not 0/1")));
    }
    let token_rows = layout.token_rows();
    let lp = layout.prompt_len;
    for &r in &token_rows {
        let row = mask.row(r);
        if let Some(&c) = token_rows.iter().find(|&&c| row[c] != 1.0) {
            return Err(Error::Contract(format!("token block zero at ({r}, {c})")));
        }
        for range in [layout.cls_prompts(), layout.img_prompts()] {
            for block in row[range.clone()].chunks(lp) {
                if block.iter().any(|&b| b != block[0]) {
                    return Err(Error::Contract(format!("row {r} splits a prompt block")));
                }
            }
        }
        let (own, other, k) = if r == 0 {
            (layout.cls_prompts(), layout.img_prompts(), cls_top_k)
        } else {
            (layout.img_prompts(), layout.cls_prompts(), img_top_k)
        };
        let ones = row[own].iter().filter(|&&b| b == 1.0).count();
        if ones != k * lp {
            return Err(Error::Contract(format!(
                "row {r} has {ones} own-prompt ones, expected {}",
                k * lp
            )));
        }
        if row[other].iter().any(|&b| b != 0.0) {
            return Err(Error::Contract(format!(
                "row {r} reaches the other role's prompts"
            )));
        }
    }
    Ok(())
}
