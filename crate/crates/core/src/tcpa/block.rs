use super::{assemble_mask, binarize_topk, build_affinity, MaskMatrix, MatchResult, TcpaConfig};
use crate::attention::{multi_head_attention, HeadMaps};
use crate::backbone::{
    block_forward, layer_norm, AttentionHook, BlockParams, DenseAttention, TokenState,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Tape handles of one layer's two pools.
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub cls_prompts: Var,
    pub cls_keys: Var,
    pub img_prompts: Var,
    pub img_keys: Var,
}

pub struct TcpaAttention {
    /// `[(1+N) × D]`, CLS row first.
    pub out: Var,
    pub cls_match: MatchResult,
    pub img_match: MatchResult,
    pub mask: MaskMatrix,
    /// Full `T × T` maps per head when captured.
    pub maps: Vec<HeadMaps>,
}

fn split_tokens(tokens: &Tensor) -> (Tensor, Tensor) {
    let d = tokens.cols();
    let n = tokens.rows() - 1;
    (
        Tensor::matrix(1, d, tokens.row(0).to_vec()),
        Tensor::matrix(n, d, tokens.data()[d..].to_vec()),
    )
}

fn prompted_sequence<'a>(
    tape: &mut Tape<'a>,
    normed: Var,
    prompts: &[Var],
    block: &'a BlockParams,
) -> Result<Var> {
    let n = tape.value(normed).rows() - 1;
    let cls = tape.select_rows(normed, &[0])?;
    let patches = tape.select_rows(normed, &(1..=n).collect::<Vec<_>>())?;
    let prompts = tape.concat_rows(prompts)?;
    let prompts = layer_norm(tape, prompts, &block.ln1.gain, &block.ln1.bias)?;
    Ok(tape.concat_rows(&[cls, prompts, patches])?)
}

/// Single masked attention pass over `[CLS | CLS prompts | image prompts |
/// patches]`.
///
/// `raw` are the tokens entering the block and drive matching; `normed` is
/// their LayerNorm'd form. Prompts are normalized with the same LayerNorm.
/// Only the CLS and patch output rows are returned. Without `capture` the
/// prompt query rows are skipped entirely, since their outputs are dropped.
#[allow(clippy::too_many_arguments)]
pub fn tcpa_block_attention<'a>(
    tape: &mut Tape<'a>,
    raw: Var,
    normed: Var,
    pools: &PoolVars,
    config: &TcpaConfig,
    block: &'a BlockParams,
    num_heads: usize,
    capture: bool,
) -> Result<TcpaAttention> {
    let tokens = tape.value(raw);
    if tokens.rows() < 2 {
        return Err(Error::Contract("token sequence has no patches".into()));
    }
    let n = tokens.rows() - 1;
    let (cls_row, patch_rows) = split_tokens(tokens);
    let dir = config.match_direction;
    let cls_match = binarize_topk(
        build_affinity(&cls_row, tape.value(pools.cls_keys)),
        config.cls_top_k,
        dir,
    );
    let img_match = binarize_topk(
        build_affinity(&patch_rows, tape.value(pools.img_keys)),
        config.img_top_k,
        dir,
    );
    let mask = assemble_mask(&cls_match, &img_match, config, n)?;
    let want_prompt_rows = mask.layout.prompt_rows();
    for (v, rows) in [
        (pools.cls_prompts, config.cls_pool_size * config.prompt_len),
        (pools.img_prompts, config.img_pool_size * config.prompt_len),
    ] {
        if tape.value(v).rows() != rows {
            return Err(Error::Contract(format!(
                "prompt pool has {} rows, expected {rows} of {want_prompt_rows}",
                tape.value(v).rows()
            )));
        }
    }

    let seq = prompted_sequence(tape, normed, &[pools.cls_prompts, pools.img_prompts], block)?;
    let (out, maps) = if capture {
        let a = multi_head_attention(
            tape,
            seq,
            seq,
            &block.attn,
            num_heads,
            Some((&mask.mask, config.mask_mode)),
            true,
        )?;
        (tape.select_rows(a.out, &mask.layout.token_rows())?, a.maps)
    } else {
        let rows = mask.token_rows();
        let a = multi_head_attention(
            tape,
            normed,
            seq,
            &block.attn,
            num_heads,
            Some((&rows, config.mask_mode)),
            false,
        )?;
        (a.out, Vec::new())
    };
    Ok(TcpaAttention {
        out,
        cls_match,
        img_match,
        mask,
        maps,
    })
}

/// Two separate passes through the whole block, one per prompt role: the
/// CLS output comes from `[c, p^c, h…]`, the patch outputs from
/// `[c, p^i, h…]`. Everything else computed is dropped.
pub fn reference_two_pass<'a>(
    tape: &mut Tape<'a>,
    state: TokenState,
    cls_prompt: Var,
    img_prompt: Var,
    block: &'a BlockParams,
    num_heads: usize,
) -> Result<TokenState> {
    let n = state.num_patches(tape);
    let lp = tape.value(cls_prompt).rows();
    if tape.value(img_prompt).rows() != lp {
        return Err(Error::Contract(
            "prompt lengths differ between roles".into(),
        ));
    }
    let cls = tape.select_rows(state.tokens, &[0])?;
    let patches = tape.select_rows(state.tokens, &(1..=n).collect::<Vec<_>>())?;
    let mut hook = DenseAttention { num_heads };
    let mut pass = |tape: &mut Tape<'a>, prompt: Var| -> Result<Var> {
        let seq = tape.concat_rows(&[cls, prompt, patches])?;
        let s = TokenState {
            tokens: seq,
            layer_index: state.layer_index,
        };
        Ok(block_forward(tape, s, block, &mut hook)?.tokens)
    };
    let first = pass(tape, cls_prompt)?;
    let second = pass(tape, img_prompt)?;
    let c = tape.select_rows(first, &[0])?;
    let h = tape.select_rows(second, &(1 + lp..1 + lp + n).collect::<Vec<_>>())?;
    Ok(TokenState {
        tokens: tape.concat_rows(&[c, h])?,
        layer_index: state.layer_index + 1,
    })
}

/// Everything a TCPA layer observed during one forward pass.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub layer_index: usize,
    /// Tokens entering the block, the matching query.
    pub tokens: Tensor,
    pub cls_match: Option<MatchResult>,
    pub img_match: Option<MatchResult>,
    pub mask: Option<MaskMatrix>,
    pub maps: Vec<HeadMaps>,
}

/// Attention hook running TCPA in every block, one [`PoolVars`] per layer.
pub struct TcpaHook<'c> {
    pub pools: Vec<PoolVars>,
    pub config: &'c TcpaConfig,
    pub num_heads: usize,
    pub capture: bool,
    pub records: Vec<LayerRecord>,
}

impl<'a> AttentionHook<'a> for TcpaHook<'_> {
    fn attend(
        &mut self,
        tape: &mut Tape<'a>,
        block: &'a BlockParams,
        layer_index: usize,
        raw: Var,
        normed: Var,
    ) -> Result<Var> {
        let pools = self
            .pools
            .get(layer_index - 1)
            .ok_or_else(|| Error::Contract(format!("no prompt pools for layer {layer_index}")))?;
        let tokens = tape.value(raw).clone();
        let r = tcpa_block_attention(
            tape,
            raw,
            normed,
            pools,
            self.config,
            block,
            self.num_heads,
            self.capture,
        )?;
        self.records.push(LayerRecord {
            layer_index,
            tokens,
            cls_match: Some(r.cls_match),
            img_match: Some(r.img_match),
            mask: Some(r.mask),
            maps: r.maps,
        });
        Ok(r.out)
    }
}

/// Prompts of both pools visible to every token, with no matching or mask.
pub struct DensePromptHook {
    /// Per layer, the `[P × D]` prompt rows.
    pub prompts: Vec<Var>,
    pub num_heads: usize,
    pub capture: bool,
    pub records: Vec<LayerRecord>,
}

impl<'a> AttentionHook<'a> for DensePromptHook {
    fn attend(
        &mut self,
        tape: &mut Tape<'a>,
        block: &'a BlockParams,
        layer_index: usize,
        raw: Var,
        normed: Var,
    ) -> Result<Var> {
        let prompts = *self
            .prompts
            .get(layer_index - 1)
            .ok_or_else(|| Error::Contract(format!("no prompts for layer {layer_index}")))?;
        let n = tape.value(raw).rows() - 1;
        let p = tape.value(prompts).rows();
        let seq = prompted_sequence(tape, normed, &[prompts], block)?;
        let (out, maps) = if self.capture {
            let a = multi_head_attention(tape, seq, seq, &block.attn, self.num_heads, None, true)?;
            let rows: Vec<usize> = std::iter::once(0).chain(1 + p..1 + p + n).collect();
            (tape.select_rows(a.out, &rows)?, a.maps)
        } else {
            let a =
                multi_head_attention(tape, normed, seq, &block.attn, self.num_heads, None, false)?;
            (a.out, Vec::new())
        };
        self.records.push(LayerRecord {
            layer_index,
            tokens: tape.value(raw).clone(),
            cls_match: None,
            img_match: None,
            mask: None,
            maps,
        });
        Ok(out)
    }
}
