use super::{BackboneParams, BlockParams, ModelConfig};
use crate::attention::multi_head_attention;
use crate::error::{Error, Result};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Token sequence between blocks: row 0 is the CLS token, rows 1..=N the
/// patch tokens. `layer_index` is the 1-based index of the block about to
/// consume it.
#[derive(Debug, Clone, Copy)]
pub struct TokenState {
    pub tokens: Var,
    pub layer_index: usize,
}

impl TokenState {
    pub fn cls<'t>(&self, tape: &'t Tape) -> &'t [f64] {
        tape.value(self.tokens).row(0)
    }

    pub fn num_patches(&self, tape: &Tape) -> usize {
        tape.value(self.tokens).rows() - 1
    }

    pub fn cls_var(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.select_rows(self.tokens, &[0])?)
    }
}

/// Splits an `[H × W × C]` image into row-major `[N × h·w·C]` patch vectors.
pub fn extract_patches(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let want = [config.image_h, config.image_w, config.channels];
    if image.shape() != want {
        return Err(NumericsError::Dimension {
            op: "patch_embed",
            detail: format!("image shape {:?}, expected {want:?}", image.shape()),
        }
        .into());
    }
    let (gr, gc) = config.grid();
    let (ph, pw, c) = (config.patch_h, config.patch_w, config.channels);
    let row_stride = config.image_w * c;
    let mut out = Vec::with_capacity(image.numel());
    let px = image.data();
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..ph {
                let start = (pr * ph + y) * row_stride + pc * pw * c;
                out.extend_from_slice(&px[start..start + pw * c]);
            }
        }
    }
    Ok(Tensor::matrix(gr * gc, config.patch_dim(), out))
}

/// Embeds an image into `[CLS; h_1 … h_N]` with position encodings added.
pub fn patch_embed<'a>(
    tape: &mut Tape<'a>,
    image: &Tensor,
    params: &'a BackboneParams,
    config: &ModelConfig,
) -> Result<TokenState> {
    let patches = tape.constant(extract_patches(image, config)?);
    let w = tape.constant_ref(&params.embed_w);
    let b = tape.constant_ref(&params.embed_b);
    let emb = tape.matmul(patches, w)?;
    let emb = tape.add_row(emb, b)?;
    let cls = tape.constant_ref(&params.cls);
    let seq = tape.concat_rows(&[cls, emb])?;
    let pos = tape.constant_ref(&params.pos);
    let tokens = tape.add(seq, pos)?;
    Ok(TokenState {
        tokens,
        layer_index: 1,
    })
}

/// Attention sub-layer of a block. Receives the pre-block tokens and their
/// LayerNorm'd version and returns one output row per token.
pub trait AttentionHook<'a> {
    fn attend(
        &mut self,
        tape: &mut Tape<'a>,
        block: &'a BlockParams,
        layer_index: usize,
        raw: Var,
        normed: Var,
    ) -> Result<Var>;
}

/// Plain multi-head self-attention over the tokens.
pub struct DenseAttention {
    pub num_heads: usize,
}

impl<'a> AttentionHook<'a> for DenseAttention {
    fn attend(
        &mut self,
        tape: &mut Tape<'a>,
        block: &'a BlockParams,
        _layer_index: usize,
        _raw: Var,
        normed: Var,
    ) -> Result<Var> {
        let out = multi_head_attention(
            tape,
            normed,
            normed,
            &block.attn,
            self.num_heads,
            None,
            false,
        )?;
        Ok(out.out)
    }
}

/// Returns its normalized input unchanged.
pub struct IdentityAttention;

impl<'a> AttentionHook<'a> for IdentityAttention {
    fn attend(
        &mut self,
        _tape: &mut Tape<'a>,
        _block: &'a BlockParams,
        _layer_index: usize,
        _raw: Var,
        normed: Var,
    ) -> Result<Var> {
        Ok(normed)
    }
}

/// Pre-norm block: `x + attn(LN₁ x)`, then `+ FFN(LN₂ ·)`.
pub fn block_forward<'a>(
    tape: &mut Tape<'a>,
    state: TokenState,
    block: &'a BlockParams,
    hook: &mut dyn AttentionHook<'a>,
) -> Result<TokenState> {
    block_forward_rows(tape, state, block, hook, None)
}

/// [`block_forward`] that carries only the `keep` rows past the attention
/// residual. Every later step is row-wise, so the kept rows are bitwise
/// equal to the same rows of the full block.
pub fn block_forward_rows<'a>(
    tape: &mut Tape<'a>,
    state: TokenState,
    block: &'a BlockParams,
    hook: &mut dyn AttentionHook<'a>,
    keep: Option<&[usize]>,
) -> Result<TokenState> {
    let x = state.tokens;
    let rows = tape.value(x).rows();
    let normed = layer_norm(tape, x, &block.ln1.gain, &block.ln1.bias)?;
    let attn = hook.attend(tape, block, state.layer_index, x, normed)?;
    if tape.value(attn).shape() != tape.value(x).shape() {
        return Err(Error::Contract(format!(
            "attention hook returned {:?} for {rows} tokens",
            tape.value(attn).shape()
        )));
    }
    let mut h = tape.add(x, attn)?;
    if let Some(rows) = keep {
        h = tape.select_rows(h, rows)?;
    }

    let n2 = layer_norm(tape, h, &block.ln2.gain, &block.ln2.bias)?;
    let w1 = tape.constant_ref(&block.ffn.w1);
    let b1 = tape.constant_ref(&block.ffn.b1);
    let w2 = tape.constant_ref(&block.ffn.w2);
    let b2 = tape.constant_ref(&block.ffn.b2);
    let f = tape.matmul(n2, w1)?;
    let f = tape.add_row(f, b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, w2)?;
    let f = tape.add_row(f, b2)?;
    let out = tape.add(h, f)?;
    Ok(TokenState {
        tokens: out,
        layer_index: state.layer_index + 1,
    })
}

pub(crate) fn layer_norm<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    gain: &'a Tensor,
    bias: &'a Tensor,
) -> Result<Var, NumericsError> {
    let g = tape.constant_ref(gain);
    let b = tape.constant_ref(bias);
    tape.layer_norm(x, g, b)
}

/// `y = head(c_{L+1})`: logits `[1 × classes]`, no softmax.
pub fn classify(tape: &mut Tape, cls_final: Var, head_w: Var, head_b: Var) -> Result<Var> {
    let z = tape.matmul(cls_final, head_w)?;
    Ok(tape.add_row(z, head_b)?)
}
