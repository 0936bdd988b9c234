//! Multi-head scaled dot-product attention with an optional 0/1 mask.

use crate::backbone::AttentionParams;
use crate::numerics::{kernels, NumericsError, Tape, Tensor, Var};

/// Logit assigned to masked entries in [`MaskMode::PreSoftmaxAdditive`].
pub const MASKED_LOGIT: f64 = -1e30;

/// Where a 0/1 mask enters the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// `Attn' = softmax(QKᵀ/√d) ⊙ M`, rows left unnormalized.
    #[default]
    PostSoftmaxMultiplicative,
    /// Masked logits replaced by a huge negative value before the softmax.
    PreSoftmaxAdditive,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PostSoftmaxMultiplicative => "post_softmax_multiplicative",
            Self::PreSoftmaxAdditive => "pre_softmax_additive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "post_softmax_multiplicative" | "post" => Some(Self::PostSoftmaxMultiplicative),
            "pre_softmax_additive" | "pre" => Some(Self::PreSoftmaxAdditive),
            _ => None,
        }
    }
}

/// Attention maps of one head: the plain softmax and what was actually
/// multiplied into the values.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    pub raw: Tensor,
    pub effective: Tensor,
}

pub struct AttentionOutput {
    /// `[queries × D]`
    pub out: Var,
    /// One entry per head when capture was requested.
    pub maps: Vec<HeadMaps>,
}

/// Attends `queries` (`[R × D]`) over `keys_values` (`[T × D]`).
///
/// `mask`, when given, is an `[R × T]` 0/1 matrix shared by every head.
pub fn multi_head_attention<'a>(
    tape: &mut Tape<'a>,
    queries: Var,
    keys_values: Var,
    params: &'a AttentionParams,
    num_heads: usize,
    mask: Option<(&Tensor, MaskMode)>,
    capture: bool,
) -> Result<AttentionOutput, NumericsError> {
    let d = tape.value(queries).cols();
    if !d.is_multiple_of(num_heads) {
        return Err(NumericsError::Dimension {
            op: "multi_head_attention",
            detail: format!("width {d} not divisible by {num_heads} heads"),
        });
    }
    let dk = d / num_heads;
    let (r, t) = (tape.value(queries).rows(), tape.value(keys_values).rows());
    if let Some((m, _)) = mask {
        if m.shape() != [r, t] {
            return Err(NumericsError::Dimension {
                op: "multi_head_attention",
                detail: format!("mask {:?} for {r} queries over {t} keys", m.shape()),
            });
        }
    }

    let project = |tape: &mut Tape<'a>, x: Var, w: &'a Tensor, b: &'a Tensor| {
        let w = tape.constant_ref(w);
        let b = tape.constant_ref(b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    };
    let q = project(tape, queries, &params.wq, &params.bq)?;
    let k = project(tape, keys_values, &params.wk, &params.bk)?;
    let v = project(tape, keys_values, &params.wv, &params.bv)?;

    let mask_var = mask.map(|(m, mode)| {
        let t = match mode {
            MaskMode::PostSoftmaxMultiplicative => m.clone(),
            MaskMode::PreSoftmaxAdditive => {
                let data = m
                    .data()
                    .iter()
                    .map(|&b| if b != 0.0 { 0.0 } else { MASKED_LOGIT })
                    .collect();
                Tensor::matrix(r, t, data)
            }
        };
        (tape.constant(t), mode)
    });

    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut maps = Vec::new();
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let weights = match mask_var {
            None => tape.softmax_rows(logits),
            Some((m, MaskMode::PostSoftmaxMultiplicative)) => {
                let a = tape.softmax_rows(logits);
                tape.mul(a, m)?
            }
            Some((m, MaskMode::PreSoftmaxAdditive)) => {
                let masked = tape.add(logits, m)?;
                tape.softmax_rows(masked)
            }
        };
        if capture {
            let raw = Tensor::matrix(r, t, kernels::softmax_rows(tape.value(logits).data(), t));
            maps.push(HeadMaps {
                raw,
                effective: tape.value(weights).clone(),
            });
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = project(tape, merged, &params.wo, &params.bo)?;
    Ok(AttentionOutput { out, maps })
}
