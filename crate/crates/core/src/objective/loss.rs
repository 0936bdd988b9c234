use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::tcpa::{LayerRecord, PoolVars};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_i: 0.5,
            lambda_c: 0.5,
        }
    }
}

/// Scalar handles of the objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub pull_img: Var,
    pub pull_cls: Var,
}

/// Layer-averaged mean cosine distance between matched tokens and their keys.
fn pull_term(
    tape: &mut Tape,
    records: &[LayerRecord],
    pools: &[PoolVars],
    image_role: bool,
) -> Result<Var> {
    let mut per_layer = Vec::new();
    for r in records {
        let m = if image_role {
            &r.img_match
        } else {
            &r.cls_match
        };
        let Some(m) = m else { continue };
        let pool = pools
            .get(r.layer_index - 1)
            .ok_or_else(|| Error::Contract(format!("no pools for layer {}", r.layer_index)))?;
        let (keys, offset) = if image_role {
            (pool.img_keys, 1)
        } else {
            (pool.cls_keys, 0)
        };
        let pairs: Vec<(usize, usize)> = m
            .pairs()
            .into_iter()
            .map(|(i, k)| (i + offset, k))
            .collect();
        // matched token values enter as constants: only keys move
        let tokens = tape.constant(r.tokens.clone());
        let d = tape.cosine_distance_pairs(tokens, keys, &pairs)?;
        per_layer.push(tape.mean(d));
    }
    if per_layer.is_empty() {
        return Ok(tape.constant(crate::numerics::Tensor::scalar(0.0)));
    }
    let n = per_layer.len();
    let mut acc = per_layer[0];
    for &v in &per_layer[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64))
}

/// `CE + λ_i·pull_img + λ_c·pull_cls`, where each pull term averages the
/// cosine distance over matched pairs within a layer and then over layers.
pub fn composite_loss(
    tape: &mut Tape,
    logits: Var,
    label: usize,
    records: &[LayerRecord],
    pools: &[PoolVars],
    weights: LossWeights,
) -> Result<LossTerms> {
    let classes = tape.value(logits).numel();
    if label >= classes {
        return Err(Error::Contract(format!(
            "label {label} outside [0, {classes})"
        )));
    }
    if !(weights.lambda_i >= 0.0 && weights.lambda_c >= 0.0) {
        return Err(Error::Contract("pull weights must be non-negative".into()));
    }
    let ce = tape.cross_entropy(logits, label)?;
    let pull_img = pull_term(tape, records, pools, true)?;
    let pull_cls = pull_term(tape, records, pools, false)?;
    let wi = tape.scale(pull_img, weights.lambda_i);
    let wc = tape.scale(pull_cls, weights.lambda_c);
    let total = tape.add(ce, wi)?;
    let total = tape.add(total, wc)?;
    Ok(LossTerms {
        total,
        ce,
        pull_img,
        pull_cls,
    })
}
