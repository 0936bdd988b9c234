use super::*;
use crate::attention::{multi_head_attention, MaskMode};
use crate::backbone::{
    AttentionParams, BlockParams, DenseAttention, FfnParams, LayerNormParams, TokenState,
};
use crate::numerics::{Tape, Tensor};
use crate::rng::Rng;

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal(0.0, std)).collect(),
    )
    .unwrap()
}

fn random_block(rng: &mut Rng, d: usize, ffn: usize) -> BlockParams {
    let s = 1.0 / (d as f64).sqrt();
    let ln = |rng: &mut Rng| LayerNormParams {
        gain: Tensor::vector((0..d).map(|_| rng.normal(1.0, 0.2)).collect()),
        bias: gaussian(rng, &[d], 0.1),
    };
    let ln1 = ln(rng);
    let ln2 = ln(rng);
    BlockParams {
        ln1,
        attn: AttentionParams {
            wq: gaussian(rng, &[d, d], s),
            bq: gaussian(rng, &[d], 0.1),
            wk: gaussian(rng, &[d, d], s),
            bk: gaussian(rng, &[d], 0.1),
            wv: gaussian(rng, &[d, d], s),
            bv: gaussian(rng, &[d], 0.1),
            wo: gaussian(rng, &[d, d], s),
            bo: gaussian(rng, &[d], 0.1),
        },
        ln2,
        ffn: FfnParams {
            w1: gaussian(rng, &[d, ffn], s),
            b1: gaussian(rng, &[ffn], 0.1),
            w2: gaussian(rng, &[ffn, d], 1.0 / (ffn as f64).sqrt()),
            b2: gaussian(rng, &[d], 0.1),
        },
    }
}

struct Instance {
    block: BlockParams,
    tokens: Tensor,
    cls_prompts: Tensor,
    cls_keys: Tensor,
    img_prompts: Tensor,
    img_keys: Tensor,
    heads: usize,
}

fn instance(rng: &mut Rng, config: &TcpaConfig, n: usize, d: usize, heads: usize) -> Instance {
    let lp = config.prompt_len;
    Instance {
        block: random_block(rng, d, 2 * d),
        tokens: gaussian(rng, &[1 + n, d], 1.0),
        cls_prompts: gaussian(rng, &[config.cls_pool_size * lp, d], 1.0),
        cls_keys: gaussian(rng, &[config.cls_pool_size, d], 1.0),
        img_prompts: gaussian(rng, &[config.img_pool_size * lp, d], 1.0),
        img_keys: gaussian(rng, &[config.img_pool_size, d], 1.0),
        heads,
    }
}

fn register<'a>(tape: &mut Tape<'a>, inst: &'a Instance) -> (TokenState, PoolVars) {
    let tokens = tape.constant_ref(&inst.tokens);
    let pools = PoolVars {
        cls_prompts: tape.constant_ref(&inst.cls_prompts),
        cls_keys: tape.constant_ref(&inst.cls_keys),
        img_prompts: tape.constant_ref(&inst.img_prompts),
        img_keys: tape.constant_ref(&inst.img_keys),
    };
    (
        TokenState {
            tokens,
            layer_index: 1,
        },
        pools,
    )
}

fn single_pass(inst: &Instance, config: &TcpaConfig, capture: bool) -> (Tensor, Vec<LayerRecord>) {
    let mut tape = Tape::new();
    let (state, pools) = register(&mut tape, inst);
    let mut hook = TcpaHook {
        pools: vec![pools],
        config,
        num_heads: inst.heads,
        capture,
        records: Vec::new(),
    };
    let out = crate::backbone::block_forward(&mut tape, state, &inst.block, &mut hook).unwrap();
    (tape.value(out.tokens).clone(), hook.records)
}

fn two_pass(inst: &Instance) -> Tensor {
    let mut tape = Tape::new();
    let (state, pools) = register(&mut tape, inst);
    let out = reference_two_pass(
        &mut tape,
        state,
        pools.cls_prompts,
        pools.img_prompts,
        &inst.block,
        inst.heads,
    )
    .unwrap();
    tape.value(out.tokens).clone()
}

fn one_per_role(mode: MaskMode, lp: usize) -> TcpaConfig {
    TcpaConfig {
        prompt_len: lp,
        cls_pool_size: 1,
        img_pool_size: 1,
        cls_top_k: 1,
        img_top_k: 1,
        mask_mode: mode,
        ..TcpaConfig::default()
    }
}

#[test]
fn pre_softmax_single_pass_equals_two_passes() {
    let mut rng = Rng::new(2024);
    for case in 0..20 {
        let config = one_per_role(MaskMode::PreSoftmaxAdditive, 1 + case % 2);
        let n = 1 + rng.below(8);
        let heads = 1 + case % 2;
        let inst = instance(&mut rng, &config, n, 4 * heads, heads);
        let (single, _) = single_pass(&inst, &config, false);
        let reference = two_pass(&inst);
        assert_eq!(single.shape(), &[1 + n, 4 * heads]);
        let err = single.max_abs_diff(&reference);
        assert!(err <= 1e-9, "case {case}: {err:e}");
    }
}

#[test]
fn post_softmax_departs_from_two_passes() {
    let mut rng = Rng::new(5);
    let config = one_per_role(MaskMode::PostSoftmaxMultiplicative, 1);
    let inst = instance(&mut rng, &config, 4, 8, 2);
    let (single, _) = single_pass(&inst, &config, false);
    assert!(single.max_abs_diff(&two_pass(&inst)) > 1e-6);
}

#[test]
fn capture_path_matches_fast_path_bitwise() {
    let mut rng = Rng::new(9);
    for mode in [
        MaskMode::PostSoftmaxMultiplicative,
        MaskMode::PreSoftmaxAdditive,
    ] {
        let config = TcpaConfig {
            prompt_len: 2,
            cls_pool_size: 3,
            img_pool_size: 4,
            cls_top_k: 2,
            img_top_k: 2,
            mask_mode: mode,
            ..TcpaConfig::default()
        };
        let inst = instance(&mut rng, &config, 5, 8, 2);
        let (fast, _) = single_pass(&inst, &config, false);
        let (slow, rec) = single_pass(&inst, &config, true);
        assert!(fast.bits_eq(&slow));
        assert_eq!(fast.shape(), &[6, 8]);
        let t = config.sequence_len(5);
        assert_eq!(rec[0].maps.len(), 2);
        assert_eq!(rec[0].maps[0].raw.shape(), &[t, t]);
        assert!(single_pass(&inst, &config, false).0.bits_eq(&fast));
    }
}

#[test]
fn effective_rows_are_stochastic_or_substochastic() {
    let mut rng = Rng::new(10);
    for mode in [
        MaskMode::PostSoftmaxMultiplicative,
        MaskMode::PreSoftmaxAdditive,
    ] {
        let config = TcpaConfig {
            cls_pool_size: 3,
            img_pool_size: 5,
            cls_top_k: 1,
            img_top_k: 2,
            mask_mode: mode,
            ..TcpaConfig::default()
        };
        let inst = instance(&mut rng, &config, 6, 8, 2);
        let (_, rec) = single_pass(&inst, &config, true);
        let mask = rec[0].mask.as_ref().unwrap();
        for maps in &rec[0].maps {
            for r in mask.layout.token_rows() {
                let s: f64 = maps.effective.row(r).iter().sum();
                match mode {
                    MaskMode::PreSoftmaxAdditive => assert!((s - 1.0).abs() < 1e-12),
                    MaskMode::PostSoftmaxMultiplicative => assert!(s <= 1.0 + 1e-12),
                }
                for (c, (&e, &m)) in maps
                    .effective
                    .row(r)
                    .iter()
                    .zip(mask.mask.row(r))
                    .enumerate()
                {
                    if m == 0.0 {
                        assert_eq!(e, 0.0, "row {r} col {c}");
                    } else if mode == MaskMode::PostSoftmaxMultiplicative {
                        assert_eq!(e, maps.raw.at(r, c));
                    }
                }
            }
        }
    }
}

#[test]
fn all_ones_mask_is_dense_attention_exactly() {
    let mut rng = Rng::new(11);
    let block = random_block(&mut rng, 8, 8);
    let x = gaussian(&mut rng, &[5, 8], 1.0);
    let ones = Tensor::filled(&[5, 5], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let dense = multi_head_attention(&mut tape, xv, xv, &block.attn, 2, None, false).unwrap();
    let dense = tape.value(dense.out).clone();
    for mode in [
        MaskMode::PostSoftmaxMultiplicative,
        MaskMode::PreSoftmaxAdditive,
    ] {
        let m = multi_head_attention(
            &mut tape,
            xv,
            xv,
            &block.attn,
            2,
            Some((&ones, mode)),
            false,
        )
        .unwrap();
        assert!(tape.value(m.out).bits_eq(&dense));
    }
}

#[test]
fn pre_softmax_three_token_hand_computation() {
    let d = 2;
    let attn = AttentionParams {
        wq: Tensor::eye(d),
        bq: Tensor::zeros(&[d]),
        wk: Tensor::eye(d),
        bk: Tensor::zeros(&[d]),
        wv: Tensor::eye(d),
        bv: Tensor::zeros(&[d]),
        wo: Tensor::eye(d),
        bo: Tensor::zeros(&[d]),
    };
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let mut mask = Tensor::filled(&[3, 3], 1.0);
    for r in 0..3 {
        mask.data_mut()[r * 3 + 1] = 0.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = multi_head_attention(
        &mut tape,
        xv,
        xv,
        &attn,
        1,
        Some((&mask, MaskMode::PreSoftmaxAdditive)),
        false,
    )
    .unwrap();
    let out = tape.value(out.out);
    let s = 1.0 / 2f64.sqrt();
    for r in 0..3 {
        let l0 = s * (x.at(r, 0) * 1.0);
        let l2 = s * (x.at(r, 0) + x.at(r, 1));
        let (e0, e2) = (l0.exp(), l2.exp());
        let (w0, w2) = (e0 / (e0 + e2), e2 / (e0 + e2));
        let want = [w0 + w2, w2];
        for (c, w) in want.iter().enumerate() {
            assert!((out.at(r, c) - w).abs() < 1e-15, "row {r}");
        }
    }
}

fn naive_attention(x: &Tensor, p: &AttentionParams, heads: usize, row: usize) -> Vec<f64> {
    let (t, d) = (x.rows(), x.cols());
    let dk = d / heads;
    let proj = |w: &Tensor, b: &Tensor, r: usize| -> Vec<f64> {
        (0..d)
            .map(|j| b.data()[j] + (0..d).map(|i| x.at(r, i) * w.at(i, j)).sum::<f64>())
            .collect()
    };
    let q = proj(&p.wq, &p.bq, row);
    let ks: Vec<_> = (0..t).map(|r| proj(&p.wk, &p.bk, r)).collect();
    let vs: Vec<_> = (0..t).map(|r| proj(&p.wv, &p.bv, r)).collect();
    let mut merged = vec![0.0; d];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let logits: Vec<f64> = ks
            .iter()
            .map(|k| cols.clone().map(|c| q[c] * k[c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (r, l) in logits.iter().enumerate() {
            let w = (l - mx).exp() / z;
            for c in cols.clone() {
                merged[c] += w * vs[r][c];
            }
        }
    }
    (0..d)
        .map(|j| p.bo.data()[j] + (0..d).map(|i| merged[i] * p.wo.at(i, j)).sum::<f64>())
        .collect()
}

fn layer_norm_rows(x: &Tensor, ln: &LayerNormParams) -> Tensor {
    let d = x.cols();
    let mut out = Vec::new();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::numerics::LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.push((v - mu) * inv * ln.gain.data()[j] + ln.bias.data()[j]);
        }
    }
    Tensor::matrix(x.rows(), d, out)
}

#[test]
fn zero_prompts_act_through_denominators_only() {
    let mut rng = Rng::new(12);
    let (n, d, heads) = (3, 4, 2);
    let mut block = random_block(&mut rng, d, 4);
    block.attn.bv = Tensor::zeros(&[d]);
    block.ln1.bias = Tensor::zeros(&[d]);
    for t in [
        &mut block.ffn.w1,
        &mut block.ffn.b1,
        &mut block.ffn.w2,
        &mut block.ffn.b2,
    ] {
        t.data_mut().fill(0.0);
    }
    let tokens = gaussian(&mut rng, &[1 + n, d], 1.0);
    let zero = Tensor::zeros(&[1, d]);

    let mut tape = Tape::new();
    let tv = tape.constant(tokens.clone());
    let (pc, pi) = (tape.constant(zero.clone()), tape.constant(zero.clone()));
    let state = TokenState {
        tokens: tv,
        layer_index: 1,
    };
    let out = reference_two_pass(&mut tape, state, pc, pi, &block, heads).unwrap();
    let got = tape.value(out.tokens).clone();

    // the prompt slot holds an all-zero token: zero value, bias-only key
    let mut rows = vec![tokens.row(0).to_vec(), vec![0.0; d]];
    rows.extend((1..=n).map(|r| tokens.row(r).to_vec()));
    let seq = Tensor::from_rows(&rows);
    let normed = layer_norm_rows(&seq, &block.ln1);
    for (out_row, seq_row) in std::iter::once((0, 0)).chain((1..=n).map(|m| (m, m + 1))) {
        let a = naive_attention(&normed, &block.attn, heads, seq_row);
        for (j, aj) in a.iter().enumerate() {
            let want = seq.at(seq_row, j) + aj;
            assert!((got.at(out_row, j) - want).abs() < 1e-12);
        }
    }
    // the extra zero-value token changes the output against plain attention
    let mut tape = Tape::new();
    let tv = tape.constant(tokens.clone());
    let plain = crate::backbone::block_forward(
        &mut tape,
        TokenState {
            tokens: tv,
            layer_index: 1,
        },
        &block,
        &mut DenseAttention { num_heads: heads },
    )
    .unwrap();
    assert!(tape.value(plain.tokens).max_abs_diff(&got) > 1e-6);
}

#[test]
fn each_pass_ignores_the_other_roles_prompt() {
    let mut rng = Rng::new(13);
    let config = one_per_role(MaskMode::PreSoftmaxAdditive, 1);
    let inst = instance(&mut rng, &config, 3, 4, 1);
    let base = two_pass(&inst);
    assert!(two_pass(&inst).bits_eq(&base));

    let mut other = Instance {
        img_prompts: gaussian(&mut rng, &[1, 4], 3.0),
        ..instance(&mut Rng::new(0), &config, 3, 4, 1)
    };
    other.block = inst.block.clone();
    other.tokens = inst.tokens.clone();
    other.cls_prompts = inst.cls_prompts.clone();
    let changed = two_pass(&other);
    assert_eq!(changed.row(0), base.row(0));
    assert_ne!(changed.row(1), base.row(1));

    other.img_prompts = inst.img_prompts.clone();
    other.cls_prompts = gaussian(&mut rng, &[1, 4], 3.0);
    let changed = two_pass(&other);
    assert_ne!(changed.row(0), base.row(0));
    assert_eq!(&changed.data()[4..], &base.data()[4..]);
}

#[test]
fn matching_uses_tokens_before_layer_norm() {
    let mut rng = Rng::new(14);
    let config = TcpaConfig {
        cls_pool_size: 4,
        img_pool_size: 6,
        ..TcpaConfig::default()
    };
    let inst = instance(&mut rng, &config, 5, 8, 2);
    let (_, rec) = single_pass(&inst, &config, false);
    let r = &rec[0];
    assert!(r.tokens.bits_eq(&inst.tokens));
    let direct = build_affinity(
        &Tensor::matrix(5, 8, inst.tokens.data()[8..].to_vec()),
        &inst.img_keys,
    );
    assert!(r
        .img_match
        .as_ref()
        .unwrap()
        .affinity
        .bits_eq(&direct.affinity));
    r.mask.as_ref().unwrap().verify(1, 2).unwrap();
}
