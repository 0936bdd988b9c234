//! The trainable set Φ and the full forward pass of the prompted model.

use std::path::Path;

use crate::attention::multi_head_attention;
use crate::backbone::{
    block_forward_rows, classify, layer_norm, patch_embed, AttentionHook, BackboneParams,
    BlockParams, ModelConfig, TokenState,
};
use crate::error::{Error, Result};
use crate::format::FormatError;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::tcpa::{
    DensePromptHook, LayerRecord, PoolRole, PoolVars, PromptPool, TcpaConfig, TcpaHook,
};
use crate::weights::ArraySet;

/// How prompts enter the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptMode {
    /// Matched prompts behind the role mask.
    #[default]
    Tcpa,
    /// Every prompt visible to every token, no matching.
    Dense,
    /// No prompts; only the head trains (linear probe).
    None,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tcpa => "tcpa",
            Self::Dense => "dense",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tcpa" => Some(Self::Tcpa),
            "dense" => Some(Self::Dense),
            "none" | "linear_probe" => Some(Self::None),
            _ => None,
        }
    }
}

/// Frozen backbone plus the structural settings shared by every pass.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tcpa: TcpaConfig,
    pub mode: PromptMode,
    pub backbone: BackboneParams,
}

/// Everything that trains: per-layer CLS and image pools and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi {
    pub cls_pools: Vec<PromptPool>,
    pub img_pools: Vec<PromptPool>,
    /// `[D × classes]`
    pub head_w: Tensor,
    /// `[classes]`
    pub head_b: Tensor,
}

const POOL_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

impl Phi {
    /// Pools are omitted in [`PromptMode::None`]. The head comes from its own
    /// random stream, so every mode starts from the same head.
    pub fn init(model: &Model, num_classes: usize, seed: u64) -> Self {
        let d = model.config.embed_dim;
        let t = &model.tcpa;
        let (mut cls_pools, mut img_pools) = (Vec::new(), Vec::new());
        if model.mode != PromptMode::None {
            let mut rng = Rng::derived(seed, POOL_STREAM);
            for j in 1..=model.config.num_layers {
                cls_pools.push(PromptPool::init(
                    PoolRole::Cls,
                    j,
                    t.cls_pool_size,
                    t.prompt_len,
                    d,
                    &mut rng,
                ));
                img_pools.push(PromptPool::init(
                    PoolRole::Image,
                    j,
                    t.img_pool_size,
                    t.prompt_len,
                    d,
                    &mut rng,
                ));
            }
        }
        let mut rng = Rng::derived(seed, HEAD_STREAM);
        let head_w = Tensor::matrix(
            d,
            num_classes,
            (0..d * num_classes)
                .map(|_| rng.truncated_normal(0.02))
                .collect(),
        );
        Self {
            cls_pools,
            img_pools,
            head_w,
            head_b: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.numel()
    }

    /// Every tensor with its container name. This order is the order of
    /// gradients and optimizer moments.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (c, i) in self.cls_pools.iter().zip(&self.img_pools) {
            let j = c.layer_index;
            out.push((format!("pools.{j}.cls.prompts"), &c.prompts));
            out.push((format!("pools.{j}.cls.keys"), &c.keys));
            out.push((format!("pools.{j}.img.prompts"), &i.prompts));
            out.push((format!("pools.{j}.img.keys"), &i.keys));
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, i) in self.cls_pools.iter_mut().zip(self.img_pools.iter_mut()) {
            out.push(&mut c.prompts);
            out.push(&mut c.keys);
            out.push(&mut i.prompts);
            out.push(&mut i.keys);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((n, x), (m, y))| n == m && x.bits_eq(y))
    }

    pub fn to_arrays(&self) -> ArraySet {
        let mut set = ArraySet::new();
        for (name, t) in self.named_tensors() {
            set.push(name, t.clone());
        }
        set
    }

    /// Rebuilds Φ for `model`, checking every extent.
    pub fn from_arrays(model: &Model, mut set: ArraySet) -> Result<Self, FormatError> {
        let d = model.config.embed_dim;
        let t = &model.tcpa;
        let lp = t.prompt_len;
        let (mut cls_pools, mut img_pools) = (Vec::new(), Vec::new());
        if model.mode != PromptMode::None {
            for j in 1..=model.config.num_layers {
                for (role, size) in [
                    (PoolRole::Cls, t.cls_pool_size),
                    (PoolRole::Image, t.img_pool_size),
                ] {
                    let p = format!("pools.{j}.{}", role.as_str());
                    let pool = PromptPool {
                        role,
                        layer_index: j,
                        prompt_len: lp,
                        prompts: set.take(&format!("{p}.prompts"), &[size * lp, d])?,
                        keys: set.take(&format!("{p}.keys"), &[size, d])?,
                    };
                    match role {
                        PoolRole::Cls => cls_pools.push(pool),
                        PoolRole::Image => img_pools.push(pool),
                    }
                }
            }
        }
        let classes = match set.get("head.bias") {
            Some(b) if b.rank() == 1 => b.numel(),
            Some(b) => {
                return Err(FormatError::ShapeTable(format!(
                    "array 'head.bias' has shape {:?}, expected a vector",
                    b.shape()
                )))
            }
            None => return Err(FormatError::ShapeTable("missing array 'head.bias'".into())),
        };
        let head_w = set.take("head.weight", &[d, classes])?;
        let head_b = set.take("head.bias", &[classes])?;
        set.expect_empty()?;
        Ok(Self {
            cls_pools,
            img_pools,
            head_w,
            head_b,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_arrays().save(path)
    }

    pub fn load(path: &Path, model: &Model) -> Result<Self> {
        Ok(Self::from_arrays(model, ArraySet::load(path)?)?)
    }
}

/// Φ registered on one tape.
#[derive(Debug, Clone)]
pub struct PhiVars {
    pub pools: Vec<PoolVars>,
    pub head_w: Var,
    pub head_b: Var,
    /// Same order as [`Phi::named_tensors`].
    pub all: Vec<Var>,
}

impl PhiVars {
    /// Tracked leaves when `trainable`, borrowed constants otherwise.
    pub fn register<'a>(tape: &mut Tape<'a>, phi: &'a Phi, trainable: bool) -> Self {
        let all: Vec<Var> = phi
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant_ref(t)
                }
            })
            .collect();
        let pools = all
            .chunks_exact(4)
            .take(phi.cls_pools.len())
            .map(|c| PoolVars {
                cls_prompts: c[0],
                cls_keys: c[1],
                img_prompts: c[2],
                img_keys: c[3],
            })
            .collect();
        let n = all.len();
        Self {
            pools,
            head_w: all[n - 2],
            head_b: all[n - 1],
            all,
        }
    }
}

pub struct ForwardPass {
    /// `[1 × classes]`
    pub logits: Var,
    /// Normalized final CLS state, the classifier input.
    pub features: Var,
    /// One entry per block.
    pub records: Vec<LayerRecord>,
}

/// Plain attention that can still record its maps.
struct PlainHook {
    num_heads: usize,
    capture: bool,
    records: Vec<LayerRecord>,
}

impl<'a> AttentionHook<'a> for PlainHook {
    fn attend(
        &mut self,
        tape: &mut Tape<'a>,
        block: &'a BlockParams,
        layer_index: usize,
        raw: Var,
        normed: Var,
    ) -> Result<Var> {
        let a = multi_head_attention(
            tape,
            normed,
            normed,
            &block.attn,
            self.num_heads,
            None,
            self.capture,
        )?;
        self.records.push(LayerRecord {
            layer_index,
            tokens: tape.value(raw).clone(),
            cls_match: None,
            img_match: None,
            mask: None,
            maps: a.maps,
        });
        Ok(a.out)
    }
}

impl Model {
    pub fn new(
        config: ModelConfig,
        tcpa: TcpaConfig,
        mode: PromptMode,
        backbone: BackboneParams,
    ) -> Result<Self> {
        config.validate()?;
        if mode == PromptMode::Tcpa {
            tcpa.validate()?;
        }
        if !backbone.frozen {
            return Err(Error::Contract("backbone must be frozen".into()));
        }
        Ok(Self {
            config,
            tcpa,
            mode,
            backbone,
        })
    }

    /// Image to logits through every block.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        phi: &PhiVars,
        image: &Tensor,
        capture: bool,
    ) -> Result<ForwardPass> {
        if self.mode != PromptMode::None && phi.pools.len() != self.config.num_layers {
            return Err(Error::Contract(format!(
                "{} prompt pools for {} layers",
                phi.pools.len(),
                self.config.num_layers
            )));
        }
        let mut state = patch_embed(tape, image, &self.backbone, &self.config)?;
        let heads = self.config.num_heads;
        let records = match self.mode {
            PromptMode::Tcpa => {
                let mut hook = TcpaHook {
                    pools: phi.pools.clone(),
                    config: &self.tcpa,
                    num_heads: heads,
                    capture,
                    records: Vec::new(),
                };
                state = self.run_blocks(tape, state, &mut hook, capture)?;
                hook.records
            }
            PromptMode::Dense => {
                let mut prompts = Vec::with_capacity(phi.pools.len());
                for p in &phi.pools {
                    prompts.push(tape.concat_rows(&[p.cls_prompts, p.img_prompts])?);
                }
                let mut hook = DensePromptHook {
                    prompts,
                    num_heads: heads,
                    capture,
                    records: Vec::new(),
                };
                state = self.run_blocks(tape, state, &mut hook, capture)?;
                hook.records
            }
            PromptMode::None => {
                let mut hook = PlainHook {
                    num_heads: heads,
                    capture,
                    records: Vec::new(),
                };
                state = self.run_blocks(tape, state, &mut hook, capture)?;
                hook.records
            }
        };
        let cls = state.cls_var(tape)?;
        let norm = &self.backbone.norm;
        let features = layer_norm(tape, cls, &norm.gain, &norm.bias)?;
        let logits = classify(tape, features, phi.head_w, phi.head_b)?;
        Ok(ForwardPass {
            logits,
            features,
            records,
        })
    }

    /// Runs every block. Outside capture the last block carries only the
    /// CLS row through its feed-forward, since nothing else is read.
    fn run_blocks<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        mut state: TokenState,
        hook: &mut dyn AttentionHook<'a>,
        capture: bool,
    ) -> Result<TokenState> {
        let last = self.backbone.blocks.len().saturating_sub(1);
        for (j, b) in self.backbone.blocks.iter().enumerate() {
            let keep: Option<&[usize]> = if j == last && !capture {
                Some(&[0])
            } else {
                None
            };
            state = block_forward_rows(tape, state, b, hook, keep)?;
        }
        Ok(state)
    }

    /// Final CLS features of one image, with no gradient bookkeeping.
    pub fn features(&self, phi: &Phi, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = PhiVars::register(&mut tape, phi, false);
        let f = self.forward(&mut tape, &vars, image, false)?;
        Ok(tape.value(f.features).data().to_vec())
    }

    /// Per-layer attention maps of one image.
    pub fn capture(&self, phi: &Phi, image: &Tensor) -> Result<Vec<LayerRecord>> {
        let mut tape = Tape::new();
        let vars = PhiVars::register(&mut tape, phi, false);
        Ok(self.forward(&mut tape, &vars, image, true)?.records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(mode: PromptMode) -> Model {
        let config = ModelConfig {
            image_h: 4,
            image_w: 4,
            channels: 2,
            patch_h: 2,
            patch_w: 2,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
        };
        let tcpa = TcpaConfig {
            cls_pool_size: 3,
            img_pool_size: 4,
            cls_top_k: 1,
            img_top_k: 2,
            ..TcpaConfig::default()
        };
        let backbone = BackboneParams::init(&config, 3);
        Model::new(config, tcpa, mode, backbone).unwrap()
    }

    #[test]
    fn phi_round_trips_through_container() {
        for mode in [PromptMode::Tcpa, PromptMode::Dense, PromptMode::None] {
            let m = tiny_model(mode);
            let phi = Phi::init(&m, 3, 4);
            let back =
                Phi::from_arrays(&m, ArraySet::decode(&phi.to_arrays().encode()).unwrap()).unwrap();
            assert!(back.bits_eq(&phi));
            let expected = if mode == PromptMode::None {
                2
            } else {
                2 + 4 * 2
            };
            assert_eq!(phi.named_tensors().len(), expected);
        }
    }

    #[test]
    fn phi_rejects_foreign_extents() {
        let m = tiny_model(PromptMode::Tcpa);
        let phi = Phi::init(&m, 3, 4);
        let mut other = tiny_model(PromptMode::Tcpa);
        other.tcpa.img_pool_size = 5;
        assert!(Phi::from_arrays(&other, phi.to_arrays()).is_err());
        let probe = tiny_model(PromptMode::None);
        assert!(Phi::from_arrays(&probe, phi.to_arrays()).is_err());
    }

    #[test]
    fn heads_agree_across_modes() {
        let a = Phi::init(&tiny_model(PromptMode::Tcpa), 3, 9);
        let b = Phi::init(&tiny_model(PromptMode::None), 3, 9);
        assert!(a.head_w.bits_eq(&b.head_w));
    }

    #[test]
    fn forward_shapes_for_every_mode() {
        let image = Tensor::filled(&[4, 4, 2], 0.5);
        for mode in [PromptMode::Tcpa, PromptMode::Dense, PromptMode::None] {
            let m = tiny_model(mode);
            let phi = Phi::init(&m, 3, 4);
            let mut tape = Tape::new();
            let vars = PhiVars::register(&mut tape, &phi, true);
            let f = m.forward(&mut tape, &vars, &image, true).unwrap();
            assert_eq!(tape.value(f.logits).shape(), &[1, 3]);
            assert_eq!(f.records.len(), 2);
            let t = match mode {
                PromptMode::None => 5,
                _ => m.tcpa.sequence_len(4),
            };
            assert_eq!(f.records[0].maps[0].raw.shape(), &[t, t]);
            assert_eq!(m.features(&phi, &image).unwrap().len(), 8);
        }
    }
}
