use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::MaskMode;
use crate::backbone::ModelConfig;
use crate::model::PromptMode;
use crate::objective::{OptimizerKind, TrainConfig};
use crate::par::Execution;
use crate::tcpa::{MatchDirection, TcpaConfig};
use crate::{Error, Result};

/// Every key a configuration may set, in the order the resolved echo lists
/// them.
pub const KEYS: &[&str] = &[
    "image_h",
    "image_w",
    "channels",
    "patch_h",
    "patch_w",
    "embed_dim",
    "num_layers",
    "num_heads",
    "ffn_dim",
    "prompt_mode",
    "prompt_len",
    "cls_pool_size",
    "img_pool_size",
    "cls_top_k",
    "img_top_k",
    "match_direction",
    "mask_mode",
    "lambda_i",
    "lambda_c",
    "epochs",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "seed",
    "optimizer",
    "schedule",
    "execution",
    "backbone_seed",
    "backbone",
    "dataset",
    "output_dir",
];

/// The one supported learning-rate schedule.
pub const SCHEDULE: &str = "cosine_annealing";

/// Everything a command needs, resolved from defaults, a config file and
/// `--set` overrides in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tcpa: TcpaConfig,
    pub train: TrainConfig,
    pub mode: PromptMode,
    /// Seed of the frozen random backbone when no `backbone` file is given.
    pub backbone_seed: u64,
    pub backbone: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            tcpa: TcpaConfig::default(),
            train: TrainConfig::default(),
            mode: PromptMode::Tcpa,
            backbone_seed: 0,
            backbone: None,
            dataset: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn choice<T>(key: &str, value: &str, parse: fn(&str) -> Option<T>, allowed: &[&str]) -> Result<T> {
    parse(value).ok_or_else(|| {
        Error::Config(format!(
            "{key}: {value:?} is not one of {}",
            allowed.join(", ")
        ))
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults, then `path` if given, then each `key=value` override.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies flat `key = value` lines. `#` starts a comment; blank lines
    /// are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key = value", n + 1))
            })?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!(
                    "{origin}:{}: duplicate key {k}",
                    n + 1
                )));
            }
            seen.push(k);
            self.set(k, v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.tcpa;
        let tr = &mut self.train;
        match key {
            "image_h" => m.image_h = number(key, value)?,
            "image_w" => m.image_w = number(key, value)?,
            "channels" => m.channels = number(key, value)?,
            "patch_h" => m.patch_h = number(key, value)?,
            "patch_w" => m.patch_w = number(key, value)?,
            "embed_dim" => m.embed_dim = number(key, value)?,
            "num_layers" => m.num_layers = number(key, value)?,
            "num_heads" => m.num_heads = number(key, value)?,
            "ffn_dim" => m.ffn_dim = number(key, value)?,
            "prompt_mode" => {
                self.mode = choice(
                    key,
                    value,
                    PromptMode::parse,
                    &["tcpa", "dense", "none", "linear_probe"],
                )?
            }
            "prompt_len" => t.prompt_len = number(key, value)?,
            "cls_pool_size" => t.cls_pool_size = number(key, value)?,
            "img_pool_size" => t.img_pool_size = number(key, value)?,
            "cls_top_k" => t.cls_top_k = number(key, value)?,
            "img_top_k" => t.img_top_k = number(key, value)?,
            "match_direction" => {
                t.match_direction = choice(
                    key,
                    value,
                    MatchDirection::parse,
                    &["most_similar", "largest_distance"],
                )?
            }
            "mask_mode" => {
                t.mask_mode = choice(
                    key,
                    value,
                    MaskMode::parse,
                    &["post_softmax_multiplicative", "pre_softmax_additive"],
                )?
            }
            "lambda_i" => tr.lambda_i = number(key, value)?,
            "lambda_c" => tr.lambda_c = number(key, value)?,
            "epochs" => tr.epochs = number(key, value)?,
            "learning_rate" => tr.learning_rate = number(key, value)?,
            "weight_decay" => tr.weight_decay = number(key, value)?,
            "batch_size" => tr.batch_size = number(key, value)?,
            "seed" => tr.seed = number(key, value)?,
            "optimizer" => {
                tr.optimizer = choice(key, value, OptimizerKind::parse, &["adamw", "sgd"])?
            }
            "schedule" => {
                choice(key, value, |s| (s == SCHEDULE).then_some(()), &[SCHEDULE])?;
            }
            "execution" => {
                tr.execution = choice(key, value, Execution::parse, &["parallel", "sequential"])?
            }
            "backbone_seed" => self.backbone_seed = number(key, value)?,
            "backbone" => self.backbone = optional_path(value),
            "dataset" => self.dataset = optional_path(value),
            "output_dir" => {
                if value.is_empty() {
                    return Err(Error::Config("output_dir must not be empty".into()));
                }
                self.output_dir = PathBuf::from(value)
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tcpa.validate()?;
        self.train.validate()
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset configured; set dataset = <path>".into()))
    }

    /// All keys with their resolved values, one `key = value` line each.
    /// Parsing the echo reproduces this configuration.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.tcpa;
        let tr = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let values: Vec<String> = vec![
            m.image_h.to_string(),
            m.image_w.to_string(),
            m.channels.to_string(),
            m.patch_h.to_string(),
            m.patch_w.to_string(),
            m.embed_dim.to_string(),
            m.num_layers.to_string(),
            m.num_heads.to_string(),
            m.ffn_dim.to_string(),
            self.mode.as_str().to_string(),
            t.prompt_len.to_string(),
            t.cls_pool_size.to_string(),
            t.img_pool_size.to_string(),
            t.cls_top_k.to_string(),
            t.img_top_k.to_string(),
            t.match_direction.as_str().to_string(),
            t.mask_mode.as_str().to_string(),
            tr.lambda_i.to_string(),
            tr.lambda_c.to_string(),
            tr.epochs.to_string(),
            tr.learning_rate.to_string(),
            tr.weight_decay.to_string(),
            tr.batch_size.to_string(),
            tr.seed.to_string(),
            tr.optimizer.as_str().to_string(),
            SCHEDULE.to_string(),
            tr.execution.as_str().to_string(),
            self.backbone_seed.to_string(),
            path(&self.backbone),
            path(&self.dataset),
            self.output_dir.display().to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
