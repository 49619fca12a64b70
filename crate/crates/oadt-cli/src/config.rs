//! Flat experiment configuration. One TOML document carries overrides for
//! every stage plus optional paths; absent keys fall back to the per-module
//! defaults. `--set KEY=VALUE` edits the document after loading, and
//! dedicated flags beat both.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use oadt_core::error::{Error, Result};
use oadt_core::evaluator::{EvalConfig, Task};
use oadt_core::loss::LossWeights;
use oadt_core::model::ModelConfig;
use oadt_core::postprocess::{Combination, DecodeConfig, SoftNmsMethod};
use oadt_core::trainer::TrainConfig;

/// Every recognized key, all optional. Unknown keys are rejected by name.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub input_dim: Option<usize>,
    pub num_verbs: Option<usize>,
    pub num_nouns: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub dropout: Option<f64>,
    pub pyramid_levels: Option<usize>,
    pub stem_layers: Option<usize>,
    pub head_layers: Option<usize>,
    pub max_seq_len: Option<usize>,
    // optimizer and schedule
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub clip_grad_norm: Option<f64>,
    pub max_steps: Option<usize>,
    // loss
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda_action: Option<f64>,
    pub lambda_reg: Option<f64>,
    // decoding
    pub pre_nms_topk: Option<usize>,
    pub score_threshold: Option<f64>,
    pub combination: Option<Combination>,
    pub soft_nms_method: Option<SoftNmsMethod>,
    pub soft_nms_sigma: Option<f64>,
    pub soft_nms_iou_threshold: Option<f64>,
    pub max_detections: Option<usize>,
    pub apply_nms: Option<bool>,
    // evaluation
    pub thresholds: Option<Vec<f64>>,
    pub tasks: Option<Vec<Task>>,
    // paths, usable in place of the equivalent flags
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<Vec<PathBuf>>,
    pub annotations: Option<PathBuf>,
    pub weights: Option<Vec<f64>>,
    // shared RNG seed
    pub seed: Option<u64>,
}

macro_rules! setit {
    ($base:expr, $over:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $over.$field { $base.$field = v; })*
    };
}

impl RunConfig {
    /// Dataset-derived dimensions fill whatever the config leaves out.
    pub fn model_config(
        &self,
        input_dim: usize,
        num_verbs: usize,
        num_nouns: usize,
    ) -> ModelConfig {
        let mut mc = ModelConfig {
            input_dim: self.input_dim.unwrap_or(input_dim),
            num_verbs: self.num_verbs.unwrap_or(num_verbs),
            num_nouns: self.num_nouns.unwrap_or(num_nouns),
            d_model: 256,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            pyramid_levels: 4,
            stem_layers: 2,
            head_layers: 3,
            max_seq_len: 2048,
        };
        let o = self.clone();
        setit!(mc, o, d_model, heads, mlp_ratio, dropout, pyramid_levels);
        setit!(mc, o, stem_layers, head_layers, max_seq_len);
        mc
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::default();
        let o = self.clone();
        setit!(tc, o, epochs, batch_size, base_lr, weight_decay, beta1, beta2);
        setit!(tc, o, adam_eps, seed);
        if o.warmup_steps.is_some() {
            tc.warmup_steps = o.warmup_steps;
        }
        if o.clip_grad_norm.is_some() {
            tc.clip_grad_norm = o.clip_grad_norm;
        }
        if o.max_steps.is_some() {
            tc.max_steps = o.max_steps;
        }
        tc
    }

    pub fn loss_weights(&self) -> LossWeights {
        let mut lw = LossWeights::default();
        let o = self.clone();
        setit!(lw, o, alpha, gamma, lambda_action, lambda_reg);
        lw
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let mut dc = DecodeConfig::default();
        let o = self.clone();
        setit!(dc, o, pre_nms_topk, score_threshold, combination, soft_nms_method);
        setit!(dc, o, soft_nms_sigma, soft_nms_iou_threshold, max_detections, apply_nms);
        dc
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut ec = EvalConfig::default();
        let o = self.clone();
        setit!(ec, o, thresholds, tasks);
        ec
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// Load a TOML document, or start empty when no file was given. Syntax
/// problems are parse errors; semantic problems surface later as validation.
pub fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            toml::from_str(&read_text(p)?).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        }
    }
}

/// Apply `KEY=VALUE` overrides on top of a document. The value is parsed as
/// TOML; bare words fall back to strings so `--set combination=add` works.
pub fn apply_overrides(table: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set wants KEY=VALUE, got {s:?}")))?;
        let key = key.trim();
        let value = value.trim();
        let quoted_fallback = !value.starts_with(['[', '{', '"', '\'']);
        let parsed: toml::Table = toml::from_str(&format!("{key} = {value}"))
            .or_else(|e| {
                if quoted_fallback {
                    toml::from_str(&format!("{key} = {value:?}"))
                } else {
                    Err(e)
                }
            })
            .map_err(|e| Error::Validation(format!("--set {s:?}: {e}")))?;
        for (k, v) in parsed {
            table.insert(k, v);
        }
    }
    Ok(())
}

/// Final typed decode; unknown keys fail here, named in the message.
pub fn typed<T: serde::de::DeserializeOwned>(table: toml::Table, what: &str) -> Result<T> {
    table
        .try_into()
        .map_err(|e| Error::Validation(format!("{what}: {e}")))
}

/// Flag beats config key; something must provide the value.
pub fn need<T>(flag: Option<T>, from_config: Option<T>, name: &str) -> Result<T> {
    flag.or(from_config)
        .ok_or_else(|| Error::Validation(format!("no {name} given: pass --{name} or set it in the config")))
}
