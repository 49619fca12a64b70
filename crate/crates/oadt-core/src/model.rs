//! The detector: linear feature projection, sinusoidal positions, a stem of
//! full-resolution transformer layers, then a pyramid of stride-2 stages.
//! Classification and regression heads are shared across pyramid levels and
//! run on each stage's pre-pool output, so level l covers the input at
//! temporal stride 2^l.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    join_path, positional_encoding, Ctx, Linear, Module, PaddingMask, Param, TransformerLayer,
};
use crate::tensor::{Scalar, Tensor};

fn d_model_default() -> usize {
    256
}
fn heads_default() -> usize {
    4
}
fn mlp_ratio_default() -> usize {
    4
}
fn dropout_default() -> f64 {
    0.1
}
fn pyramid_levels_default() -> usize {
    4
}
fn stem_layers_default() -> usize {
    2
}
fn head_layers_default() -> usize {
    3
}
fn max_seq_len_default() -> usize {
    2048
}

/// Architecture hyperparameters. `input_dim`, `num_verbs`, and `num_nouns`
/// come from the dataset; the rest have defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    #[serde(default = "d_model_default")]
    pub d_model: usize,
    #[serde(default = "heads_default")]
    pub heads: usize,
    #[serde(default = "mlp_ratio_default")]
    pub mlp_ratio: usize,
    #[serde(default = "dropout_default")]
    pub dropout: f64,
    #[serde(default = "pyramid_levels_default")]
    pub pyramid_levels: usize,
    #[serde(default = "stem_layers_default")]
    pub stem_layers: usize,
    #[serde(default = "head_layers_default")]
    pub head_layers: usize,
    #[serde(default = "max_seq_len_default")]
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return bad("num_verbs and num_nouns must be >= 1".into());
        }
        if self.d_model == 0 {
            return bad("d_model must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "heads must divide d_model ({} % {} != 0)",
                self.d_model, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if self.head_layers == 0 {
            return bad("head_layers must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        Ok(())
    }

    /// Actions are (verb, noun) pairs, scored jointly at decode time.
    pub fn num_actions(&self) -> usize {
        self.num_verbs * self.num_nouns
    }
}

/// Stack of linear layers with ReLU between them, none after the last.
#[derive(Debug, Clone)]
pub struct Head<E: Scalar> {
    pub layers: Vec<Linear<E>>,
}

impl<E: Scalar> Head<E> {
    pub fn new(d_model: usize, out_dim: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let out = if i + 1 == n_layers { out_dim } else { d_model };
            layers.push(Linear::new(d_model, out, rng));
        }
        Head { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i + 1 < self.layers.len() {
                h = ctx.tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl<E: Scalar> Module<E> for Head<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join_path(prefix, &i.to_string()), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join_path(prefix, &i.to_string()), f);
        }
    }
}

/// Per-level head outputs still on the tape, for loss construction.
pub struct LevelVars {
    /// `[B, T_l, num_verbs]`
    pub verb_logits: Var,
    /// `[B, T_l, num_nouns]`
    pub noun_logits: Var,
    /// `[B, T_l, 2]`, nonnegative (start, end) distances in level cells.
    pub offsets: Var,
    pub mask: PaddingMask,
}

pub struct ForwardVars {
    pub levels: Vec<LevelVars>,
}

/// Materialized per-level outputs, detached from any tape.
#[derive(Debug, Clone)]
pub struct LevelOutput<E: Scalar> {
    pub verb_logits: Tensor<E>,
    pub noun_logits: Tensor<E>,
    pub offsets: Tensor<E>,
    pub mask: PaddingMask,
}

#[derive(Debug, Clone)]
pub struct PyramidOutputs<E: Scalar> {
    pub levels: Vec<LevelOutput<E>>,
}

impl ForwardVars {
    pub fn materialize<E: Scalar>(&self, tape: &Tape<E>) -> PyramidOutputs<E> {
        PyramidOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutput {
                    verb_logits: tape.value(l.verb_logits).clone(),
                    noun_logits: tape.value(l.noun_logits).clone(),
                    offsets: tape.value(l.offsets).clone(),
                    mask: l.mask.clone(),
                })
                .collect(),
        }
    }
}

/// Candidate center at pyramid level `l`, index `i`, in stride-cell units:
/// the mean position of the 2^l input cells the candidate covers.
pub fn candidate_center_cells(level: usize, index: usize) -> f64 {
    (index as f64 + 0.5) * (1u64 << level) as f64
}

/// Same center in seconds, given the cell duration (stride / fps).
pub fn candidate_time_sec(level: usize, index: usize, cell_sec: f64) -> f64 {
    candidate_center_cells(level, index) * cell_sec
}

pub struct OadtModel<E: Scalar> {
    config: ModelConfig,
    proj: Linear<E>,
    pos: Tensor<E>,
    stem: Vec<TransformerLayer<E>>,
    pyramid: Vec<TransformerLayer<E>>,
    verb_head: Head<E>,
    noun_head: Head<E>,
    reg_head: Head<E>,
}

impl<E: Scalar> OadtModel<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let proj = Linear::new(c.input_dim, c.d_model, &mut rng);
        let pos = positional_encoding(c.max_seq_len, c.d_model);
        let mut stem = Vec::with_capacity(c.stem_layers);
        for _ in 0..c.stem_layers {
            stem.push(TransformerLayer::new(
                c.d_model, c.heads, c.mlp_ratio, c.dropout, false, &mut rng,
            )?);
        }
        let mut pyramid = Vec::with_capacity(c.pyramid_levels);
        for l in 0..c.pyramid_levels {
            // The last stage's pooled output feeds nothing; skip the pool.
            let downsample = l + 1 < c.pyramid_levels;
            pyramid.push(TransformerLayer::new(
                c.d_model, c.heads, c.mlp_ratio, c.dropout, downsample, &mut rng,
            )?);
        }
        let verb_head = Head::new(c.d_model, c.num_verbs, c.head_layers, &mut rng);
        let noun_head = Head::new(c.d_model, c.num_nouns, c.head_layers, &mut rng);
        let reg_head = Head::new(c.d_model, 2, c.head_layers, &mut rng);
        Ok(OadtModel {
            config,
            proj,
            pos,
            stem,
            pyramid,
            verb_head,
            noun_head,
            reg_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `features` is `[B, T, input_dim]`; `mask` marks valid timesteps.
    /// Returns one head triple per pyramid level, finest first.
    pub fn forward(
        &self,
        ctx: &mut Ctx<E>,
        features: Var,
        mask: &PaddingMask,
    ) -> Result<ForwardVars> {
        let shape = ctx.tape.shape(features).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "expected [B, T, {}], got {:?}",
                    self.config.input_dim, shape
                ),
            ));
        }
        let t = shape[1];
        if t > self.config.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if mask.batch() != shape[0] || mask.len() != t {
            return Err(Error::shape(
                "model_forward",
                format!("mask {}x{} vs input {:?}", mask.batch(), mask.len(), shape),
            ));
        }

        let mut h = self.proj.forward(ctx, features)?;
        // First t rows of the positional table; rows are contiguous.
        let d = self.config.d_model;
        let pos = Tensor::from_vec(vec![t, d], self.pos.as_slice()[..t * d].to_vec())?;
        let pos = ctx.tape.constant(pos);
        h = ctx.tape.add(h, pos)?;
        let mut m = mask.clone();
        for layer in &self.stem {
            h = layer.forward(ctx, h, &m)?.full;
        }
        let mut levels = Vec::with_capacity(self.pyramid.len());
        for layer in &self.pyramid {
            let out = layer.forward(ctx, h, &m)?;
            let verb_logits = self.verb_head.forward(ctx, out.full)?;
            let noun_logits = self.noun_head.forward(ctx, out.full)?;
            let reg_raw = self.reg_head.forward(ctx, out.full)?;
            let offsets = ctx.tape.softplus(reg_raw);
            levels.push(LevelVars {
                verb_logits,
                noun_logits,
                offsets,
                mask: m.clone(),
            });
            if let Some((pooled, pooled_mask)) = out.pooled {
                h = pooled;
                m = pooled_mask;
            }
        }
        Ok(ForwardVars { levels })
    }
}

impl<E: Scalar> Module<E> for OadtModel<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.proj.visit_params(&join_path(prefix, "proj"), f);
        for (i, l) in self.stem.iter().enumerate() {
            l.visit_params(&join_path(prefix, &format!("stem.{i}")), f);
        }
        for (i, l) in self.pyramid.iter().enumerate() {
            l.visit_params(&join_path(prefix, &format!("pyramid.{i}")), f);
        }
        self.verb_head.visit_params(&join_path(prefix, "verb_head"), f);
        self.noun_head.visit_params(&join_path(prefix, "noun_head"), f);
        self.reg_head.visit_params(&join_path(prefix, "reg_head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        self.proj.visit_params_mut(&join_path(prefix, "proj"), f);
        for (i, l) in self.stem.iter_mut().enumerate() {
            l.visit_params_mut(&join_path(prefix, &format!("stem.{i}")), f);
        }
        for (i, l) in self.pyramid.iter_mut().enumerate() {
            l.visit_params_mut(&join_path(prefix, &format!("pyramid.{i}")), f);
        }
        self.verb_head.visit_params_mut(&join_path(prefix, "verb_head"), f);
        self.noun_head.visit_params_mut(&join_path(prefix, "noun_head"), f);
        self.reg_head.visit_params_mut(&join_path(prefix, "reg_head"), f);
    }
}
