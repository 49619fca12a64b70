//! Training loop: AdamW with decoupled weight decay, cosine learning-rate
//! schedule with linear warmup, seeded shuffling, right-padded batches, and
//! best/last checkpoints.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{assign, total_loss, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, OadtModel};
use crate::nn::{Ctx, Module, PaddingMask, Param};
use crate::tensor::{fd, sc, Scalar, Tensor};

fn epochs_default() -> usize {
    27
}
fn batch_size_default() -> usize {
    2
}
fn base_lr_default() -> f64 {
    1e-4
}
fn weight_decay_default() -> f64 {
    5e-4
}
fn beta1_default() -> f64 {
    0.9
}
fn beta2_default() -> f64 {
    0.999
}
fn adam_eps_default() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "batch_size_default")]
    pub batch_size: usize,
    #[serde(default = "base_lr_default")]
    pub base_lr: f64,
    #[serde(default = "weight_decay_default")]
    pub weight_decay: f64,
    #[serde(default = "beta1_default")]
    pub beta1: f64,
    #[serde(default = "beta2_default")]
    pub beta2: f64,
    #[serde(default = "adam_eps_default")]
    pub adam_eps: f64,
    /// Linear warmup length; absent means 5% of the total step budget.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm clip; absent means no clipping.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Hard cap on optimizer steps; the schedule shortens to match.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: epochs_default(),
            batch_size: batch_size_default(),
            base_lr: base_lr_default(),
            weight_decay: weight_decay_default(),
            beta1: beta1_default(),
            beta2: beta2_default(),
            adam_eps: adam_eps_default(),
            warmup_steps: None,
            clip_grad_norm: None,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1 when set".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at
/// `total_steps`. Step 0 of a warmed-up schedule has lr 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step.saturating_sub(warmup_steps)) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Moments<E: Scalar> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// AdamW with decay decoupled from the adaptive update:
/// theta -= lr·m_hat/(sqrt(v_hat)+eps) + lr·wd·theta.
pub struct AdamW<E: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    slots: HashMap<u64, Moments<E>>,
    step: u64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            slots: HashMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// the per-parameter updates it covers.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, param: &mut Param<E>, grad: &Tensor<E>, lr: f64) -> Result<()> {
        debug_assert!(self.step > 0, "begin_step before update");
        if grad.shape() != param.value().shape() {
            return Err(Error::shape(
                "adamw_update",
                format!("grad {:?} vs param {:?}", grad.shape(), param.value().shape()),
            ));
        }
        for &g in grad.as_slice() {
            if !fd(g).is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient contains {}; optimizer step aborted",
                    fd(g)
                )));
            }
        }
        let slot = self.slots.entry(param.id()).or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape().to_vec()),
            v: Tensor::zeros(grad.shape().to_vec()),
        });
        let b1 = sc::<E>(self.beta1);
        let b2 = sc::<E>(self.beta2);
        let one = sc::<E>(1.0);
        let c1 = sc::<E>(1.0 - self.beta1.powi(self.step as i32));
        let c2 = sc::<E>(1.0 - self.beta2.powi(self.step as i32));
        let lr_e = sc::<E>(lr);
        let eps = sc::<E>(self.eps);
        let decay = sc::<E>(lr * self.weight_decay);
        let mut theta = param.value().to_vec();
        let ms = slot.m.as_mut_slice();
        let vs = slot.v.as_mut_slice();
        let gs = grad.as_slice();
        for i in 0..theta.len() {
            ms[i] = b1 * ms[i] + (one - b1) * gs[i];
            vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
            let m_hat = ms[i] / c1;
            let v_hat = vs[i] / c2;
            theta[i] = theta[i] - lr_e * m_hat / (v_hat.sqrt() + eps) - decay * theta[i];
        }
        param.set(Tensor::from_vec(param.value().shape().to_vec(), theta)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub epochs: Vec<EpochStats>,
    pub steps_run: usize,
}

pub const METRICS_HEADER: &str = "epoch, step, lr, verb_focal, noun_focal, iou_loss, total";

fn mean_breakdown(rows: &[LossBreakdown]) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    let mut out = LossBreakdown {
        verb_focal: 0.0,
        noun_focal: 0.0,
        action_focal: 0.0,
        iou_loss: 0.0,
        total: 0.0,
        positive_count: 0,
    };
    for r in rows {
        out.verb_focal += r.verb_focal / n;
        out.noun_focal += r.noun_focal / n;
        out.action_focal += r.action_focal / n;
        out.iou_loss += r.iou_loss / n;
        out.total += r.total / n;
        out.positive_count += r.positive_count;
    }
    out
}

/// Right-pad one batch of videos to the longest sequence and build its mask.
fn collate<E: Scalar>(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor<E>, PaddingMask)> {
    let d = dataset.input_dim;
    let lengths: Vec<usize> = indices.iter().map(|&i| dataset.videos[i].sequence.len()).collect();
    let t_max = *lengths.iter().max().expect("nonempty batch");
    let mut data = vec![0f32; indices.len() * t_max * d];
    for (b, &vi) in indices.iter().enumerate() {
        let src = dataset.videos[vi].sequence.features.as_slice();
        let rows = lengths[b];
        data[b * t_max * d..b * t_max * d + rows * d].copy_from_slice(&src[..rows * d]);
    }
    let features = Tensor::<f32>::from_vec(vec![indices.len(), t_max, d], data)?.cast::<E>();
    Ok((features, PaddingMask::from_lengths(&lengths, t_max)?))
}

/// Run the full loop. Deterministic for a fixed config: init, shuffling, and
/// dropout are all derived from `cfg.seed`. Metrics lines go to `metrics` as
/// they happen.
pub fn train<E: Scalar>(
    dataset: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    metrics: &mut dyn Write,
) -> Result<TrainResult> {
    cfg.validate()?;
    model_config.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if dataset.input_dim != model_config.input_dim {
        return Err(Error::Validation(format!(
            "dataset features have dim {}, model expects {}",
            dataset.input_dim, model_config.input_dim
        )));
    }
    if dataset.num_verbs > model_config.num_verbs || dataset.num_nouns > model_config.num_nouns {
        return Err(Error::Validation(format!(
            "dataset vocabularies ({} verbs, {} nouns) exceed the model's ({}, {})",
            dataset.num_verbs, dataset.num_nouns, model_config.num_verbs, model_config.num_nouns
        )));
    }
    let max_len = dataset.max_len();
    if max_len > model_config.max_seq_len {
        return Err(Error::Validation(format!(
            "longest video has {max_len} rows, model caps at {}",
            model_config.max_seq_len
        )));
    }

    let n = dataset.videos.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let planned = cfg.epochs * steps_per_epoch;
    let total_steps = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let warmup = cfg
        .warmup_steps
        .unwrap_or((total_steps as f64 * 0.05).ceil() as usize)
        .min(total_steps);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_seed: u64 = master.gen();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut model = OadtModel::<E>::new(model_config.clone(), model_seed)?;
    let mut opt = AdamW::<E>::new(cfg);
    let segments_cells: Vec<_> = dataset.videos.iter().map(|v| v.segments_in_cells()).collect();

    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut step = 0usize;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epochs = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut rows = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.base_lr, warmup);
            let (features, mask) = collate::<E>(dataset, chunk)?;
            let batch_segments: Vec<_> = chunk.iter().map(|&i| segments_cells[i].clone()).collect();

            let mut tape = Tape::<E>::new();
            let x = tape.constant(features);
            let mut ctx = Ctx::training(&mut tape, &mut dropout_rng);
            let fwd = model.forward(&mut ctx, x, &mask)?;
            let level_masks: Vec<_> = fwd.levels.iter().map(|l| l.mask.clone()).collect();
            let assignment = assign(&batch_segments, &level_masks)?;
            let (loss, breakdown) = total_loss(ctx.tape, &fwd, &assignment, weights)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {} at step {step}",
                    breakdown.total
                )));
            }
            let mut bound = Vec::new();
            model.visit_params("", &mut |_, p: &Param<E>| {
                if let Some(v) = ctx.binding(p) {
                    bound.push((p.id(), v));
                }
            });
            let grads = tape.backward(loss)?;
            let mut grad_map: HashMap<u64, Tensor<E>> = HashMap::new();
            for (id, var) in bound {
                if let Some(g) = grads.get(var) {
                    grad_map.insert(id, g.clone());
                }
            }
            if let Some(clip) = cfg.clip_grad_norm {
                let mut sq = 0f64;
                for g in grad_map.values() {
                    for &x in g.as_slice() {
                        sq += fd(x) * fd(x);
                    }
                }
                let norm = sq.sqrt();
                if norm > clip {
                    let scale = sc::<E>(clip / norm);
                    for g in grad_map.values_mut() {
                        for x in g.as_mut_slice() {
                            *x = *x * scale;
                        }
                    }
                }
            }
            opt.begin_step();
            let mut update_err = None;
            model.visit_params_mut("", &mut |_, p: &mut Param<E>| {
                if update_err.is_some() {
                    return;
                }
                if let Some(g) = grad_map.get(&p.id()) {
                    if let Err(e) = opt.update(p, g, lr) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(e);
            }

            writeln!(
                metrics,
                "{epoch}, {step}, {lr:.10e}, {:.10e}, {:.10e}, {:.10e}, {:.10e}",
                breakdown.verb_focal, breakdown.noun_focal, breakdown.iou_loss, breakdown.total
            )?;
            rows.push(breakdown);
            step += 1;
            if step >= total_steps {
                epochs.push(EpochStats {
                    epoch,
                    mean: mean_breakdown(&rows),
                });
                break 'outer;
            }
        }
        let mean = mean_breakdown(&rows);
        if best.as_ref().map_or(true, |(b, _)| mean.total < *b) {
            best = Some((mean.total, Checkpoint::from_model(&model, step as u64, cfg.seed)));
        }
        epochs.push(EpochStats { epoch, mean });
    }

    let last = Checkpoint::from_model(&model, step as u64, cfg.seed);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainResult {
        best,
        last,
        epochs,
        steps_run: step,
    })
}
