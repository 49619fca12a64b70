//! Neural-network building blocks: learnable parameters, linear layers,
//! padding masks, sinusoidal positions, multi-head self-attention, and the
//! pre-norm transformer layer with optional stride-2 temporal downsampling.
//!
//! Layers own their parameters as plain tensors. A forward pass happens
//! through a [`Ctx`], which registers each parameter on the tape once per
//! pass (memoized by parameter id), so layers shared across pyramid levels
//! accumulate gradients from every use site.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

/// Numerical floor added inside layer-norm square roots.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive bias for masked attention keys; large enough to zero the softmax
/// weight in f32, small enough to stay finite everywhere.
pub const MASK_NEG: f64 = -1e9;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A learnable tensor with a process-unique identity.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    id: u64,
    value: Tensor<E>,
}

impl<E: Scalar> Param<E> {
    pub fn new(value: Tensor<E>) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    /// Replace the stored tensor (optimizer step, checkpoint load).
    pub fn set(&mut self, value: Tensor<E>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{:?} -> {:?}", self.value.shape(), value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns parameters, visitable by dotted path.
pub trait Module<E: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>));
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward-pass context: the tape, the per-pass parameter bindings, and the
/// training-mode dropout source (absent in inference).
pub struct Ctx<'a, E: Scalar> {
    pub tape: &'a mut Tape<E>,
    bound: HashMap<u64, Var>,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, E: Scalar> Ctx<'a, E> {
    pub fn inference(tape: &'a mut Tape<E>) -> Self {
        Ctx {
            tape,
            bound: HashMap::new(),
            dropout_rng: None,
        }
    }

    pub fn training(tape: &'a mut Tape<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            tape,
            bound: HashMap::new(),
            dropout_rng: Some(rng),
        }
    }

    /// Tape variable for a parameter; bound at most once per pass.
    pub fn param(&mut self, p: &Param<E>) -> Var {
        if let Some(&v) = self.bound.get(&p.id) {
            return v;
        }
        let v = self.tape.leaf(p.value.clone(), true);
        self.bound.insert(p.id, v);
        v
    }

    /// Binding established during this pass, if the parameter was used.
    pub fn binding(&self, p: &Param<E>) -> Option<Var> {
        self.bound.get(&p.id).copied()
    }

    /// Pre-bind a parameter to an existing tape variable. Lets a caller own
    /// the leaves, e.g. to perturb them in finite-difference checks.
    pub fn bind(&mut self, p: &Param<E>, v: Var) {
        self.bound.insert(p.id, v);
    }

    /// Inverted dropout: active only in training mode, identity otherwise.
    /// The kept mask is scaled by 1/(1-rate) so expectations match eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let rng = match self.dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        use rand::Rng;
        let keep = 1.0 - rate;
        let scale = sc::<E>(1.0 / keep);
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.gen_range(0.0..1.0) < keep {
                scale
            } else {
                E::zero()
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}

/// Seeded uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform<E: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Fully connected layer, `y = x Wᵀ + b`, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Scalar> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(init_uniform(vec![out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let rank = ctx.tape.shape(w).len();
        debug_assert_eq!(rank, 2);
        let wt = ctx.tape.swap_axes(w, 0, 1)?;
        let y = ctx.tape.matmul(x, wt)?;
        ctx.tape.add(y, b)
    }
}

impl<E: Scalar> Module<E> for Linear<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        f(&join_path(prefix, "bias"), &mut self.bias);
    }
}

/// Learnable layer-norm affine pair.
#[derive(Debug, Clone)]
pub struct LayerNorm<E: Scalar> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::ones(vec![dim])),
            beta: Param::new(Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

impl<E: Scalar> Module<E> for LayerNorm<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        f(&join_path(prefix, "gamma"), &self.gamma);
        f(&join_path(prefix, "beta"), &self.beta);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        f(&join_path(prefix, "gamma"), &mut self.gamma);
        f(&join_path(prefix, "beta"), &mut self.beta);
    }
}

/// Validity of `[batch, len]` timestep grid; `false` marks padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddingMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl PaddingMask {
    pub fn full(batch: usize, len: usize) -> Self {
        PaddingMask {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    /// Right-padding mask from per-sequence valid lengths.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        for (i, &l) in lengths.iter().enumerate() {
            if l == 0 || l > len {
                return Err(Error::InvalidArgument(format!(
                    "sequence {i} has valid length {l}, padded length is {len}"
                )));
            }
        }
        let mut valid = Vec::with_capacity(lengths.len() * len);
        for &l in lengths {
            for t in 0..len {
                valid.push(t < l);
            }
        }
        Ok(PaddingMask {
            batch: lengths.len(),
            len,
            valid,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.len + t]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Index of the first batch row with no valid timestep, if any.
    pub fn fully_masked_row(&self) -> Option<usize> {
        (0..self.batch).find(|&b| (0..self.len).all(|t| !self.is_valid(b, t)))
    }

    /// Mask after stride-`s` pooling: a window is valid if any member is.
    pub fn pooled(&self, stride: usize) -> PaddingMask {
        let out_len = self.len.div_ceil(stride);
        let mut valid = Vec::with_capacity(self.batch * out_len);
        for b in 0..self.batch {
            for w in 0..out_len {
                let lo = w * stride;
                let hi = ((w + 1) * stride).min(self.len);
                valid.push((lo..hi).any(|t| self.is_valid(b, t)));
            }
        }
        PaddingMask {
            batch: self.batch,
            len: out_len,
            valid,
        }
    }

    /// `[B, T, 1]` multiplier: 1 on valid positions, 0 on padding.
    pub fn weights<E: Scalar>(&self) -> Tensor<E> {
        Tensor::from_fn(vec![self.batch, self.len, 1], |i| {
            if self.valid[i] {
                E::one()
            } else {
                E::zero()
            }
        })
    }

    /// `[B, 1, 1, T]` additive attention bias: 0 on valid keys, MASK_NEG on
    /// padding.
    pub fn key_bias<E: Scalar>(&self) -> Tensor<E> {
        Tensor::from_fn(vec![self.batch, 1, 1, self.len], |i| {
            if self.valid[i] {
                E::zero()
            } else {
                sc(MASK_NEG)
            }
        })
    }

    /// `[B, T, 1]` additive term: 0 on valid positions, MASK_NEG on padding.
    /// Used to push padded values to a finite floor before max pooling.
    pub fn floor_offsets<E: Scalar>(&self) -> Tensor<E> {
        Tensor::from_fn(vec![self.batch, self.len, 1], |i| {
            if self.valid[i] {
                E::zero()
            } else {
                sc(MASK_NEG)
            }
        })
    }
}

/// Sinusoidal positional table `[len, dim]`: even columns sine, odd columns
/// cosine, sharing a frequency per pair.
pub fn positional_encoding<E: Scalar>(len: usize, dim: usize) -> Tensor<E> {
    Tensor::from_fn(vec![len, dim], |flat| {
        let pos = (flat / dim) as f64;
        let col = flat % dim;
        let pair = (col / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
        let angle = pos * freq;
        if col % 2 == 0 {
            sc(angle.sin())
        } else {
            sc(angle.cos())
        }
    })
}

/// Pre-norm multi-head self-attention block:
/// `out = x + Wo(Attention(LN(x)))`, with padded keys excluded.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention<E: Scalar> {
    pub norm: LayerNorm<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub heads: usize,
    pub dropout: f64,
}

impl<E: Scalar> MultiHeadSelfAttention<E> {
    pub fn new(d_model: usize, heads: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadSelfAttention {
            norm: LayerNorm::new(d_model),
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            heads,
            dropout,
        })
    }

    /// `x` is `[B, T, D]`. Padded positions may hold arbitrary values; they
    /// cannot influence valid outputs because their keys carry MASK_NEG bias.
    pub fn forward(&self, ctx: &mut Ctx<E>, x: Var, mask: &PaddingMask) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "mhsa",
                format!("expected [B, T, D], got {:?}", shape),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if mask.batch() != b || mask.len() != t {
            return Err(Error::shape(
                "mhsa",
                format!("mask {}x{} vs input {b}x{t}", mask.batch(), mask.len()),
            ));
        }
        if let Some(row) = mask.fully_masked_row() {
            return Err(Error::InvalidArgument(format!(
                "attention over fully masked sequence (batch row {row})"
            )));
        }
        let dh = d / self.heads;
        let h = self.norm.forward(ctx, x)?;
        let split = |ctx: &mut Ctx<E>, v: Var| -> Result<Var> {
            let r = ctx.tape.reshape(v, vec![b, t, self.heads, dh])?;
            ctx.tape.swap_axes(r, 1, 2) // [B, H, T, dh]
        };
        let q = self.wq.forward(ctx, h)?;
        let k = self.wk.forward(ctx, h)?;
        let v = self.wv.forward(ctx, h)?;
        let q = split(ctx, q)?;
        let k = split(ctx, k)?;
        let v = split(ctx, v)?;
        let kt = ctx.tape.swap_axes(k, 2, 3)?; // [B, H, dh, T]
        let scores = ctx.tape.matmul(q, kt)?; // [B, H, T, T]
        let scores = ctx.tape.mul_scalar(scores, sc::<E>(1.0 / (dh as f64).sqrt()));
        let bias = ctx.tape.constant(mask.key_bias::<E>());
        let scores = ctx.tape.add(scores, bias)?;
        let attn = ctx.tape.softmax(scores, 3)?;
        let ctxv = ctx.tape.matmul(attn, v)?; // [B, H, T, dh]
        let merged = ctx.tape.swap_axes(ctxv, 1, 2)?;
        let merged = ctx.tape.reshape(merged, vec![b, t, d])?;
        let proj = self.wo.forward(ctx, merged)?;
        let proj = ctx.dropout(proj, self.dropout)?;
        ctx.tape.add(x, proj)
    }
}

impl<E: Scalar> Module<E> for MultiHeadSelfAttention<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.norm.visit_params(&join_path(prefix, "norm"), f);
        self.wq.visit_params(&join_path(prefix, "wq"), f);
        self.wk.visit_params(&join_path(prefix, "wk"), f);
        self.wv.visit_params(&join_path(prefix, "wv"), f);
        self.wo.visit_params(&join_path(prefix, "wo"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        self.norm.visit_params_mut(&join_path(prefix, "norm"), f);
        self.wq.visit_params_mut(&join_path(prefix, "wq"), f);
        self.wk.visit_params_mut(&join_path(prefix, "wk"), f);
        self.wv.visit_params_mut(&join_path(prefix, "wv"), f);
        self.wo.visit_params_mut(&join_path(prefix, "wo"), f);
    }
}

/// Output of one transformer layer: the full-resolution sequence, plus the
/// stride-2 pooled sequence and mask when downsampling is enabled.
pub struct LayerOutput {
    pub full: Var,
    pub pooled: Option<(Var, PaddingMask)>,
}

/// Pre-norm transformer layer:
/// `z = x + Wo(Attn(LN1(x)))`, `y = z + MLP(LN2(z))`, optional stride-2 max
/// pooling at the end. Before pooling, padded positions are pushed to a large
/// negative floor so a window straddling the valid boundary picks its valid
/// member.
#[derive(Debug, Clone)]
pub struct TransformerLayer<E: Scalar> {
    pub attn: MultiHeadSelfAttention<E>,
    pub norm2: LayerNorm<E>,
    pub mlp_in: Linear<E>,
    pub mlp_out: Linear<E>,
    pub downsample: bool,
    pub dropout: f64,
}

impl<E: Scalar> TransformerLayer<E> {
    pub fn new(
        d_model: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        downsample: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(Error::InvalidArgument("mlp_ratio must be >= 1".into()));
        }
        Ok(TransformerLayer {
            attn: MultiHeadSelfAttention::new(d_model, heads, dropout, rng)?,
            norm2: LayerNorm::new(d_model),
            mlp_in: Linear::new(d_model, d_model * mlp_ratio, rng),
            mlp_out: Linear::new(d_model * mlp_ratio, d_model, rng),
            downsample,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<E>, x: Var, mask: &PaddingMask) -> Result<LayerOutput> {
        let z = self.attn.forward(ctx, x, mask)?;
        let h = self.norm2.forward(ctx, z)?;
        let h = self.mlp_in.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let h = self.mlp_out.forward(ctx, h)?;
        let h = ctx.dropout(h, self.dropout)?;
        let y = ctx.tape.add(z, h)?;
        let pooled = if self.downsample {
            let floor = ctx.tape.constant(mask.floor_offsets::<E>());
            let gated = {
                let w = ctx.tape.constant(mask.weights::<E>());
                let zeroed = ctx.tape.mul(y, w)?;
                ctx.tape.add(zeroed, floor)?
            };
            let p = ctx.tape.max_pool1d(gated, 2)?;
            Some((p, mask.pooled(2)))
        } else {
            None
        };
        Ok(LayerOutput { full: y, pooled })
    }
}

impl<E: Scalar> Module<E> for TransformerLayer<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.attn.visit_params(&join_path(prefix, "attn"), f);
        self.norm2.visit_params(&join_path(prefix, "norm2"), f);
        self.mlp_in.visit_params(&join_path(prefix, "mlp_in"), f);
        self.mlp_out.visit_params(&join_path(prefix, "mlp_out"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        self.attn.visit_params_mut(&join_path(prefix, "attn"), f);
        self.norm2.visit_params_mut(&join_path(prefix, "norm2"), f);
        self.mlp_in.visit_params_mut(&join_path(prefix, "mlp_in"), f);
        self.mlp_out.visit_params_mut(&join_path(prefix, "mlp_out"), f);
    }
}
