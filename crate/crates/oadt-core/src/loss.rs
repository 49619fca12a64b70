//! Label assignment and the training loss.
//!
//! Assignment works in input stride-cell units: a pyramid location at level l
//! and index i sits at center (i + 0.5)·2^l and is positive for a segment
//! when that center lies inside the segment and the segment's length falls in
//! the level's range. Ranges tile [0, inf): level 0 owns [0, 8), level l owns
//! [4·2^l, 8·2^l), and the top level is unbounded above, so every segment
//! lands on exactly one level.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{candidate_center_cells, ForwardVars};
use crate::nn::PaddingMask;
use crate::tensor::{fd, sc, Scalar, Tensor};

/// An annotated segment in input stride-cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSegment {
    pub start: f64,
    pub end: f64,
    pub verb: usize,
    pub noun: usize,
}

/// Segment-length range a pyramid level is responsible for, as
/// half-open `[lo, hi)`; the top level has `hi = inf`.
pub fn level_range(level: usize, num_levels: usize) -> (f64, f64) {
    debug_assert!(level < num_levels);
    let lo = if level == 0 {
        0.0
    } else {
        4.0 * (1u64 << level) as f64
    };
    let hi = if level + 1 == num_levels {
        f64::INFINITY
    } else {
        8.0 * (1u64 << level) as f64
    };
    (lo, hi)
}

/// Per-level assignment over a `[B, T_l]` grid, flattened row-major.
#[derive(Debug, Clone)]
pub struct LevelAssignment {
    pub batch: usize,
    pub len: usize,
    /// Valid (unpadded) locations; padded ones contribute no loss at all.
    pub valid: Vec<bool>,
    pub positive: Vec<bool>,
    /// Matched segment index within the batch element's list; only
    /// meaningful where `positive`.
    pub matched: Vec<usize>,
    pub verb: Vec<usize>,
    pub noun: Vec<usize>,
    /// Regression targets, distances to segment ends divided by 2^level.
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
    pub positive_count: usize,
}

/// Assign each valid pyramid location to at most one segment. Ties between
/// eligible segments go to the shortest, then to the earliest in the list.
pub fn assign(
    batch_segments: &[Vec<GroundTruthSegment>],
    masks: &[PaddingMask],
) -> Result<Assignment> {
    let num_levels = masks.len();
    if num_levels == 0 {
        return Err(Error::InvalidArgument("assignment needs >= 1 level".into()));
    }
    let batch = masks[0].batch();
    if batch_segments.len() != batch {
        return Err(Error::shape(
            "assign",
            format!("{} segment lists, batch {batch}", batch_segments.len()),
        ));
    }
    for segments in batch_segments {
        for s in segments {
            if !(s.start.is_finite() && s.end.is_finite()) || s.end <= s.start {
                return Err(Error::Validation(format!(
                    "segment [{}, {}) is not a positive-length interval",
                    s.start, s.end
                )));
            }
        }
    }
    let mut positive_count = 0usize;
    let mut levels = Vec::with_capacity(num_levels);
    for (level, mask) in masks.iter().enumerate() {
        if mask.batch() != batch {
            return Err(Error::shape(
                "assign",
                format!("level {level} batch {} != {batch}", mask.batch()),
            ));
        }
        let len = mask.len();
        let scale = (1u64 << level) as f64;
        let (lo, hi) = level_range(level, num_levels);
        let n = batch * len;
        let mut out = LevelAssignment {
            batch,
            len,
            valid: (0..n).map(|at| mask.is_valid(at / len, at % len)).collect(),
            positive: vec![false; n],
            matched: vec![0; n],
            verb: vec![0; n],
            noun: vec![0; n],
            d_start: vec![0.0; n],
            d_end: vec![0.0; n],
        };
        for b in 0..batch {
            for i in 0..len {
                if !mask.is_valid(b, i) {
                    continue;
                }
                let center = candidate_center_cells(level, i);
                let mut best: Option<(f64, usize)> = None;
                for (idx, s) in batch_segments[b].iter().enumerate() {
                    let length = s.end - s.start;
                    if center < s.start || center > s.end {
                        continue;
                    }
                    if length < lo || length >= hi {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bl, _)) => length < bl,
                    };
                    if better {
                        best = Some((length, idx));
                    }
                }
                if let Some((_, idx)) = best {
                    let s = &batch_segments[b][idx];
                    let at = b * len + i;
                    out.positive[at] = true;
                    out.matched[at] = idx;
                    out.verb[at] = s.verb;
                    out.noun[at] = s.noun;
                    out.d_start[at] = (center - s.start) / scale;
                    out.d_end[at] = (s.end - center) / scale;
                    positive_count += 1;
                }
            }
        }
        levels.push(out);
    }
    Ok(Assignment {
        levels,
        positive_count,
    })
}

/// Temporal IoU of two closed intervals.
pub fn iou1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if a.1 <= a.0 || b.1 <= b.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate segment in iou1d: [{}, {}] vs [{}, {}]",
            a.0, a.1, b.0, b.1
        )));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Unnormalized sigmoid focal sum over one logits tensor.
///
/// Per element, with x the logit and y the target,
///   y·alpha·sigmoid(-x)^gamma·softplus(-x) + (1-y)·sigmoid(x)^gamma·softplus(x),
/// masked by `valid` and summed. With gamma=0, alpha=1 this is exactly the
/// sum of binary cross-entropies: the modulating powers become 1 and alpha
/// drops out. Alpha weights only the positive term.
fn focal_sum<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: Tensor<E>,
    valid: Tensor<E>,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    if !tape.value(logits).all_finite() {
        return Err(Error::NonFinite("focal loss logits".into()));
    }
    let y = tape.constant(targets);
    let one = tape.constant(Tensor::scalar(E::one()));
    let neg_x = tape.neg(logits);
    let sp_neg = tape.softplus(neg_x); // -log p
    let sp_pos = tape.softplus(logits); // -log (1-p)
    let sig_neg = tape.sigmoid(neg_x); // 1-p
    let sig_pos = tape.sigmoid(logits); // p
    let mod_pos = tape.pow_scalar(sig_neg, gamma);
    let mod_neg = tape.pow_scalar(sig_pos, gamma);
    let pos = tape.mul(y, mod_pos)?;
    let pos = tape.mul(pos, sp_neg)?;
    let pos = tape.mul_scalar(pos, sc::<E>(alpha));
    let ny = tape.sub(one, y)?;
    let neg = tape.mul(ny, mod_neg)?;
    let neg = tape.mul(neg, sp_pos)?;
    let both = tape.add(pos, neg)?;
    let w = tape.constant(valid);
    let masked = tape.mul(both, w)?;
    Ok(tape.sum_all(masked))
}

/// Mean-normalized sigmoid focal loss; the divisor is `max(1, positives)`.
pub fn focal_loss<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: Tensor<E>,
    valid: Tensor<E>,
    alpha: f64,
    gamma: f64,
    positive_count: usize,
) -> Result<Var> {
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "focal alpha must be in (0, 1], got {alpha}"
        )));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "focal gamma must be >= 0, got {gamma}"
        )));
    }
    let s = focal_sum(tape, logits, targets, valid, alpha, gamma)?;
    Ok(tape.mul_scalar(s, sc::<E>(1.0 / positive_count.max(1) as f64)))
}

/// Unnormalized sum of (1 - IoU) over weighted locations. Predicted and
/// target segments share the location center, so
///   IoU = (min(ds,ds*) + min(de,de*)) / (max(ds,ds*) + max(de,de*)).
/// `targets` must be positive at zero-weight locations (filler), keeping the
/// denominator away from zero where the term is masked anyway.
fn iou_sum<E: Scalar>(
    tape: &mut Tape<E>,
    offsets: Var,
    targets: Tensor<E>,
    pos_weights: Tensor<E>,
) -> Result<Var> {
    let shape = tape.shape(offsets).to_vec();
    let last = shape.len() - 1;
    if shape[last] != 2 {
        return Err(Error::shape(
            "iou_loss",
            format!("offsets must end in 2, got {:?}", shape),
        ));
    }
    let t = tape.constant(targets);
    let ps = tape.slice(offsets, last, 0, 1)?;
    let pe = tape.slice(offsets, last, 1, 1)?;
    let ts = tape.slice(t, last, 0, 1)?;
    let te = tape.slice(t, last, 1, 1)?;
    let i_s = tape.minimum(ps, ts)?;
    let i_e = tape.minimum(pe, te)?;
    let u_s = tape.maximum(ps, ts)?;
    let u_e = tape.maximum(pe, te)?;
    let inter = tape.add(i_s, i_e)?;
    let union = tape.add(u_s, u_e)?;
    let iou = tape.div(inter, union)?;
    let one = tape.constant(Tensor::scalar(E::one()));
    let loss = tape.sub(one, iou)?;
    let w = tape.constant(pos_weights);
    let masked = tape.mul(loss, w)?;
    Ok(tape.sum_all(masked))
}

/// Mean (1 - IoU) over positive locations; zero when there are none.
pub fn iou_loss<E: Scalar>(
    tape: &mut Tape<E>,
    offsets: Var,
    targets: Tensor<E>,
    pos_weights: Tensor<E>,
    positive_count: usize,
) -> Result<Var> {
    if positive_count == 0 {
        return Ok(tape.constant(Tensor::scalar(E::zero())));
    }
    let s = iou_sum(tape, offsets, targets, pos_weights)?;
    Ok(tape.mul_scalar(s, sc::<E>(1.0 / positive_count as f64)))
}

/// Loss combination weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the combined verb+noun action focal term; off by default.
    pub lambda_action: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.25,
            gamma: 2.0,
            lambda_action: 0.0,
            lambda_reg: 1.0,
        }
    }
}

/// Scalar view of one loss evaluation, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub verb_focal: f64,
    pub noun_focal: f64,
    pub action_focal: f64,
    pub iou_loss: f64,
    pub total: f64,
    pub positive_count: usize,
}

/// Build the full training loss for one forward pass.
/// total = verb_focal + noun_focal + lambda_action·action_focal
///         + lambda_reg·iou_loss, every term normalized by the shared
/// positive count.
pub fn total_loss<E: Scalar>(
    tape: &mut Tape<E>,
    fwd: &ForwardVars,
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if fwd.levels.len() != assignment.levels.len() {
        return Err(Error::shape(
            "total_loss",
            format!(
                "{} forward levels vs {} assigned",
                fwd.levels.len(),
                assignment.levels.len()
            ),
        ));
    }
    let pc = assignment.positive_count;
    let norm = sc::<E>(1.0 / pc.max(1) as f64);
    let mut verb_sum: Option<Var> = None;
    let mut noun_sum: Option<Var> = None;
    let mut action_sum: Option<Var> = None;
    let mut iou_total: Option<Var> = None;
    let acc = |tape: &mut Tape<E>, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match slot.take() {
            None => v,
            Some(prev) => tape.add(prev, v)?,
        });
        Ok(())
    };
    for (lv, la) in fwd.levels.iter().zip(&assignment.levels) {
        let vshape = tape.shape(lv.verb_logits).to_vec();
        let (b, t, nv) = (vshape[0], vshape[1], vshape[2]);
        let nn = tape.shape(lv.noun_logits)[2];
        if la.batch != b || la.len != t {
            return Err(Error::shape(
                "total_loss",
                format!("assignment grid {}x{} vs logits {b}x{t}", la.batch, la.len),
            ));
        }
        let grid = |f: &dyn Fn(usize) -> E, per: usize| -> Vec<E> {
            (0..b * t * per).map(f).collect()
        };
        let verb_t = Tensor::from_vec(
            vec![b, t, nv],
            grid(
                &|j| {
                    let (at, c) = (j / nv, j % nv);
                    if la.positive[at] && la.verb[at] == c {
                        E::one()
                    } else {
                        E::zero()
                    }
                },
                nv,
            ),
        )?;
        let noun_t = Tensor::from_vec(
            vec![b, t, nn],
            grid(
                &|j| {
                    let (at, c) = (j / nn, j % nn);
                    if la.positive[at] && la.noun[at] == c {
                        E::one()
                    } else {
                        E::zero()
                    }
                },
                nn,
            ),
        )?;
        let valid = Tensor::from_fn(vec![b, t, 1], |at| {
            if la.valid[at] {
                E::one()
            } else {
                E::zero()
            }
        });
        let vs = focal_sum(
            tape,
            lv.verb_logits,
            verb_t,
            valid.clone(),
            weights.alpha,
            weights.gamma,
        )?;
        acc(tape, &mut verb_sum, vs)?;
        let ns = focal_sum(
            tape,
            lv.noun_logits,
            noun_t,
            valid.clone(),
            weights.alpha,
            weights.gamma,
        )?;
        acc(tape, &mut noun_sum, ns)?;
        if weights.lambda_action > 0.0 {
            // Combined action logits: s_verb[v] + s_noun[n], flattened v*N+n.
            let v4 = tape.reshape(lv.verb_logits, vec![b, t, nv, 1])?;
            let n4 = tape.reshape(lv.noun_logits, vec![b, t, 1, nn])?;
            let a4 = tape.add(v4, n4)?;
            let a = tape.reshape(a4, vec![b, t, nv * nn])?;
            let na = nv * nn;
            let action_t = Tensor::from_vec(
                vec![b, t, na],
                grid(
                    &|j| {
                        let (at, c) = (j / na, j % na);
                        if la.positive[at] && la.verb[at] * nn + la.noun[at] == c {
                            E::one()
                        } else {
                            E::zero()
                        }
                    },
                    na,
                ),
            )?;
            let s = focal_sum(tape, a, action_t, valid.clone(), weights.alpha, weights.gamma)?;
            acc(tape, &mut action_sum, s)?;
        }
        if pc > 0 {
            let offs_t = Tensor::from_vec(
                vec![b, t, 2],
                grid(
                    &|j| {
                        let (at, c) = (j / 2, j % 2);
                        if la.positive[at] {
                            sc(if c == 0 { la.d_start[at] } else { la.d_end[at] })
                        } else {
                            E::one() // filler keeps the IoU denominator positive
                        }
                    },
                    2,
                ),
            )?;
            let pos_w = Tensor::from_fn(vec![b, t, 1], |at| {
                if la.positive[at] {
                    E::one()
                } else {
                    E::zero()
                }
            });
            let s = iou_sum(tape, lv.offsets, offs_t, pos_w)?;
            acc(tape, &mut iou_total, s)?;
        }
    }
    let verb = tape.mul_scalar(verb_sum.expect(">= 1 level"), norm);
    let noun = tape.mul_scalar(noun_sum.expect(">= 1 level"), norm);
    let mut total = tape.add(verb, noun)?;
    let action = match action_sum {
        Some(s) => {
            let a = tape.mul_scalar(s, norm);
            let w = tape.mul_scalar(a, sc::<E>(weights.lambda_action));
            total = tape.add(total, w)?;
            Some(a)
        }
        None => None,
    };
    let iou = match iou_total {
        Some(s) => {
            let v = tape.mul_scalar(s, norm);
            let w = tape.mul_scalar(v, sc::<E>(weights.lambda_reg));
            total = tape.add(total, w)?;
            Some(v)
        }
        None => None,
    };
    let scalar = |tape: &Tape<E>, v: Var| fd(tape.value(v).scalar_value().expect("loss term is scalar"));
    let breakdown = LossBreakdown {
        verb_focal: scalar(tape, verb),
        noun_focal: scalar(tape, noun),
        action_focal: action.map_or(0.0, |v| scalar(tape, v)),
        iou_loss: iou.map_or(0.0, |v| scalar(tape, v)),
        total: scalar(tape, total),
        positive_count: pc,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss total: {breakdown:?}")));
    }
    Ok((total, breakdown))
}
