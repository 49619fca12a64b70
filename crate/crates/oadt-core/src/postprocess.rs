//! Decode pyramid outputs into scored detections, suppress near-duplicates
//! with Soft-NMS, and fuse candidate lists from several models.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TimeCalibration;
use crate::error::{open_file, Error, Result};
use crate::loss::iou1d;
use crate::model::{candidate_center_cells, PyramidOutputs};
use crate::tensor::{fd, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub verb: usize,
    pub noun: usize,
    /// verb·num_nouns + noun.
    pub action: usize,
    pub score: f64,
}

/// Deterministic ordering: score descending, then (video, start, end,
/// action) ascending, so equal scores never depend on iteration order.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.start_sec.total_cmp(&b.start_sec))
        .then_with(|| a.end_sec.total_cmp(&b.end_sec))
        .then_with(|| a.action.cmp(&b.action))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    Multiply,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    Gaussian,
    Linear,
}

fn pre_nms_topk_default() -> usize {
    200
}
fn score_threshold_default() -> f64 {
    1e-3
}
fn combination_default() -> Combination {
    Combination::Multiply
}
fn soft_nms_method_default() -> SoftNmsMethod {
    SoftNmsMethod::Gaussian
}
fn soft_nms_sigma_default() -> f64 {
    0.5
}
fn soft_nms_iou_threshold_default() -> f64 {
    0.5
}
fn max_detections_default() -> usize {
    100
}
fn apply_nms_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "pre_nms_topk_default")]
    pub pre_nms_topk: usize,
    #[serde(default = "score_threshold_default")]
    pub score_threshold: f64,
    #[serde(default = "combination_default")]
    pub combination: Combination,
    #[serde(default = "soft_nms_method_default")]
    pub soft_nms_method: SoftNmsMethod,
    #[serde(default = "soft_nms_sigma_default")]
    pub soft_nms_sigma: f64,
    #[serde(default = "soft_nms_iou_threshold_default")]
    pub soft_nms_iou_threshold: f64,
    #[serde(default = "max_detections_default")]
    pub max_detections: usize,
    /// Leave off to emit raw pre-suppression candidates, e.g. for fusion
    /// across models later.
    #[serde(default = "apply_nms_default")]
    pub apply_nms: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            pre_nms_topk: pre_nms_topk_default(),
            score_threshold: score_threshold_default(),
            combination: combination_default(),
            soft_nms_method: soft_nms_method_default(),
            soft_nms_sigma: soft_nms_sigma_default(),
            soft_nms_iou_threshold: soft_nms_iou_threshold_default(),
            max_detections: max_detections_default(),
            apply_nms: apply_nms_default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.pre_nms_topk == 0 || self.max_detections == 0 {
            return bad("pre_nms_topk and max_detections must be >= 1".into());
        }
        if !(self.soft_nms_sigma.is_finite() && self.soft_nms_sigma > 0.0) {
            return bad(format!("soft_nms_sigma must be positive, got {}", self.soft_nms_sigma));
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("soft_nms_iou_threshold", self.soft_nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turn one batch element's pyramid outputs into scored candidates, before
/// any suppression. Every verb-noun pair at every valid location competes;
/// survivors of the score threshold are ranked and capped at pre_nms_topk.
pub fn decode<E: Scalar>(
    outputs: &PyramidOutputs<E>,
    batch: usize,
    video_id: &str,
    calib: &TimeCalibration,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut dets = Vec::new();
    for (level, out) in outputs.levels.iter().enumerate() {
        let vshape = out.verb_logits.shape();
        let nshape = out.noun_logits.shape();
        let (t_l, num_verbs, num_nouns) = (vshape[1], vshape[2], nshape[2]);
        if batch >= vshape[0] {
            return Err(Error::InvalidArgument(format!(
                "batch index {batch} out of range for {} elements",
                vshape[0]
            )));
        }
        let vs = out.verb_logits.as_slice();
        let ns = out.noun_logits.as_slice();
        let os = out.offsets.as_slice();
        // Per-level stride in input cells; offsets are in level cells.
        let scale = (1usize << level) as f64;
        for t in 0..t_l {
            if !out.mask.is_valid(batch, t) {
                continue;
            }
            let center = calib.cells_to_sec(candidate_center_cells(level, t));
            let d_start = fd(os[(batch * t_l + t) * 2]);
            let d_end = fd(os[(batch * t_l + t) * 2 + 1]);
            let start = center - d_start * scale * calib.cell_sec();
            let end = center + d_end * scale * calib.cell_sec();
            if !(start < end) {
                continue;
            }
            for v in 0..num_verbs {
                let sv = sigmoid(fd(vs[(batch * t_l + t) * num_verbs + v]));
                for n in 0..num_nouns {
                    let sn = sigmoid(fd(ns[(batch * t_l + t) * num_nouns + n]));
                    let score = match cfg.combination {
                        Combination::Multiply => sv * sn,
                        Combination::Add => 0.5 * (sv + sn),
                    };
                    if score < cfg.score_threshold {
                        continue;
                    }
                    dets.push(Detection {
                        video_id: video_id.to_string(),
                        start_sec: start,
                        end_sec: end,
                        verb: v,
                        noun: n,
                        action: v * num_nouns + n,
                        score,
                    });
                }
            }
        }
    }
    dets.sort_by(detection_order);
    dets.truncate(cfg.pre_nms_topk);
    Ok(dets)
}

fn det_iou(a: &Detection, b: &Detection) -> f64 {
    iou1d((a.start_sec, a.end_sec), (b.start_sec, b.end_sec))
        .expect("detections are positive-length intervals")
}

/// Soft-NMS within each (video, action class) group: repeatedly promote the
/// best remaining candidate and decay the rest by their overlap with it.
/// Scores never increase; candidates falling below the score threshold drop
/// out; at most max_detections survive overall.
pub fn soft_nms(dets: &[Detection], cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut groups: BTreeMap<(String, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        if !(d.score.is_finite() && d.score > 0.0 && d.score <= 1.0) {
            return Err(Error::Validation(format!(
                "detection score {} outside (0, 1]",
                d.score
            )));
        }
        groups
            .entry((d.video_id.clone(), d.action))
            .or_default()
            .push(d.clone());
    }
    let mut out = Vec::new();
    for (_, mut pool) in groups {
        while !pool.is_empty() {
            let best = pool
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| detection_order(a, b))
                .map(|(i, _)| i)
                .expect("nonempty pool");
            let top = pool.swap_remove(best);
            pool.retain_mut(|d| {
                let iou = det_iou(&top, d);
                let decay = match cfg.soft_nms_method {
                    SoftNmsMethod::Gaussian => (-iou * iou / cfg.soft_nms_sigma).exp(),
                    SoftNmsMethod::Linear => {
                        if iou > cfg.soft_nms_iou_threshold {
                            1.0 - iou
                        } else {
                            1.0
                        }
                    }
                };
                d.score *= decay;
                d.score >= cfg.score_threshold && d.score > 0.0
            });
            out.push(top);
        }
    }
    out.sort_by(detection_order);
    out.truncate(cfg.max_detections);
    Ok(out)
}

/// Fuse several models' pre-suppression candidate lists: scale scores by the
/// model weights, merge exact duplicates by summing, then suppress once.
pub fn ensemble(
    per_model: &[Vec<Detection>],
    weights: Option<&[f64]>,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    if per_model.is_empty() {
        return Err(Error::InvalidArgument("ensemble of zero models".into()));
    }
    let uniform = vec![1.0 / per_model.len() as f64; per_model.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != per_model.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} models",
            weights.len(),
            per_model.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "weights must be nonnegative and sum to 1, got {weights:?}"
        )));
    }
    // Identical segments found by several models reinforce each other; the
    // convex weights keep the merged score in (0, 1].
    let mut merged: BTreeMap<(String, usize, usize, u64, u64), Detection> = BTreeMap::new();
    for (dets, &w) in per_model.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for d in dets {
            let key = (
                d.video_id.clone(),
                d.verb,
                d.noun,
                d.start_sec.to_bits(),
                d.end_sec.to_bits(),
            );
            merged
                .entry(key)
                .and_modify(|e| e.score += w * d.score)
                .or_insert_with(|| Detection {
                    score: w * d.score,
                    ..d.clone()
                });
        }
    }
    let pool: Vec<Detection> = merged.into_values().collect();
    soft_nms(&pool, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRecord {
    start_sec: f64,
    end_sec: f64,
    verb: usize,
    noun: usize,
    action: usize,
    score: f64,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Write detections grouped by video, descending by score, scores rounded
/// to 6 decimals. Output bytes are a pure function of the input.
pub fn write_predictions(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut by_video: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    let mut ordered: Vec<&Detection> = dets.iter().collect();
    ordered.sort_by(|a, b| detection_order(a, b));
    for d in ordered {
        by_video.entry(d.video_id.clone()).or_default().push(PredictionRecord {
            start_sec: d.start_sec,
            end_sec: d.end_sec,
            verb: d.verb,
            noun: d.noun,
            action: d.action,
            score: round6(d.score),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &by_video)
        .map_err(|e| Error::Parse(format!("prediction encode: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Detection>> {
    let file = open_file(path)?;
    let by_video: BTreeMap<String, Vec<PredictionRecord>> =
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (video_id, records) in by_video {
        for r in records {
            if !(r.start_sec.is_finite() && r.end_sec.is_finite() && r.start_sec < r.end_sec) {
                return Err(Error::Validation(format!(
                    "video {video_id}: [{}, {}) is not a positive-length interval",
                    r.start_sec, r.end_sec
                )));
            }
            if !(r.score.is_finite() && r.score > 0.0 && r.score <= 1.0) {
                return Err(Error::Validation(format!(
                    "video {video_id}: score {} outside (0, 1]",
                    r.score
                )));
            }
            out.push(Detection {
                video_id: video_id.clone(),
                start_sec: r.start_sec,
                end_sec: r.end_sec,
                verb: r.verb,
                noun: r.noun,
                action: r.action,
                score: r.score,
            });
        }
    }
    out.sort_by(detection_order);
    Ok(out)
}
