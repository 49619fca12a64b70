//! Temporal-IoU mean Average Precision over verb, noun, and action labels,
//! with fixed-width report rendering.
//!
//! Matching is greedy in global score order: each prediction claims the
//! unmatched ground-truth instance of its video and class with the highest
//! overlap at or above the threshold (ties to the earliest instance). AP is
//! the interpolated kind: area under the precision envelope over all recall
//! points. Classes with no ground truth stay out of the mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_annotations, AnnotationFile};
use crate::error::{Error, Result};
use crate::loss::iou1d;
use crate::postprocess::{detection_order, read_predictions, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }

    /// Class identity under this task; actions are verb-noun pairs.
    fn class_of(&self, verb: usize, noun: usize) -> (usize, usize) {
        match self {
            Task::Verb => (verb, 0),
            Task::Noun => (0, noun),
            Task::Action => (verb, noun),
        }
    }
}

fn thresholds_default() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

fn tasks_default() -> Vec<Task> {
    vec![Task::Verb, Task::Noun, Task::Action]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "thresholds_default")]
    pub thresholds: Vec<f64>,
    #[serde(default = "tasks_default")]
    pub tasks: Vec<Task>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: thresholds_default(),
            tasks: tasks_default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.tasks.is_empty() {
            return Err(Error::Validation("need >= 1 threshold and task".into()));
        }
        for w in self.thresholds.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Validation(format!(
                    "thresholds must be strictly increasing, got {:?}",
                    self.thresholds
                )));
            }
        }
        for &t in &self.thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Validation(format!(
                    "threshold {t} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub verb: usize,
    pub noun: usize,
}

/// Flatten an annotation document into evaluation ground truth.
pub fn gt_from_annotations(file: &AnnotationFile) -> Vec<GroundTruthInstance> {
    let mut out = Vec::new();
    for v in &file.videos {
        for s in &v.segments {
            out.push(GroundTruthInstance {
                video_id: v.id.clone(),
                start_sec: s.start_sec,
                end_sec: s.end_sec,
                verb: s.verb,
                noun: s.noun,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    /// One AP per configured threshold, same order.
    pub ap: Vec<f64>,
    pub average: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Interpolated AP from ordered hit flags: each true positive contributes
/// 1/num_gt of recall at the running precision envelope.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            ap += precisions[i] / num_gt as f64;
        }
    }
    ap
}

/// Greedy matching plus per-class AP for one task at one threshold; the mean
/// runs over classes that occur in the ground truth.
fn task_map(
    dets: &[&Detection],
    gt: &[GroundTruthInstance],
    task: Task,
    threshold: f64,
) -> f64 {
    // (video, class) → ground-truth indices, in listing order.
    let mut gt_index: BTreeMap<(&str, (usize, usize)), Vec<usize>> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        gt_index
            .entry((g.video_id.as_str(), task.class_of(g.verb, g.noun)))
            .or_default()
            .push(i);
    }
    let mut class_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for g in gt {
        *class_counts.entry(task.class_of(g.verb, g.noun)).or_default() += 1;
    }

    let mut matched = vec![false; gt.len()];
    let mut flags: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    for d in dets {
        let class = task.class_of(d.verb, d.noun);
        if !class_counts.contains_key(&class) {
            continue; // no ground truth anywhere for this class: skipped
        }
        let mut best: Option<(f64, usize)> = None;
        if let Some(candidates) = gt_index.get(&(d.video_id.as_str(), class)) {
            for &gi in candidates {
                if matched[gi] {
                    continue;
                }
                let iou = iou1d(
                    (d.start_sec, d.end_sec),
                    (gt[gi].start_sec, gt[gi].end_sec),
                )
                .expect("validated intervals");
                if iou >= threshold && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
        }
        let hit = if let Some((_, gi)) = best {
            matched[gi] = true;
            true
        } else {
            false
        };
        flags.entry(class).or_default().push(hit);
    }

    if class_counts.is_empty() {
        return 0.0;
    }
    let empty: Vec<bool> = Vec::new();
    let mut sum = 0.0;
    for (class, &count) in &class_counts {
        let class_flags = flags.get(class).unwrap_or(&empty);
        sum += average_precision(class_flags, count);
    }
    sum / class_counts.len() as f64
}

/// Score detections against ground truth. `video_ids` is the full set of
/// known videos; a detection for any other id is an error that names every
/// offender.
pub fn evaluate(
    dets: &[Detection],
    gt: &[GroundTruthInstance],
    video_ids: &BTreeSet<String>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let unknown: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.video_id.as_str())
        .chain(gt.iter().map(|g| g.video_id.as_str()))
        .filter(|id| !video_ids.contains(*id))
        .collect();
    if !unknown.is_empty() {
        let ids: Vec<&str> = unknown.into_iter().collect();
        return Err(Error::Validation(format!(
            "predictions reference unknown video ids: {}",
            ids.join(", ")
        )));
    }
    let mut ordered: Vec<&Detection> = dets.iter().collect();
    ordered.sort_by(|a, b| detection_order(a, b));

    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for &task in &cfg.tasks {
        let ap: Vec<f64> = cfg
            .thresholds
            .iter()
            .map(|&t| task_map(&ordered, gt, task, t))
            .collect();
        let average = ap.iter().sum::<f64>() / ap.len() as f64;
        tasks.push(TaskReport {
            task,
            ap,
            average,
            num_gt: gt.len(),
            num_predictions: dets.len(),
        });
    }
    Ok(EvalReport {
        thresholds: cfg.thresholds.clone(),
        tasks,
    })
}

/// File-level entry: annotations define the videos and ground truth,
/// predictions come from the postprocess format.
pub fn evaluate_files(
    predictions_path: &Path,
    annotations_path: &Path,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let ann = read_annotations(annotations_path)?;
    let gt = gt_from_annotations(&ann);
    let ids: BTreeSet<String> = ann.videos.iter().map(|v| v.id.clone()).collect();
    let dets = read_predictions(predictions_path)?;
    evaluate(&dets, &gt, &ids, cfg)
}

/// Fixed-width table, one row per task, percentages with 2 decimals, plus
/// the across-threshold average in the last column.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<8}", "task"));
    for t in &report.thresholds {
        out.push_str(&format!("{:>9}", format!("@{t}")));
    }
    out.push_str(&format!("{:>9}\n", "Avg"));
    for tr in &report.tasks {
        out.push_str(&format!("{:<8}", tr.task.name()));
        for ap in &tr.ap {
            out.push_str(&format!("{:>9.2}", ap * 100.0));
        }
        out.push_str(&format!("{:>9.2}\n", tr.average * 100.0));
    }
    out
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| Error::Parse(format!("report encode: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(video: &str, start: f64, end: f64, verb: usize, noun: usize, score: f64) -> Detection {
        Detection {
            video_id: video.into(),
            start_sec: start,
            end_sec: end,
            verb,
            noun,
            action: verb * 3 + noun,
            score,
        }
    }

    fn gti(video: &str, start: f64, end: f64, verb: usize, noun: usize) -> GroundTruthInstance {
        GroundTruthInstance {
            video_id: video.into(),
            start_sec: start,
            end_sec: end,
            verb,
            noun,
        }
    }

    fn ids(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true], 0), 0.0);
    }

    #[test]
    fn identical_predictions_score_one_everywhere() {
        let gt = vec![
            gti("a", 0.0, 2.0, 0, 1),
            gti("a", 5.0, 8.0, 1, 0),
            gti("b", 1.0, 4.0, 2, 2),
        ];
        let dets: Vec<Detection> = gt
            .iter()
            .enumerate()
            .map(|(i, g)| {
                det(
                    &g.video_id,
                    g.start_sec,
                    g.end_sec,
                    g.verb,
                    g.noun,
                    0.9 - 0.1 * i as f64,
                )
            })
            .collect();
        let report = evaluate(&dets, &gt, &ids(&["a", "b"]), &EvalConfig::default()).unwrap();
        for tr in &report.tasks {
            assert_eq!(tr.num_gt, 3);
            assert_eq!(tr.num_predictions, 3);
            for &ap in &tr.ap {
                assert!((ap - 1.0).abs() < 1e-15, "{:?} {ap}", tr.task);
            }
            assert!((tr.average - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn false_positive_outranking_the_hit_halves_ap() {
        let gt = vec![gti("a", 0.0, 1.0, 0, 0)];
        let dets = vec![
            det("a", 5.0, 6.0, 0, 0, 0.9),
            det("a", 0.0, 1.0, 0, 0, 0.5),
        ];
        let report = evaluate(&dets, &gt, &ids(&["a"]), &EvalConfig::default()).unwrap();
        for tr in &report.tasks {
            for &ap in &tr.ap {
                assert!((ap - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_projection_splits_tasks() {
        // Wrong verb, right noun: only the noun task gives credit. The
        // unmatched verb class (1) has no ground truth so it is skipped,
        // not averaged in as a zero.
        let gt = vec![gti("a", 0.0, 1.0, 0, 0)];
        let dets = vec![det("a", 0.0, 1.0, 1, 0, 0.9)];
        let report = evaluate(&dets, &gt, &ids(&["a"]), &EvalConfig::default()).unwrap();
        assert_eq!(report.task(Task::Verb).unwrap().average, 0.0);
        assert_eq!(report.task(Task::Noun).unwrap().average, 1.0);
        assert_eq!(report.task(Task::Action).unwrap().average, 0.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gt = vec![gti("a", 0.0, 1.0, 0, 0)];
        let report = evaluate(&[], &gt, &ids(&["a"]), &EvalConfig::default()).unwrap();
        for tr in &report.tasks {
            assert_eq!(tr.average, 0.0);
            assert_eq!(tr.num_predictions, 0);
        }
    }

    #[test]
    fn duplicate_hits_count_once() {
        let gt = vec![gti("a", 0.0, 1.0, 0, 0), gti("a", 10.0, 11.0, 0, 0)];
        let clean = vec![
            det("a", 0.0, 1.0, 0, 0, 0.9),
            det("a", 10.0, 11.0, 0, 0, 0.7),
        ];
        let with_dup = vec![
            det("a", 0.0, 1.0, 0, 0, 0.9),
            det("a", 0.0, 1.0, 0, 0, 0.8),
            det("a", 10.0, 11.0, 0, 0, 0.7),
        ];
        let cfg = EvalConfig::default();
        let known = ids(&["a"]);
        let clean_report = evaluate(&clean, &gt, &known, &cfg).unwrap();
        let dup_report = evaluate(&with_dup, &gt, &known, &cfg).unwrap();
        for tr in &clean_report.tasks {
            assert!((tr.average - 1.0).abs() < 1e-15);
        }
        // The duplicate is a false positive ranked above the second hit:
        // AP drops to (1 + 2/3) / 2 at every threshold.
        for tr in &dup_report.tasks {
            for &ap in &tr.ap {
                assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
            }
            assert!(tr.average < 1.0);
        }
    }

    #[test]
    fn unknown_video_ids_are_listed() {
        let gt = vec![gti("a", 0.0, 1.0, 0, 0)];
        let dets = vec![
            det("ghost-b", 0.0, 1.0, 0, 0, 0.9),
            det("ghost-a", 0.0, 1.0, 0, 0, 0.8),
        ];
        let err = evaluate(&dets, &gt, &ids(&["a"]), &EvalConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ghost-a, ghost-b"), "{msg}");
    }

    #[test]
    fn config_validation_rejects_bad_thresholds() {
        let bad = [
            vec![],
            vec![0.2, 0.2],
            vec![0.3, 0.1],
            vec![0.0, 0.5],
            vec![0.5, 1.5],
        ];
        for thresholds in bad {
            let cfg = EvalConfig {
                thresholds,
                ..EvalConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        }
        let no_tasks = EvalConfig {
            tasks: vec![],
            ..EvalConfig::default()
        };
        assert!(no_tasks.validate().is_err());
        assert!(EvalConfig::default().validate().is_ok());
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Detection>, Vec<GroundTruthInstance>, BTreeSet<String>) {
        let num_videos = rng.gen_range(1..=5usize);
        let names: Vec<String> = (0..num_videos).map(|i| format!("v{i}")).collect();
        let mut gt = Vec::new();
        for id in &names {
            for _ in 0..rng.gen_range(0..=3usize) {
                let start = rng.gen_range(0..60i64) as f64 * 0.25;
                let len = rng.gen_range(1..=16i64) as f64 * 0.25;
                gt.push(gti(id, start, start + len, rng.gen_range(0..3), rng.gen_range(0..3)));
            }
        }
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..=10usize) {
            let start = rng.gen_range(0..60i64) as f64 * 0.25;
            let len = rng.gen_range(1..=16i64) as f64 * 0.25;
            let verb = rng.gen_range(0..3usize);
            let noun = rng.gen_range(0..3usize);
            let score = (rng.gen_range(0..64i64) + 1) as f64 / 64.0;
            let id = names[rng.gen_range(0..num_videos)].clone();
            dets.push(det(&id, start, start + len, verb, noun, score));
        }
        (dets, gt, names.into_iter().collect())
    }

    #[test]
    fn report_is_invariant_to_monotone_score_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = EvalConfig::default();
        for _ in 0..50 {
            let (dets, gt, known) = random_instance(&mut rng);
            let base = evaluate(&dets, &gt, &known, &cfg).unwrap();
            for transform in [|s: f64| s * s, |s: f64| 0.5 * s] {
                let mapped: Vec<Detection> = dets
                    .iter()
                    .cloned()
                    .map(|mut d| {
                        d.score = transform(d.score);
                        d
                    })
                    .collect();
                let got = evaluate(&mapped, &gt, &known, &cfg).unwrap();
                assert_eq!(got, base);
            }
        }
    }

    #[test]
    fn ap_never_rises_with_the_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = EvalConfig::default();
        for _ in 0..100 {
            let (dets, gt, known) = random_instance(&mut rng);
            let report = evaluate(&dets, &gt, &known, &cfg).unwrap();
            for tr in &report.tasks {
                for w in tr.ap.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{:?} {:?}", tr.task, tr.ap);
                }
            }
        }
    }

    #[test]
    fn prediction_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = EvalConfig::default();
        for _ in 0..50 {
            let (mut dets, gt, known) = random_instance(&mut rng);
            let base = evaluate(&dets, &gt, &known, &cfg).unwrap();
            for _ in 0..3 {
                for i in (1..dets.len()).rev() {
                    dets.swap(i, rng.gen_range(0..=i));
                }
                let got = evaluate(&dets, &gt, &known, &cfg).unwrap();
                assert_eq!(got, base);
            }
        }
    }

    // exact-arithmetic reimplementation on the quarter grid, used to
    // cross-check the float path end to end
    mod oracle {
        use super::super::{GroundTruthInstance, Task};
        use crate::postprocess::Detection;
        use num_rational::Ratio;
        use num_traits::ToPrimitive;
        use std::collections::BTreeMap;

        type R = Ratio<i64>;

        fn q(x: f64) -> R {
            Ratio::new((x * 4.0).round() as i64, 4)
        }

        fn iou(a: (R, R), b: (R, R)) -> R {
            let zero = Ratio::from_integer(0);
            let inter = (a.1.min(b.1) - a.0.max(b.0)).max(zero);
            let union = (a.1 - a.0) + (b.1 - b.0) - inter;
            if union <= zero {
                zero
            } else {
                inter / union
            }
        }

        fn ap(flags: &[bool], num_gt: usize) -> R {
            let zero = Ratio::from_integer(0);
            if num_gt == 0 {
                return zero;
            }
            let mut prec: Vec<R> = Vec::new();
            let mut tp = 0i64;
            for (i, &hit) in flags.iter().enumerate() {
                if hit {
                    tp += 1;
                }
                prec.push(Ratio::new(tp, i as i64 + 1));
            }
            for i in (0..prec.len().saturating_sub(1)).rev() {
                if prec[i + 1] > prec[i] {
                    prec[i] = prec[i + 1];
                }
            }
            let mut total = zero;
            for (i, &hit) in flags.iter().enumerate() {
                if hit {
                    total += prec[i] / Ratio::from_integer(num_gt as i64);
                }
            }
            total
        }

        pub fn task_map(
            dets: &[Detection],
            gt: &[GroundTruthInstance],
            task: Task,
            thr: R,
        ) -> f64 {
            let class = |verb: usize, noun: usize| match task {
                Task::Verb => (verb, 0),
                Task::Noun => (0, noun),
                Task::Action => (verb, noun),
            };
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&x, &y| {
                let (a, b) = (&dets[x], &dets[y]);
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.video_id.cmp(&b.video_id))
                    .then_with(|| a.start_sec.partial_cmp(&b.start_sec).unwrap())
                    .then_with(|| a.end_sec.partial_cmp(&b.end_sec).unwrap())
                    .then_with(|| a.action.cmp(&b.action))
            });
            let mut counts: BTreeMap<(usize, usize), i64> = BTreeMap::new();
            for g in gt {
                *counts.entry(class(g.verb, g.noun)).or_default() += 1;
            }
            let mut taken = vec![false; gt.len()];
            let mut flags: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
            for &di in &order {
                let d = &dets[di];
                let c = class(d.verb, d.noun);
                if !counts.contains_key(&c) {
                    continue;
                }
                let mut best: Option<(R, usize)> = None;
                for (gi, g) in gt.iter().enumerate() {
                    if taken[gi] || g.video_id != d.video_id || class(g.verb, g.noun) != c {
                        continue;
                    }
                    let v = iou(
                        (q(d.start_sec), q(d.end_sec)),
                        (q(g.start_sec), q(g.end_sec)),
                    );
                    if v < thr {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bv, bi)) => v > bv || (v == bv && gi < bi),
                    };
                    if better {
                        best = Some((v, gi));
                    }
                }
                let hit = if let Some((_, gi)) = best {
                    taken[gi] = true;
                    true
                } else {
                    false
                };
                flags.entry(c).or_default().push(hit);
            }
            if counts.is_empty() {
                return 0.0;
            }
            let mut total = Ratio::from_integer(0);
            for (c, &n) in &counts {
                let empty = Vec::new();
                total += ap(flags.get(c).unwrap_or(&empty), n as usize);
            }
            (total / Ratio::from_integer(counts.len() as i64))
                .to_f64()
                .unwrap()
        }
    }

    #[test]
    fn float_path_matches_exact_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(211);
        let cfg = EvalConfig::default();
        let mut checked = 0usize;
        for _ in 0..300 {
            let (dets, gt, known) = random_instance(&mut rng);
            let report = evaluate(&dets, &gt, &known, &cfg).unwrap();
            for tr in &report.tasks {
                for (ti, &ap) in tr.ap.iter().enumerate() {
                    let thr = num_rational::Ratio::new(ti as i64 + 1, 10);
                    let want = oracle::task_map(&dets, &gt, tr.task, thr);
                    assert!(
                        (ap - want).abs() <= 1e-12,
                        "{:?}@{} got {ap} want {want}",
                        tr.task,
                        ti
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 300 * 3 * 5);
    }

    #[test]
    fn rendered_table_is_stable() {
        let row = |task: Task, ap: Vec<f64>| {
            let average = ap.iter().sum::<f64>() / ap.len() as f64;
            TaskReport {
                task,
                ap,
                average,
                num_gt: 4,
                num_predictions: 7,
            }
        };
        let report = EvalReport {
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            tasks: vec![
                row(Task::Verb, vec![1.0; 5]),
                row(Task::Noun, vec![1.0, 0.75, 0.5, 0.25, 0.125]),
                row(Task::Action, vec![0.0; 5]),
            ],
        };
        let want = concat!(
            "task         @0.1     @0.2     @0.3     @0.4     @0.5      Avg\n",
            "verb       100.00   100.00   100.00   100.00   100.00   100.00\n",
            "noun       100.00    75.00    50.00    25.00    12.50    52.50\n",
            "action       0.00     0.00     0.00     0.00     0.00     0.00\n",
        );
        assert_eq!(render_report(&report), want);
    }

    #[test]
    fn report_json_round_trips() {
        let gt = vec![gti("a", 0.0, 2.0, 0, 1)];
        let dets = vec![det("a", 0.0, 2.0, 0, 1, 0.9)];
        let report = evaluate(&dets, &gt, &ids(&["a"]), &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report_json(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn file_level_evaluation_checks_ids() {
        use crate::dataset::{write_annotations, AnnotationFile, SegmentAnnotation, VideoAnnotation};
        use crate::postprocess::write_predictions;

        let dir = tempfile::tempdir().unwrap();
        let seg = SegmentAnnotation {
            start_sec: 1.0,
            end_sec: 3.0,
            verb: 0,
            noun: 1,
            extra: Default::default(),
        };
        let ann = AnnotationFile {
            videos: vec![VideoAnnotation {
                id: "clip".into(),
                duration_sec: 16.0,
                fps: 16.0,
                window_frames: 32,
                stride_frames: 16,
                feature_file: "clip.oadf".into(),
                segments: vec![seg],
                extra: Default::default(),
            }],
            extra: Default::default(),
        };
        let ann_path = dir.path().join("annotations.json");
        write_annotations(&ann_path, &ann).unwrap();

        let good = dir.path().join("good.json");
        write_predictions(&good, &[det("clip", 1.0, 3.0, 0, 1, 0.9)]).unwrap();
        let report = evaluate_files(&good, &ann_path, &EvalConfig::default()).unwrap();
        assert!((report.task(Task::Action).unwrap().average - 1.0).abs() < 1e-15);

        let bad = dir.path().join("bad.json");
        write_predictions(&bad, &[det("elsewhere", 1.0, 3.0, 0, 1, 0.9)]).unwrap();
        let err = evaluate_files(&bad, &ann_path, &EvalConfig::default()).unwrap_err();
        assert!(err.to_string().contains("elsewhere"));
    }
}
