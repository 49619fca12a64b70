//! The five pipeline commands: synthesize, train, predict, ensemble,
//! evaluate. Each is deterministic for fixed inputs and seed, and writes
//! byte-stable outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use oadt_core::autodiff::Tape;
use oadt_core::checkpoint::{load_checkpoint, save_checkpoint};
use oadt_core::dataset::{load_dataset, synthesize, SynthSpec};
use oadt_core::error::{Error, Result};
use oadt_core::evaluator::{evaluate_files, render_report, write_report_json};
use oadt_core::nn::{Ctx, PaddingMask};
use oadt_core::postprocess::{
    decode, detection_order, ensemble, read_predictions, soft_nms, write_predictions, Detection,
};
use oadt_core::trainer;

use crate::config::{apply_overrides, load_table, need, typed, RunConfig};

fn run_config(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = load_table(file)?;
    apply_overrides(&mut table, sets)?;
    let mut rc: RunConfig = typed(table, "run config")?;
    if seed.is_some() {
        rc.seed = seed;
    }
    Ok(rc)
}

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>, sets: &[String]) -> Result<()> {
    let mut table = load_table(Some(spec_path))?;
    apply_overrides(&mut table, sets)?;
    let mut spec: SynthSpec = typed(table, "synth spec")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let annotations = synthesize(&spec, out)?;
    println!("wrote {}", annotations.display());
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let rc = run_config(config, sets, seed)?;
    let data = need(data, rc.data.clone(), "data")?;
    let out = need(out, rc.out.clone(), "out")?;

    let ds = load_dataset(&data, rc.num_verbs.unwrap_or(0), rc.num_nouns.unwrap_or(0))?;
    let mc = rc.model_config(ds.input_dim, ds.num_verbs, ds.num_nouns);
    let tc = rc.train_config();
    let lw = rc.loss_weights();

    fs::create_dir_all(&out)?;
    let mut metrics = BufWriter::new(fs::File::create(out.join("metrics.csv"))?);
    let result = trainer::train::<f32>(&ds, &mc, &tc, &lw, &mut metrics)?;
    metrics.flush()?;
    save_checkpoint(&out.join("best.ckpt"), &result.best)?;
    save_checkpoint(&out.join("last.ckpt"), &result.last)?;
    let last_mean = result.epochs.last().map(|e| e.mean.total);
    println!(
        "trained {} steps ({} epochs), last epoch mean loss {}, wrote {}",
        result.steps_run,
        result.epochs.len(),
        last_mean.map_or("n/a".into(), |l| format!("{l:.6}")),
        out.display()
    );
    Ok(())
}

/// Run the model over every video and decode. Suppression and the detection
/// cap apply per video; `apply_nms = false` keeps the raw thresholded
/// candidates for later fusion.
pub fn predict(
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    decode_config: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let rc = run_config(decode_config, sets, seed)?;
    let checkpoint = need(checkpoint, rc.checkpoint.clone(), "checkpoint")?;
    let data = need(data, rc.data.clone(), "data")?;
    let out = need(out, rc.out.clone(), "out")?;
    let dc = rc.decode_config();
    dc.validate()?;

    let ck = load_checkpoint(&checkpoint)?;
    let model = ck.build_model::<f32>()?;
    let mc = model.config().clone();
    let ds = load_dataset(&data, mc.num_verbs, mc.num_nouns)?;
    if ds.input_dim != mc.input_dim {
        return Err(Error::Validation(format!(
            "dataset features have dim {}, checkpoint expects {}",
            ds.input_dim, mc.input_dim
        )));
    }
    if ds.max_len() > mc.max_seq_len {
        return Err(Error::Validation(format!(
            "longest video has {} rows, checkpoint caps sequences at {}",
            ds.max_len(),
            mc.max_seq_len
        )));
    }

    let mut all = Vec::new();
    for video in &ds.videos {
        let t = video.sequence.len();
        let feats = video.sequence.features.reshaped(vec![1, t, ds.input_dim])?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(feats);
        let mask = PaddingMask::full(1, t);
        let mut ctx = Ctx::inference(&mut tape);
        let fwd = model.forward(&mut ctx, x, &mask)?;
        let outputs = fwd.materialize(&tape);
        let mut dets = decode(&outputs, 0, &video.sequence.video_id, &video.sequence.calib, &dc)?;
        if dc.apply_nms {
            dets = soft_nms(&dets, &dc)?;
        }
        all.extend(dets);
    }
    all.sort_by(detection_order);
    write_predictions(&out, &all)?;
    println!("wrote {} detections to {}", all.len(), out.display());
    Ok(())
}

/// Fuse per-model prediction files video by video so the detection cap
/// stays per video, like `predict`.
pub fn ensemble_cmd(
    predictions: Vec<PathBuf>,
    weights: Vec<f64>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let rc = run_config(None, sets, seed)?;
    let predictions = if predictions.is_empty() {
        rc.predictions.clone().unwrap_or_default()
    } else {
        predictions
    };
    if predictions.is_empty() {
        return Err(Error::Validation(
            "no prediction files: pass --predictions or set `predictions`".into(),
        ));
    }
    let weights = if weights.is_empty() {
        rc.weights.clone()
    } else {
        Some(weights)
    };
    let out = need(out, rc.out.clone(), "out")?;
    let dc = rc.decode_config();
    dc.validate()?;

    let per_model: Vec<Vec<Detection>> = predictions
        .iter()
        .map(|p| read_predictions(p))
        .collect::<Result<_>>()?;
    let mut videos: Vec<&str> = per_model
        .iter()
        .flatten()
        .map(|d| d.video_id.as_str())
        .collect();
    videos.sort_unstable();
    videos.dedup();

    let mut fused = Vec::new();
    for video in videos {
        let slices: Vec<Vec<Detection>> = per_model
            .iter()
            .map(|m| m.iter().filter(|d| d.video_id == video).cloned().collect())
            .collect();
        fused.extend(ensemble(&slices, weights.as_deref(), &dc)?);
    }
    fused.sort_by(detection_order);
    write_predictions(&out, &fused)?;
    println!("wrote {} detections to {}", fused.len(), out.display());
    Ok(())
}

pub fn eval(
    predictions: Option<PathBuf>,
    annotations: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let rc = run_config(None, sets, seed)?;
    let predictions = need(
        predictions,
        rc.predictions.as_ref().and_then(|p| match p.as_slice() {
            [one] => Some(one.clone()),
            _ => None,
        }),
        "predictions",
    )?;
    let annotations = need(annotations, rc.annotations.clone(), "annotations")?;
    let ec = rc.eval_config();
    ec.validate()?;
    let report = evaluate_files(&predictions, &annotations, &ec)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(render_report(&report).as_bytes())?;
    stdout.flush()?;
    if let Some(path) = out.or(rc.out) {
        write_report_json(&path, &report)?;
    }
    Ok(())
}
