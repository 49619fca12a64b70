//! Feature and annotation I/O, time calibration, and the synthetic dataset
//! generator.
//!
//! Feature files carry a `[T, D]` f32 grid. Timing metadata lives in the
//! annotation file; each feature row i summarizes the frame window
//! [i·stride, i·stride + window), timestamped at the window midpoint.
//!
//! Cell units: downstream assignment and decoding work in stride-cell
//! coordinates, where cell c corresponds to second `origin + c·stride/fps`
//! with `origin = (window - stride) / (2·fps)`. Under that map the window
//! midpoint of row i is exactly cell center i + 0.5, so feature timestamps
//! and pyramid candidate centers agree.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{open_file, Error, Result};
use crate::loss::GroundTruthSegment;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"OADF";
pub const FEATURE_VERSION: u32 = 1;

/// Sliding-window geometry of one feature sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeCalibration {
    pub fps: f64,
    pub window_frames: u32,
    pub stride_frames: u32,
}

impl TimeCalibration {
    pub fn new(fps: f64, window_frames: u32, stride_frames: u32) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {fps}")));
        }
        if window_frames == 0 || stride_frames == 0 {
            return Err(Error::Validation(
                "window_frames and stride_frames must be >= 1".into(),
            ));
        }
        Ok(TimeCalibration {
            fps,
            window_frames,
            stride_frames,
        })
    }

    /// Seconds per stride cell.
    pub fn cell_sec(&self) -> f64 {
        self.stride_frames as f64 / self.fps
    }

    /// Second of cell coordinate 0; nonzero when the window is wider than
    /// the stride, because row timestamps are window midpoints.
    pub fn origin_sec(&self) -> f64 {
        (self.window_frames as f64 - self.stride_frames as f64) / (2.0 * self.fps)
    }

    /// Timestamp of feature row i: midpoint of its frame window.
    pub fn index_to_sec(&self, index: usize) -> f64 {
        (index as f64 * self.stride_frames as f64 + self.window_frames as f64 / 2.0) / self.fps
    }

    pub fn sec_to_cells(&self, sec: f64) -> f64 {
        (sec - self.origin_sec()) / self.cell_sec()
    }

    pub fn cells_to_sec(&self, cells: f64) -> f64 {
        self.origin_sec() + cells * self.cell_sec()
    }

    /// Nearest feature row for a timestamp, clamped into `[0, len)`.
    pub fn nearest_index(&self, sec: f64, len: usize) -> usize {
        debug_assert!(len > 0);
        let c = self.sec_to_cells(sec) - 0.5;
        let i = c.round().max(0.0) as usize;
        i.min(len - 1)
    }

    /// Rows a duration supports: floor((duration·fps - window)/stride) + 1.
    /// A small slack absorbs float fuzz in stored durations.
    pub fn expected_len(&self, duration_sec: f64) -> Result<usize> {
        let frames = duration_sec * self.fps;
        let span = frames - self.window_frames as f64;
        if span < -1e-6 {
            return Err(Error::Validation(format!(
                "duration {duration_sec} s is shorter than one {} frame window at {} fps",
                self.window_frames, self.fps
            )));
        }
        Ok((span.max(0.0) / self.stride_frames as f64 + 1e-9).floor() as usize + 1)
    }
}

/// One video's features plus its timing metadata.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[T, D]`
    pub features: Tensor<f32>,
    pub calib: TimeCalibration,
    pub duration_sec: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape(
            "write_features",
            format!("need a nonempty [T, D] grid, got {:?}", shape),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(shape[0] as u32)?;
    w.write_u32::<LittleEndian>(shape[1] as u32)?;
    for &x in features.as_slice() {
        w.write_f32::<LittleEndian>(x)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `[T, D]` feature grid, validating the header against the payload.
pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let mut r = Reader::new(BufReader::new(open_file(path)?), path);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let t = r.u32("row count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if t == 0 || d == 0 {
        return Err(r.corrupt(format!("header claims an empty {t}x{d} grid")));
    }
    let n = t
        .checked_mul(d)
        .ok_or_else(|| r.corrupt(format!("{t}x{d} grid overflows")))?;
    let data = r.f32_vec(n, "feature payload")?;
    for &x in &data {
        if !x.is_finite() {
            return Err(r.corrupt(format!("non-finite feature value {x}")));
        }
    }
    r.expect_eof()?;
    Tensor::from_vec(vec![t, d], data)
}

fn window_frames_default() -> u32 {
    32
}
fn stride_frames_default() -> u32 {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start_sec: f64,
    pub end_sec: f64,
    pub verb: usize,
    pub noun: usize,
    #[serde(flatten, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub id: String,
    pub duration_sec: f64,
    pub fps: f64,
    #[serde(default = "window_frames_default")]
    pub window_frames: u32,
    #[serde(default = "stride_frames_default")]
    pub stride_frames: u32,
    pub feature_file: String,
    pub segments: Vec<SegmentAnnotation>,
    #[serde(flatten, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub videos: Vec<VideoAnnotation>,
    #[serde(flatten, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Parse the annotation JSON and validate video-level invariants. Unknown
/// fields are tolerated with a warning, for forward compatibility.
pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let file = open_file(path)?;
    let parsed: AnnotationFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if !parsed.extra.is_empty() {
        let keys: Vec<&str> = parsed.extra.keys().map(|s| s.as_str()).collect();
        log::warn!("{}: ignoring unknown fields {keys:?}", path.display());
    }
    let mut seen = std::collections::HashSet::new();
    for v in &parsed.videos {
        if !seen.insert(&v.id) {
            return Err(Error::Validation(format!("duplicate video id {}", v.id)));
        }
        if !(v.duration_sec.is_finite() && v.duration_sec > 0.0) {
            return Err(Error::Validation(format!(
                "video {}: duration_sec must be positive, got {}",
                v.id, v.duration_sec
            )));
        }
        TimeCalibration::new(v.fps, v.window_frames, v.stride_frames)
            .map_err(|e| Error::Validation(format!("video {}: {e}", v.id)))?;
        if !v.extra.is_empty() {
            let keys: Vec<&str> = v.extra.keys().map(|s| s.as_str()).collect();
            log::warn!("video {}: ignoring unknown fields {keys:?}", v.id);
        }
        for (i, s) in v.segments.iter().enumerate() {
            if !(s.start_sec.is_finite() && s.end_sec.is_finite()) || s.start_sec >= s.end_sec {
                return Err(Error::Validation(format!(
                    "video {} segment {i}: [{}, {}) is not a positive-length interval",
                    v.id, s.start_sec, s.end_sec
                )));
            }
            if s.start_sec < 0.0 || s.end_sec > v.duration_sec + 1e-9 {
                return Err(Error::Validation(format!(
                    "video {} segment {i}: [{}, {}] outside [0, {}]",
                    v.id, s.start_sec, s.end_sec, v.duration_sec
                )));
            }
            if !s.extra.is_empty() {
                let keys: Vec<&str> = s.extra.keys().map(|s| s.as_str()).collect();
                log::warn!("video {} segment {i}: ignoring unknown fields {keys:?}", v.id);
            }
        }
    }
    Ok(parsed)
}

pub fn write_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, file)
        .map_err(|e| Error::Parse(format!("annotation encode: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One loaded video: features joined with its annotation.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub sequence: FeatureSequence,
    pub segments: Vec<SegmentAnnotation>,
}

impl LoadedVideo {
    /// Segments converted to stride-cell units for assignment.
    pub fn segments_in_cells(&self) -> Vec<GroundTruthSegment> {
        self.segments
            .iter()
            .map(|s| GroundTruthSegment {
                start: self.sequence.calib.sec_to_cells(s.start_sec),
                end: self.sequence.calib.sec_to_cells(s.end_sec),
                verb: s.verb,
                noun: s.noun,
            })
            .collect()
    }
}

/// A full dataset with uniform feature dimension and inferred vocabularies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<LoadedVideo>,
    pub input_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
}

impl Dataset {
    pub fn max_len(&self) -> usize {
        self.videos.iter().map(|v| v.sequence.len()).max().unwrap_or(0)
    }
}

/// Load annotations plus every referenced feature file. `feature_file` paths
/// resolve relative to the annotation file's directory. Vocabulary sizes are
/// the largest ids seen plus one, unless larger floors are supplied.
pub fn load_dataset(
    annotations_path: &Path,
    min_verbs: usize,
    min_nouns: usize,
) -> Result<Dataset> {
    let parsed = read_annotations(annotations_path)?;
    if parsed.videos.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no videos",
            annotations_path.display()
        )));
    }
    let base = annotations_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(parsed.videos.len());
    let mut dim: Option<usize> = None;
    let mut num_verbs = min_verbs;
    let mut num_nouns = min_nouns;
    for v in parsed.videos {
        let calib = TimeCalibration::new(v.fps, v.window_frames, v.stride_frames)?;
        let fpath = base.join(&v.feature_file);
        let features = read_features(&fpath)?;
        let t = features.shape()[0];
        let d = features.shape()[1];
        let expected = calib.expected_len(v.duration_sec).map_err(|e| {
            Error::Validation(format!("video {}: {e}", v.id))
        })?;
        if t != expected {
            return Err(Error::Validation(format!(
                "video {}: {} feature rows, but duration {} s at {} fps implies {}",
                v.id, t, v.duration_sec, v.fps, expected
            )));
        }
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Validation(format!(
                    "video {}: feature dim {d} differs from {prev}",
                    v.id
                )));
            }
            _ => {}
        }
        for s in &v.segments {
            num_verbs = num_verbs.max(s.verb + 1);
            num_nouns = num_nouns.max(s.noun + 1);
        }
        videos.push(LoadedVideo {
            sequence: FeatureSequence {
                video_id: v.id,
                features,
                calib,
                duration_sec: v.duration_sec,
            },
            segments: v.segments,
        });
    }
    Ok(Dataset {
        videos,
        input_dim: dim.expect("nonempty dataset"),
        num_verbs: num_verbs.max(1),
        num_nouns: num_nouns.max(1),
    })
}

fn synth_fps_default() -> f64 {
    16.0
}
fn snr_default() -> f64 {
    4.0
}
fn min_duration_default() -> f64 {
    16.0
}
fn max_duration_default() -> f64 {
    32.0
}

/// Recipe for a synthetic dataset; the seed fully determines the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub feature_dim: usize,
    #[serde(default = "min_duration_default")]
    pub min_duration_sec: f64,
    #[serde(default = "max_duration_default")]
    pub max_duration_sec: f64,
    #[serde(default = "snr_default")]
    pub snr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "synth_fps_default")]
    pub fps: f64,
    #[serde(default = "window_frames_default")]
    pub window_frames: u32,
    #[serde(default = "stride_frames_default")]
    pub stride_frames: u32,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.num_videos == 0 {
            return bad("num_videos must be >= 1".into());
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return bad("num_verbs and num_nouns must be >= 1".into());
        }
        let half = self.feature_dim / 2;
        if half < self.num_verbs || half < self.num_nouns {
            return bad(format!(
                "feature_dim {} too small: verb and noun blocks each need \
                 one channel per class in half the dim",
                self.feature_dim
            ));
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return bad(format!("snr must be >= 0, got {}", self.snr));
        }
        if !(self.min_duration_sec > 0.0 && self.max_duration_sec >= self.min_duration_sec) {
            return bad(format!(
                "duration range [{}, {}] is invalid",
                self.min_duration_sec, self.max_duration_sec
            ));
        }
        TimeCalibration::new(self.fps, self.window_frames, self.stride_frames)?;
        Ok(())
    }

    fn calib(&self) -> TimeCalibration {
        TimeCalibration {
            fps: self.fps,
            window_frames: self.window_frames,
            stride_frames: self.stride_frames,
        }
    }
}

/// Draw 1-5 non-overlapping segments inside `[0, duration]`, each at least
/// `min_len` long, by splitting the slack across the gaps.
fn pack_segments(
    rng: &mut ChaCha8Rng,
    duration: f64,
    min_len: f64,
    max_len: f64,
    num_verbs: usize,
    num_nouns: usize,
) -> Result<Vec<SegmentAnnotation>> {
    let max_fit = (duration / min_len).floor() as usize;
    if max_fit == 0 {
        return Err(Error::Validation(format!(
            "duration {duration} s cannot fit a single {min_len} s segment"
        )));
    }
    let k = rng.gen_range(1..=5).min(max_fit);
    // Capping draws at duration/k guarantees the lengths fit; k <= max_fit
    // keeps that cap at or above min_len.
    let hi = (duration / k as f64).min(max_len).max(min_len);
    let lengths: Vec<f64> = (0..k).map(|_| rng.gen_range(min_len..=hi)).collect();
    let used: f64 = lengths.iter().sum();
    let free = (duration - used).max(0.0);
    // k+1 gaps from sorted uniforms over the free span.
    let mut cuts: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=free)).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.insert(0, 0.0);
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0.0;
    for (i, len) in lengths.iter().enumerate() {
        let gap = cuts[i + 1] - cuts[i];
        let start = cursor + gap;
        let end = start + len;
        cursor = end;
        out.push(SegmentAnnotation {
            start_sec: start,
            end_sec: end.min(duration),
            verb: rng.gen_range(0..num_verbs),
            noun: rng.gen_range(0..num_nouns),
            extra: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// Generate feature files plus an annotation file under `out_dir`; returns
/// the annotation file's path.
///
/// During a segment with verb v and noun n, channel v of the first half and
/// channel n of the second half are raised by the SNR; everything rides on
/// unit Gaussian noise.
pub fn synthesize(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let calib = spec.calib();
    let cell = calib.cell_sec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.feature_dim / 2;
    let mut videos = Vec::with_capacity(spec.num_videos);
    for vi in 0..spec.num_videos {
        // Integer row counts back out to exact durations, keeping the length
        // invariant free of float fuzz.
        let t_min = calib.expected_len(spec.min_duration_sec)?;
        let t_max = calib.expected_len(spec.max_duration_sec)?;
        let t = rng.gen_range(t_min..=t_max.max(t_min));
        let duration = ((t as f64 - 1.0) * spec.stride_frames as f64
            + spec.window_frames as f64)
            / spec.fps;
        let segments = pack_segments(
            &mut rng,
            duration,
            2.0 * cell,
            10.0 * cell,
            spec.num_verbs,
            spec.num_nouns,
        )?;
        let mut grid = vec![0f32; t * spec.feature_dim];
        for x in grid.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *x = noise as f32;
        }
        for i in 0..t {
            let ts = calib.index_to_sec(i);
            for s in &segments {
                if ts >= s.start_sec && ts <= s.end_sec {
                    grid[i * spec.feature_dim + s.verb] += spec.snr as f32;
                    grid[i * spec.feature_dim + half + s.noun] += spec.snr as f32;
                }
            }
        }
        let id = format!("synth_{vi:04}");
        let feature_file = format!("{id}.oadf");
        let features = Tensor::from_vec(vec![t, spec.feature_dim], grid)?;
        write_features(&out_dir.join(&feature_file), &features)?;
        videos.push(VideoAnnotation {
            id,
            duration_sec: duration,
            fps: spec.fps,
            window_frames: spec.window_frames,
            stride_frames: spec.stride_frames,
            feature_file,
            segments,
            extra: BTreeMap::new(),
        });
    }
    let path = out_dir.join("annotations.json");
    write_annotations(
        &path,
        &AnnotationFile {
            videos,
            extra: BTreeMap::new(),
        },
    )?;
    Ok(path)
}
