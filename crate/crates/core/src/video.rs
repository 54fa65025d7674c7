//! Frame extraction at a capped frame rate and per-video majority voting.
//!
//! Decoding sits behind [`VideoSource`]. Two sources ship: [`FrameSequence`],
//! a directory of numbered frames plus a `video.json` declaring the native
//! frame rate and duration, and [`FfmpegVideo`], which shells out to the
//! system `ffmpeg`/`ffprobe` binaries for ordinary containers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Classifier, Detector};
use crate::pipeline::{run_batch, ImageOutcome, PipelineConfig, PipelineError, PipelineResult};
use crate::types::ImageRef;

/// Vote cast by a frame with no classified detection.
pub const EMPTY_LABEL: &str = "empty";

/// Metadata file of a frame-sequence container.
pub const SEQUENCE_META: &str = "video.json";

pub const DEFAULT_TARGET_FPS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("cannot decode video {path}: {message}")]
    VideoDecode { path: PathBuf, message: String },
    #[error("target fps must be positive, got {0}")]
    InvalidFps(f64),
    #[error("majority vote over zero frames")]
    EmptyVote,
    #[error("frame {index} failed: {message}")]
    FrameFailed { index: usize, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub native_fps: f64,
    pub duration_s: f64,
}

pub trait VideoSource {
    fn path(&self) -> &Path;

    fn meta(&self) -> VideoMeta;

    /// Images for the frames shown at each timestamp (seconds), in order.
    fn frames_at(&self, timestamps: &[f64]) -> Result<Vec<ImageRef>, VideoError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameSample {
    pub index: usize,
    pub timestamp_s: f64,
    pub image: ImageRef,
}

/// Frame rate actually used: the target, or the native rate when lower.
pub fn effective_fps(native_fps: f64, target_fps: f64) -> f64 {
    native_fps.min(target_fps)
}

/// Evenly spaced sample times `k / fps` covering `[0, duration)`; at least one.
pub fn sample_times(duration_s: f64, fps: f64) -> Vec<f64> {
    let count = ((duration_s * fps - 1e-9).ceil() as usize).max(1);
    (0..count).map(|k| k as f64 / fps).collect()
}

pub fn extract_frames(source: &dyn VideoSource, target_fps: f64) -> Result<(Vec<FrameSample>, f64), VideoError> {
    if !(target_fps > 0.0) || !target_fps.is_finite() {
        return Err(VideoError::InvalidFps(target_fps));
    }
    let meta = source.meta();
    let fps = effective_fps(meta.native_fps, target_fps);
    let times = sample_times(meta.duration_s, fps);
    let images = source.frames_at(&times)?;
    let frames = times
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(index, (timestamp_s, image))| FrameSample { index, timestamp_s, image })
        .collect();
    Ok((frames, fps))
}

/// Count-based vote. Ties go to the label with the higher mean confidence,
/// then to the lexicographically smallest label.
pub fn majority_vote(votes: &[(String, f64)]) -> Result<(String, BTreeMap<String, usize>), VideoError> {
    if votes.is_empty() {
        return Err(VideoError::EmptyVote);
    }
    let mut stats: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (label, conf) in votes {
        let e = stats.entry(label.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += conf;
    }
    // BTreeMap iterates labels in ascending order, so keeping the first of
    // equal candidates implements the lexicographic tie-break.
    let mut best: Option<(&str, usize, f64)> = None;
    for (&label, &(count, sum)) in &stats {
        let mean = sum / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean > bm),
        };
        if better {
            best = Some((label, count, mean));
        }
    }
    let tally = stats.iter().map(|(l, (c, _))| (l.to_string(), *c)).collect();
    Ok((best.expect("nonempty").0.to_string(), tally))
}

/// The vote of one frame: top class of its highest-confidence classified
/// detection, or [`EMPTY_LABEL`].
pub fn frame_vote(result: &PipelineResult) -> (String, f64) {
    result
        .detections
        .iter()
        .filter_map(|d| d.scores.as_ref().map(|s| (d.detection.confidence(), s)))
        .fold(None, |best: Option<(f64, &crate::types::ClassScores)>, (conf, s)| match best {
            Some((bc, _)) if bc >= conf => best,
            _ => Some((conf, s)),
        })
        .map(|(_, s)| {
            let (label, score) = s.top();
            (label.to_string(), score)
        })
        .unwrap_or_else(|| (EMPTY_LABEL.to_string(), 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoResult {
    pub video: PathBuf,
    pub frame_results: Vec<PipelineResult>,
    pub frame_votes: Vec<(String, f64)>,
    pub vote_tally: BTreeMap<String, usize>,
    pub final_label: String,
    pub effective_fps: f64,
}

pub fn classify_video(
    source: &dyn VideoSource,
    detector: &dyn Detector,
    classifier: Option<&dyn Classifier>,
    config: &PipelineConfig,
    target_fps: f64,
    progress: crate::pipeline::ProgressSink<'_>,
) -> Result<VideoResult, VideoError> {
    let (frames, fps) = extract_frames(source, target_fps)?;
    let images: Vec<ImageRef> = frames.into_iter().map(|f| f.image).collect();
    let outcomes = run_batch(&images, detector, classifier, config, progress)?;
    let mut frame_results = Vec::with_capacity(outcomes.len());
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            ImageOutcome::Done(r) => frame_results.push(r),
            ImageOutcome::Failed { error, .. } => return Err(VideoError::FrameFailed { index, message: error }),
        }
    }
    let frame_votes: Vec<(String, f64)> = frame_results.iter().map(frame_vote).collect();
    let (final_label, vote_tally) = majority_vote(&frame_votes)?;
    Ok(VideoResult {
        video: source.path().to_path_buf(),
        frame_results,
        frame_votes,
        vote_tally,
        final_label,
        effective_fps: fps,
    })
}

/// Opens a frame-sequence directory, or any other file through ffmpeg.
pub fn open_video(path: &Path) -> Result<Box<dyn VideoSource>, VideoError> {
    if path.is_dir() {
        Ok(Box::new(FrameSequence::open(path)?))
    } else {
        Ok(Box::new(FfmpegVideo::open(path)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequenceMeta {
    native_fps: f64,
    duration_s: f64,
}

/// Directory container: numbered frame images (sorted by file name) plus a
/// `video.json` with `native_fps` and `duration_s`.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    dir: PathBuf,
    meta: VideoMeta,
    frames: Vec<PathBuf>,
}

impl FrameSequence {
    pub fn open(dir: &Path) -> Result<Self, VideoError> {
        let fail = |message: String| VideoError::VideoDecode { path: dir.to_path_buf(), message };
        let text = fs::read_to_string(dir.join(SEQUENCE_META)).map_err(|e| fail(format!("{SEQUENCE_META}: {e}")))?;
        let m: SequenceMeta = serde_json::from_str(&text).map_err(|e| fail(format!("{SEQUENCE_META}: {e}")))?;
        if !(m.native_fps > 0.0) || !(m.duration_s > 0.0) {
            return Err(fail(format!("invalid native_fps {} / duration_s {}", m.native_fps, m.duration_s)));
        }
        let mut frames: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| fail(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image_file(p))
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(fail("no frames".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), meta: VideoMeta { native_fps: m.native_fps, duration_s: m.duration_s }, frames })
    }

    /// Writes `video.json` for a directory of frames.
    pub fn write_meta(dir: &Path, meta: VideoMeta) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&SequenceMeta { native_fps: meta.native_fps, duration_s: meta.duration_s })
            .expect("meta serializes");
        fs::write(dir.join(SEQUENCE_META), text)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

impl VideoSource for FrameSequence {
    fn path(&self) -> &Path {
        &self.dir
    }

    fn meta(&self) -> VideoMeta {
        self.meta
    }

    fn frames_at(&self, timestamps: &[f64]) -> Result<Vec<ImageRef>, VideoError> {
        let last = self.frames.len() - 1;
        Ok(timestamps
            .iter()
            .map(|t| {
                let idx = ((t * self.meta.native_fps + 1e-9).floor() as usize).min(last);
                ImageRef::new(&self.frames[idx])
            })
            .collect())
    }
}

pub(crate) fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Video decoded by the system ffmpeg. Sampled frames are written as PNGs
/// into a private temporary directory that lives as long as the source.
pub struct FfmpegVideo {
    path: PathBuf,
    meta: VideoMeta,
    scratch: tempfile::TempDir,
}

impl FfmpegVideo {
    pub fn open(path: &Path) -> Result<Self, VideoError> {
        let fail = |message: String| VideoError::VideoDecode { path: path.to_path_buf(), message };
        if !path.is_file() {
            return Err(fail("no such file".into()));
        }
        let out = Command::new("ffprobe")
            .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=avg_frame_rate:format=duration", "-of", "json"])
            .arg(path)
            .output()
            .map_err(|e| fail(format!("ffprobe unavailable: {e}")))?;
        if !out.status.success() {
            return Err(fail(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        let probe: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| fail(e.to_string()))?;
        let rate = probe["streams"][0]["avg_frame_rate"].as_str().unwrap_or("0/1");
        let native_fps = match rate.split_once('/') {
            Some((n, d)) => n.parse::<f64>().unwrap_or(0.0) / d.parse::<f64>().unwrap_or(1.0),
            None => rate.parse().unwrap_or(0.0),
        };
        let duration_s = probe["format"]["duration"].as_str().and_then(|s| s.parse().ok()).unwrap_or(0.0);
        if !(native_fps > 0.0) || !(duration_s > 0.0) {
            return Err(fail(format!("unusable stream: fps {native_fps}, duration {duration_s}")));
        }
        let scratch = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        Ok(Self { path: path.to_path_buf(), meta: VideoMeta { native_fps, duration_s }, scratch })
    }
}

impl VideoSource for FfmpegVideo {
    fn path(&self) -> &Path {
        &self.path
    }

    fn meta(&self) -> VideoMeta {
        self.meta
    }

    fn frames_at(&self, timestamps: &[f64]) -> Result<Vec<ImageRef>, VideoError> {
        let mut out = Vec::with_capacity(timestamps.len());
        for (i, t) in timestamps.iter().enumerate() {
            let frame = self.scratch.path().join(format!("frame_{i:06}.png"));
            let status = Command::new("ffmpeg")
                .args(["-v", "error", "-y", "-ss", &format!("{t:.6}"), "-i"])
                .arg(&self.path)
                .args(["-frames:v", "1"])
                .arg(&frame)
                .status()
                .map_err(|e| VideoError::VideoDecode { path: self.path.clone(), message: format!("ffmpeg unavailable: {e}") })?;
            if !status.success() || !frame.is_file() {
                return Err(VideoError::VideoDecode { path: self.path.clone(), message: format!("no frame at {t:.3}s") });
            }
            out.push(ImageRef::new(frame));
        }
        Ok(out)
    }
}
