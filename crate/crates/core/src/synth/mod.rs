//! Seeded synthetic videos with planted anomalies, and scripted judges that
//! play the model's role against them.
//!
//! Frame handles are self-describing: `synth://<id>/<index>?planted=<0|1>`,
//! so any consumer can check which source frame it was given and whether an
//! anomaly was planted there without a side channel.

pub mod fixtures;
pub mod judge;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::ANNOTATION_FPS;
use crate::domain::{
    AnomalyAnnotation, AnomalyType, BBox, FrameSpan, GroundTruth, SaliencyLabel, Status, VideoDescriptor,
};
use crate::sampling::{sample_indices, Fps};

pub use judge::{scripted_judge, JudgeScript, MalformedMode, ScriptedJudge};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec {id}: {reason}")]
    InvalidSpec { id: String, reason: String },
}

/// One planted anomaly: source-frame span and a box moving linearly from
/// `box_start` to `box_end` across it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAnomaly {
    pub kind: AnomalyType,
    pub start_frame: usize,
    pub end_frame: usize,
    pub box_start: BBox,
    pub box_end: BBox,
    pub saliency: SaliencyLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub id: String,
    pub seed: u64,
    pub duration_seconds: f64,
    pub source_fps: Fps,
    #[serde(default)]
    pub plan: Vec<PlannedAnomaly>,
}

pub fn synth_handle(video_id: &str, index: usize, planted: bool) -> String {
    format!("synth://{video_id}/{index:06}?planted={}", u8::from(planted))
}

/// Splits a `scheme://<id>/<index>[?...]` handle into video id and frame index.
pub fn parse_handle(handle: &str) -> Option<(&str, usize)> {
    let (_, rest) = handle.split_once("://")?;
    let rest = rest.split_once('?').map_or(rest, |(path, _)| path);
    let (id, index) = rest.rsplit_once('/')?;
    Some((id, index.parse().ok()?))
}

/// Whether a synthetic handle marks a planted frame.
pub fn handle_is_planted(handle: &str) -> Option<bool> {
    match handle.rsplit_once("?planted=")?.1 {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn lerp_box(a: BBox, b: BBox, t: f64) -> BBox {
    let mix = |x: i64, y: i64| (x as f64 + t * (y - x) as f64).round() as i64;
    BBox { xmin: mix(a.xmin, b.xmin), ymin: mix(a.ymin, b.ymin), xmax: mix(a.xmax, b.xmax), ymax: mix(a.ymax, b.ymax) }
}

/// Builds the video and its ground truth on the sparse annotation basis.
///
/// Each plan becomes one annotation covering the annotation frames whose
/// source index falls inside the planned span, with one box per frame.
pub fn generate_video(spec: &SynthSpec) -> Result<(VideoDescriptor, GroundTruth), SynthError> {
    let bad = |reason: String| SynthError::InvalidSpec { id: spec.id.clone(), reason };
    if !(spec.duration_seconds.is_finite() && spec.duration_seconds > 0.0) {
        return Err(bad(format!("duration must be positive, got {}", spec.duration_seconds)));
    }
    let frame_count = ((spec.duration_seconds * spec.source_fps.as_f64()).round() as usize).max(1);
    let sparse = sample_indices(frame_count, spec.source_fps, Fps::integer(ANNOTATION_FPS));
    let mut anomalies = Vec::with_capacity(spec.plan.len());
    for (i, p) in spec.plan.iter().enumerate() {
        if p.start_frame > p.end_frame || p.end_frame >= frame_count {
            return Err(bad(format!(
                "plan {i}: span {}..={} outside {frame_count} frames",
                p.start_frame, p.end_frame
            )));
        }
        if !p.box_start.is_valid() || !p.box_end.is_valid() {
            return Err(bad(format!("plan {i}: invalid box")));
        }
        let covered: Vec<usize> =
            (0..sparse.len()).filter(|&j| (p.start_frame..=p.end_frame).contains(&sparse[j])).collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            return Err(bad(format!(
                "plan {i}: span {}..={} contains no annotation frame",
                p.start_frame, p.end_frame
            )));
        };
        let boxes: BTreeMap<usize, Vec<BBox>> = covered
            .iter()
            .map(|&j| {
                let len = p.end_frame - p.start_frame;
                let t = if len == 0 { 0.0 } else { (sparse[j] - p.start_frame) as f64 / len as f64 };
                (j, vec![lerp_box(p.box_start, p.box_end, t)])
            })
            .collect();
        anomalies.push(AnomalyAnnotation {
            kind: p.kind,
            span: FrameSpan::sparse(first, last),
            reason: format!(
                "planted {} on source frames {}-{}",
                p.kind.name().to_lowercase(),
                p.start_frame,
                p.end_frame
            ),
            boxes,
            saliency: p.saliency,
        });
    }
    let planted = |f: usize| spec.plan.iter().any(|p| (p.start_frame..=p.end_frame).contains(&f));
    let frames = (0..frame_count).map(|f| synth_handle(&spec.id, f, planted(f))).collect();
    let video = VideoDescriptor::new(spec.id.clone(), spec.source_fps, frames).map_err(|e| bad(e.to_string()))?;
    let status = if anomalies.is_empty() { Status::Normal } else { Status::Abnormal };
    Ok((video, GroundTruth { video_id: spec.id.clone(), status, anomalies }))
}

fn random_box(rng: &mut ChaCha8Rng, side: std::ops::RangeInclusive<i64>) -> BBox {
    let w = rng.random_range(side.clone());
    let h = rng.random_range(side);
    let x = rng.random_range(0..=1000 - w);
    let y = rng.random_range(0..=1000 - h);
    BBox { xmin: x, ymin: y, xmax: x + w, ymax: y + h }
}

/// Moves a box by up to `max_shift` per axis, staying inside the frame.
fn drift_box(rng: &mut ChaCha8Rng, b: BBox, max_shift: i64) -> BBox {
    let (w, h) = (b.xmax - b.xmin, b.ymax - b.ymin);
    let x = (b.xmin + rng.random_range(-max_shift..=max_shift)).clamp(0, 1000 - w);
    let y = (b.ymin + rng.random_range(-max_shift..=max_shift)).clamp(0, 1000 - h);
    BBox { xmin: x, ymin: y, xmax: x + w, ymax: y + h }
}

/// Default synthetic clip: 5 s at 24 fps.
pub const DEFAULT_DURATION_S: f64 = 5.0;
pub const DEFAULT_SOURCE_FPS: u32 = 24;

/// A plan covering `sparse_len` consecutive annotation frames starting at a
/// random annotation frame.
fn random_plan(
    rng: &mut ChaCha8Rng,
    kind: AnomalyType,
    sparse: &[usize],
    sparse_len: std::ops::RangeInclusive<usize>,
    side: std::ops::RangeInclusive<i64>,
    moving: bool,
) -> PlannedAnomaly {
    let len = rng.random_range(sparse_len).min(sparse.len());
    let start = rng.random_range(0..=sparse.len() - len);
    let box_start = random_box(rng, side);
    let box_end = if moving { drift_box(rng, box_start, 150) } else { box_start };
    let saliency = if rng.random_bool(0.7) { SaliencyLabel::Salient } else { SaliencyLabel::NonSalient };
    PlannedAnomaly {
        kind,
        start_frame: sparse[start],
        end_frame: sparse[start + len - 1],
        box_start,
        box_end,
        saliency,
    }
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n_normal` normal videos followed by `n_abnormal` abnormal ones whose
/// primary anomaly types cycle through the whole taxonomy; every third
/// abnormal video carries a second anomaly of the next type.
pub fn balanced_corpus(seed: u64, n_normal: usize, n_abnormal: usize) -> Vec<(VideoDescriptor, GroundTruth)> {
    let fps = Fps::integer(DEFAULT_SOURCE_FPS);
    let frame_count = (DEFAULT_DURATION_S * DEFAULT_SOURCE_FPS as f64) as usize;
    let sparse = sample_indices(frame_count, fps, Fps::integer(ANNOTATION_FPS));
    (0..n_normal + n_abnormal)
        .map(|i| {
            let mut rng = rng_for(seed, i);
            let mut plan = Vec::new();
            if i >= n_normal {
                let a = i - n_normal;
                let kind = AnomalyType::ALL[a % AnomalyType::ALL.len()];
                plan.push(random_plan(&mut rng, kind, &sparse, 1..=8, 80..=500, true));
                if a.is_multiple_of(3) {
                    let second = AnomalyType::ALL[(a + 1) % AnomalyType::ALL.len()];
                    plan.push(random_plan(&mut rng, second, &sparse, 1..=6, 80..=500, true));
                }
            }
            let spec = SynthSpec {
                id: format!("syn-{seed}-{i:04}"),
                seed,
                duration_seconds: DEFAULT_DURATION_S,
                source_fps: fps,
                plan,
            };
            generate_video(&spec).expect("generated plans are valid")
        })
        .collect()
}

/// `per_bucket` abnormal videos for each hard-split bucket, in the order
/// (<1 s, <20%), (<1 s, ≥20%), (≥1 s, <20%), (≥1 s, ≥20%).
///
/// Short anomalies cover 1–3 annotation frames (0.25–0.75 s), long ones 4–12;
/// small boxes have sides of 100–400 (at most 16% of the frame), large ones
/// 500–900 (at least 25%). Boxes are static.
pub fn hard_split_corpus(seed: u64, per_bucket: usize) -> Vec<(VideoDescriptor, GroundTruth)> {
    let fps = Fps::integer(DEFAULT_SOURCE_FPS);
    let frame_count = (DEFAULT_DURATION_S * DEFAULT_SOURCE_FPS as f64) as usize;
    let sparse = sample_indices(frame_count, fps, Fps::integer(ANNOTATION_FPS));
    (0..4 * per_bucket)
        .map(|i| {
            let bucket = i / per_bucket;
            let mut rng = rng_for(seed, i);
            let frames = if bucket < 2 { 1..=3 } else { 4..=12 };
            let side = if bucket.is_multiple_of(2) { 100..=400 } else { 500..=900 };
            let kind = AnomalyType::ALL[i % AnomalyType::ALL.len()];
            let spec = SynthSpec {
                id: format!("hard-{seed}-{bucket}-{i:04}"),
                seed,
                duration_seconds: DEFAULT_DURATION_S,
                source_fps: fps,
                plan: vec![random_plan(&mut rng, kind, &sparse, frames, side, false)],
            };
            generate_video(&spec).expect("generated plans are valid")
        })
        .collect()
}
