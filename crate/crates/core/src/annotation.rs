//! Annotation file format and ground-truth validation.
//!
//! One JSON document per video:
//!
//! ```json
//! {
//!   "video_id": "clip-0001",
//!   "frame_count": 120,
//!   "source_fps": 24,
//!   "status": "abnormal",
//!   "anomalies": [
//!     {
//!       "type": "Human Distortion",
//!       "start_frame": 3,
//!       "end_frame": 7,
//!       "reason": "extra finger on the left hand",
//!       "saliency": "salient",
//!       "boxes": { "3": [[120, 80, 260, 240]], "7": [[130, 90, 270, 250]] }
//!     }
//!   ]
//! }
//! ```
//!
//! Frame indices (`start_frame`, `end_frame`, box keys) refer to the sparse
//! annotation sequence obtained by sampling the source video at the
//! annotation rate. Unknown keys are ignored with a warning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    parse_taxonomy_label, AnomalyAnnotation, BBox, FrameSpan, GroundTruth, SaliencyLabel, SpanBasis, Status,
    VideoDescriptor,
};
use crate::sampling::{sample_frames, Fps};

/// Sampling rate of the annotation sequence, in frames per second.
pub const ANNOTATION_FPS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    NormalWithAnomalies,
    AbnormalWithoutAnomalies,
    UnknownType,
    InvertedSpan,
    SpanOutOfRange,
    WrongBasis,
    InvalidBox,
    BoxOutsideSpan,
    BadFrameKey,
    BadBoxShape,
    InvalidVideo,
    VideoIdMismatch,
    Schema,
}

impl ViolationKind {
    /// The wire code, e.g. `SPAN_OUT_OF_RANGE`.
    pub fn code(self) -> &'static str {
        match self {
            ViolationKind::NormalWithAnomalies => "NORMAL_WITH_ANOMALIES",
            ViolationKind::AbnormalWithoutAnomalies => "ABNORMAL_WITHOUT_ANOMALIES",
            ViolationKind::UnknownType => "UNKNOWN_TYPE",
            ViolationKind::InvertedSpan => "INVERTED_SPAN",
            ViolationKind::SpanOutOfRange => "SPAN_OUT_OF_RANGE",
            ViolationKind::WrongBasis => "WRONG_BASIS",
            ViolationKind::InvalidBox => "INVALID_BOX",
            ViolationKind::BoxOutsideSpan => "BOX_OUTSIDE_SPAN",
            ViolationKind::BadFrameKey => "BAD_FRAME_KEY",
            ViolationKind::BadBoxShape => "BAD_BOX_SHAPE",
            ViolationKind::InvalidVideo => "INVALID_VIDEO",
            ViolationKind::VideoIdMismatch => "VIDEO_ID_MISMATCH",
            ViolationKind::Schema => "SCHEMA",
        }
    }
}

/// One problem found in an annotation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// JSON-pointer-like location, e.g. `anomalies[0].boxes.3[1]`.
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(kind: ViolationKind, path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { kind, path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}: {}", self.kind.code(), self.message)
        } else {
            write!(f, "{} at {}: {}", self.kind.code(), self.path, self.message)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("annotation is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation for {video_id} has {} violation(s); first: {}", .violations.len(), .violations[0])]
    Invalid { video_id: String, violations: Vec<Violation> },
}

/// Serialized anomaly record as it appears in an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub start_frame: usize,
    pub end_frame: usize,
    #[serde(default)]
    pub reason: String,
    pub saliency: SaliencyLabel,
    #[serde(default)]
    pub boxes: BTreeMap<String, Vec<Vec<i64>>>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, Value>,
}

/// Serialized annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub video_id: String,
    pub frame_count: usize,
    pub source_fps: Fps,
    pub status: Status,
    #[serde(default)]
    pub anomalies: Vec<AnomalyRecord>,
    /// Optional explicit frame handles; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<String>>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, Value>,
}

impl AnnotationFile {
    pub fn from_json_str(text: &str) -> Result<Self, AnnotationError> {
        let file: AnnotationFile = serde_json::from_str(text)?;
        file.warn_unknown_keys();
        Ok(file)
    }

    pub fn from_path(path: &Path) -> Result<Self, AnnotationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| AnnotationError::Io { path: path.display().to_string(), source })?;
        AnnotationFile::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serializes")
    }

    fn warn_unknown_keys(&self) {
        for key in self.unknown.keys() {
            log::warn!("{}: ignoring unknown annotation key {key:?}", self.video_id);
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            for key in a.unknown.keys() {
                log::warn!("{}: ignoring unknown key {key:?} in anomalies[{i}]", self.video_id);
            }
        }
    }

    /// Builds the serialized form from typed values.
    pub fn from_parts(video: &VideoDescriptor, gt: &GroundTruth, with_handles: bool) -> Self {
        let anomalies = gt
            .anomalies
            .iter()
            .map(|a| AnomalyRecord {
                kind: a.kind.name().to_string(),
                start_frame: a.span.start,
                end_frame: a.span.end,
                reason: a.reason.clone(),
                saliency: a.saliency,
                boxes: a
                    .boxes
                    .iter()
                    .map(|(f, bs)| (f.to_string(), bs.iter().map(|b| b.to_array().to_vec()).collect()))
                    .collect(),
                unknown: BTreeMap::new(),
            })
            .collect();
        AnnotationFile {
            video_id: gt.video_id.clone(),
            frame_count: video.frame_count,
            source_fps: video.source_fps,
            status: gt.status,
            anomalies,
            frames: with_handles.then(|| video.frames.clone()),
            unknown: BTreeMap::new(),
        }
    }

    /// Converts to typed values, collecting every structural problem found on
    /// the way, then runs [`validate_ground_truth`] on the result.
    pub fn to_parts(&self) -> Result<(VideoDescriptor, GroundTruth), Vec<Violation>> {
        let mut violations = Vec::new();
        let frames = match &self.frames {
            Some(f) => f.clone(),
            None => (0..self.frame_count).map(|i| crate::domain::default_handle(&self.video_id, i)).collect(),
        };
        let video = VideoDescriptor {
            id: self.video_id.clone(),
            frame_count: self.frame_count,
            source_fps: self.source_fps,
            frames,
        };
        let mut anomalies = Vec::new();
        for (i, rec) in self.anomalies.iter().enumerate() {
            let at = format!("anomalies[{i}]");
            let kind = match parse_taxonomy_label(&rec.kind) {
                Ok(k) => Some(k),
                Err(_) => {
                    violations.push(Violation::new(
                        ViolationKind::UnknownType,
                        format!("{at}.type"),
                        format!("{:?} is not a taxonomy label", rec.kind),
                    ));
                    None
                }
            };
            let mut boxes: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
            for (key, list) in &rec.boxes {
                let Ok(frame) = key.trim().parse::<usize>() else {
                    violations.push(Violation::new(
                        ViolationKind::BadFrameKey,
                        format!("{at}.boxes.{key}"),
                        "box keys must be decimal frame indices",
                    ));
                    continue;
                };
                let mut parsed = Vec::new();
                for (j, coords) in list.iter().enumerate() {
                    match <[i64; 4]>::try_from(coords.as_slice()) {
                        Ok(a) => parsed.push(BBox::from_array(a)),
                        Err(_) => violations.push(Violation::new(
                            ViolationKind::BadBoxShape,
                            format!("{at}.boxes.{key}[{j}]"),
                            format!("expected 4 integers, got {}", coords.len()),
                        )),
                    }
                }
                boxes.entry(frame).or_default().extend(parsed);
            }
            if let Some(kind) = kind {
                anomalies.push(AnomalyAnnotation {
                    kind,
                    span: FrameSpan::sparse(rec.start_frame, rec.end_frame),
                    reason: rec.reason.clone(),
                    boxes,
                    saliency: rec.saliency,
                });
            }
        }
        let gt = GroundTruth { video_id: self.video_id.clone(), status: self.status, anomalies };
        if violations.is_empty() {
            let found = validate_ground_truth(&gt, &video);
            if found.is_empty() {
                return Ok((video, gt));
            }
            violations.extend(found);
        } else {
            // Still report semantic problems of the parts that did parse.
            violations.extend(validate_ground_truth(&gt, &video));
        }
        Err(violations)
    }
}

/// Length of the sparse annotation sequence for `video`.
pub fn annotation_length(video: &VideoDescriptor) -> usize {
    sample_frames(video, Fps::integer(ANNOTATION_FPS)).len()
}

/// Checks every ground-truth invariant against `video`. Never panics; an
/// empty list means the record is valid.
pub fn validate_ground_truth(gt: &GroundTruth, video: &VideoDescriptor) -> Vec<Violation> {
    let mut out = Vec::new();
    if gt.video_id != video.id {
        out.push(Violation::new(
            ViolationKind::VideoIdMismatch,
            "video_id",
            format!("ground truth names {:?}, video is {:?}", gt.video_id, video.id),
        ));
    }
    if let Err(e) = video.check() {
        out.push(Violation::new(ViolationKind::InvalidVideo, "frame_count", e.to_string()));
        return out;
    }
    match (gt.status, gt.anomalies.is_empty()) {
        (Status::Normal, false) => out.push(Violation::new(
            ViolationKind::NormalWithAnomalies,
            "anomalies",
            "normal videos must have an empty anomaly list",
        )),
        (Status::Abnormal, true) => out.push(Violation::new(
            ViolationKind::AbnormalWithoutAnomalies,
            "anomalies",
            "abnormal videos need at least one anomaly",
        )),
        _ => {}
    }
    let length = annotation_length(video);
    for (i, a) in gt.anomalies.iter().enumerate() {
        let at = format!("anomalies[{i}]");
        if a.span.basis != SpanBasis::Sparse {
            out.push(Violation::new(
                ViolationKind::WrongBasis,
                format!("{at}.span"),
                format!("annotation spans use the sparse basis, found {:?}", a.span.basis),
            ));
        }
        if !a.span.is_ordered() {
            out.push(Violation::new(
                ViolationKind::InvertedSpan,
                format!("{at}.span"),
                format!("start {} > end {}", a.span.start, a.span.end),
            ));
        }
        if a.span.end >= length {
            out.push(Violation::new(
                ViolationKind::SpanOutOfRange,
                format!("{at}.end_frame"),
                format!("end {} outside annotation sequence of {length} frames", a.span.end),
            ));
        }
        for (frame, boxes) in &a.boxes {
            if !a.span.contains(*frame) {
                out.push(Violation::new(
                    ViolationKind::BoxOutsideSpan,
                    format!("{at}.boxes.{frame}"),
                    format!("frame {frame} outside span {}..={}", a.span.start, a.span.end),
                ));
            }
            for (j, b) in boxes.iter().enumerate() {
                if !b.is_valid() {
                    out.push(Violation::new(
                        ViolationKind::InvalidBox,
                        format!("{at}.boxes.{frame}[{j}]"),
                        format!("degenerate or out-of-range box {b}"),
                    ));
                }
            }
        }
    }
    out
}

/// Loads every `*.json` annotation file in `dir` (sorted by file name),
/// skipping a top-level `manifest.json`.
pub fn load_corpus(dir: &Path) -> Result<Vec<(VideoDescriptor, GroundTruth)>, AnnotationError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|source| AnnotationError::Io { path: dir.display().to_string(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let file = AnnotationFile::from_path(&path)?;
        let parts = file
            .to_parts()
            .map_err(|violations| AnnotationError::Invalid { video_id: file.video_id.clone(), violations })?;
        out.push(parts);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AnomalyType;

    fn video(frame_count: usize, fps: u32) -> VideoDescriptor {
        VideoDescriptor::with_default_handles("v", frame_count, Fps::integer(fps)).unwrap()
    }

    fn anomaly(start: usize, end: usize, boxes: &[(usize, [i64; 4])]) -> AnomalyAnnotation {
        let mut map: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
        for (f, b) in boxes {
            map.entry(*f).or_default().push(BBox::from_array(*b));
        }
        AnomalyAnnotation {
            kind: AnomalyType::ObjectDistortion,
            span: FrameSpan::sparse(start, end),
            reason: "warped cup".into(),
            boxes: map,
            saliency: SaliencyLabel::Salient,
        }
    }

    #[test]
    fn normal_gt_is_valid() {
        assert!(validate_ground_truth(&GroundTruth::normal("v"), &video(120, 24)).is_empty());
    }

    #[test]
    fn degenerate_box_is_one_violation() {
        let gt = GroundTruth {
            video_id: "v".into(),
            status: Status::Abnormal,
            anomalies: vec![anomaly(2, 4, &[(3, [100, 100, 100, 200])])],
        };
        let v = validate_ground_truth(&gt, &video(120, 24));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::InvalidBox);
        assert_eq!(v[0].path, "anomalies[0].boxes.3[0]");
    }

    #[test]
    fn span_past_sequence_end() {
        // 10 frames at 4 fps sample to a 10-frame annotation sequence.
        let v = video(10, 4);
        assert_eq!(annotation_length(&v), 10);
        let gt = GroundTruth { video_id: "v".into(), status: Status::Abnormal, anomalies: vec![anomaly(8, 12, &[])] };
        let found = validate_ground_truth(&gt, &v);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, ViolationKind::SpanOutOfRange);
    }

    #[test]
    fn status_consistency() {
        let v = video(120, 24);
        let gt = GroundTruth { video_id: "v".into(), status: Status::Normal, anomalies: vec![anomaly(1, 2, &[])] };
        assert_eq!(validate_ground_truth(&gt, &v)[0].kind, ViolationKind::NormalWithAnomalies);
        let gt = GroundTruth { video_id: "v".into(), status: Status::Abnormal, anomalies: vec![] };
        assert_eq!(validate_ground_truth(&gt, &v)[0].kind, ViolationKind::AbnormalWithoutAnomalies);
    }

    #[test]
    fn box_outside_span() {
        let gt = GroundTruth {
            video_id: "v".into(),
            status: Status::Abnormal,
            anomalies: vec![anomaly(2, 4, &[(5, [0, 0, 10, 10])])],
        };
        let found = validate_ground_truth(&gt, &video(120, 24));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, ViolationKind::BoxOutsideSpan);
    }

    #[test]
    fn file_round_trip_and_unknown_keys() {
        let text = r#"{
            "video_id": "v", "frame_count": 120, "source_fps": 24, "status": "abnormal",
            "camera": "unused",
            "anomalies": [{
                "type": "human distortions", "start_frame": 3, "end_frame": 7,
                "reason": "extra finger", "saliency": "non_salient",
                "boxes": {"3": [[120, 80, 260, 240]], "7": [[130, 90, 270, 250], [0, 0, 5, 5]]},
                "note": 1
            }]
        }"#;
        let file = AnnotationFile::from_json_str(text).unwrap();
        assert!(file.unknown.contains_key("camera"));
        let (video, gt) = file.to_parts().unwrap();
        assert_eq!(gt.anomalies[0].kind, AnomalyType::HumanDistortion);
        assert_eq!(gt.anomalies[0].boxes[&7].len(), 2);
        assert_eq!(gt.mean_discount(), 0.5);
        let again = AnnotationFile::from_parts(&video, &gt, false);
        let reparsed = AnnotationFile::from_json_str(&again.to_json_pretty()).unwrap();
        assert_eq!(reparsed.to_parts().unwrap().1, gt);
        assert!(!again.to_json_pretty().contains("camera"));
    }

    #[test]
    fn file_structural_violations() {
        let text = r#"{
            "video_id": "v", "frame_count": 120, "source_fps": 24, "status": "abnormal",
            "anomalies": [{
                "type": "Blur", "start_frame": 3, "end_frame": 7, "saliency": "salient",
                "boxes": {"x": [[1, 2, 3, 4]]}
            }, {
                "type": "Motion Anomaly", "start_frame": 3, "end_frame": 7, "saliency": "salient",
                "boxes": {"4": [[1, 2, 3]]}
            }]
        }"#;
        let violations = AnnotationFile::from_json_str(text).unwrap().to_parts().unwrap_err();
        let kinds: Vec<_> = violations.iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::UnknownType));
        assert!(kinds.contains(&ViolationKind::BadFrameKey));
        assert!(kinds.contains(&ViolationKind::BadBoxShape));
    }
}
