//! Core domain types: the anomaly taxonomy, saliency labels, normalized boxes,
//! frame spans, video descriptors and ground-truth records.
//!
//! Boxes live on a `[0, 1000]` lattice per axis and use continuous rectangle
//! area, so `[0,0,100,100]` has area `10_000`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::sampling::Fps;

/// Upper bound of the normalized coordinate system on each axis.
pub const COORD_MAX: i64 = 1000;

/// Area of a whole frame in normalized units.
pub const FRAME_AREA: f64 = (COORD_MAX * COORD_MAX) as f64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("invalid box {0}: need 0 <= xmin < xmax <= 1000 and 0 <= ymin < ymax <= 1000")]
    InvalidBox(BBox),
    #[error("frame spans mix bases ({0:?} and {1:?})")]
    MixedBasis(SpanBasis, SpanBasis),
    #[error("unknown anomaly type label {0:?}")]
    UnknownLabel(String),
    #[error("invalid video descriptor: {0}")]
    InvalidVideo(String),
}

/// The five-way anomaly taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnomalyType {
    ObjectDistortion,
    HumanDistortion,
    MotionAnomaly,
    PhysicalViolation,
    CharacterAnomaly,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 5] = [
        AnomalyType::ObjectDistortion,
        AnomalyType::HumanDistortion,
        AnomalyType::MotionAnomaly,
        AnomalyType::PhysicalViolation,
        AnomalyType::CharacterAnomaly,
    ];

    /// Canonical display name, as written in model outputs and annotation files.
    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::ObjectDistortion => "Object Distortion",
            AnomalyType::HumanDistortion => "Human Distortion",
            AnomalyType::MotionAnomaly => "Motion Anomaly",
            AnomalyType::PhysicalViolation => "Physical Violation",
            AnomalyType::CharacterAnomaly => "Character Anomaly",
        }
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Case-insensitive, whitespace-tolerant label lookup.
///
/// Accepts the canonical names, their plural forms, and the plural literals
/// used in the output-format prompt ("Motion Anomalies", "Physical Violations",
/// "Character Anomalies"). Anything else is rejected.
pub fn parse_taxonomy_label(text: &str) -> Result<AnomalyType, DomainError> {
    let folded = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let kind = match folded.as_str() {
        "object distortion" | "object distortions" => AnomalyType::ObjectDistortion,
        "human distortion" | "human distortions" => AnomalyType::HumanDistortion,
        "motion anomaly" | "motion anomalies" => AnomalyType::MotionAnomaly,
        "physical violation" | "physical violations" => AnomalyType::PhysicalViolation,
        "character anomaly" | "character anomalies" => AnomalyType::CharacterAnomaly,
        _ => return Err(DomainError::UnknownLabel(text.to_string())),
    };
    Ok(kind)
}

impl FromStr for AnomalyType {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_taxonomy_label(s)
    }
}

impl Serialize for AnomalyType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AnomalyType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_taxonomy_label(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyLabel {
    Salient,
    NonSalient,
}

impl SaliencyLabel {
    /// Discount applied to rewards and penalties for this anomaly.
    pub fn discount(self) -> f64 {
        match self {
            SaliencyLabel::Salient => 1.0,
            SaliencyLabel::NonSalient => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Normal,
    Abnormal,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Normal => "normal",
            Status::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned box in normalized `[0, 1000]` coordinates.
///
/// Fields are public so that corrupted boxes can be represented and reported;
/// use [`BBox::validate`] before trusting one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

impl BBox {
    pub const FULL_FRAME: BBox = BBox { xmin: 0, ymin: 0, xmax: COORD_MAX, ymax: COORD_MAX };

    pub fn new(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> Result<Self, DomainError> {
        let b = BBox { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        0 <= self.xmin
            && self.xmin < self.xmax
            && self.xmax <= COORD_MAX
            && 0 <= self.ymin
            && self.ymin < self.ymax
            && self.ymax <= COORD_MAX
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(DomainError::InvalidBox(*self))
        }
    }

    pub fn area(&self) -> f64 {
        ((self.xmax - self.xmin) * (self.ymax - self.ymin)) as f64
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn from_array(a: [i64; 4]) -> Self {
        BBox { xmin: a[0], ymin: a[1], xmax: a[2], ymax: a[3] }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        <[i64; 4]>::deserialize(deserializer).map(BBox::from_array)
    }
}

/// Intersection-over-union of two valid boxes using continuous area.
pub fn bbox_iou(a: &BBox, b: &BBox) -> Result<f64, DomainError> {
    a.validate()?;
    b.validate()?;
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0);
    let inter = (iw * ih) as f64;
    if inter == 0.0 {
        return Ok(0.0);
    }
    Ok(inter / (a.area() + b.area() - inter))
}

/// Exact area of the union of a set of boxes, via coordinate compression.
pub fn union_area(boxes: &[BBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<i64> = boxes.iter().flat_map(|b| [b.xmin, b.xmax]).collect();
    let mut ys: Vec<i64> = boxes.iter().flat_map(|b| [b.ymin, b.ymax]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0i64;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let covered =
                boxes.iter().any(|b| b.xmin <= xw[0] && xw[1] <= b.xmax && b.ymin <= yw[0] && yw[1] <= b.ymax);
            if covered {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area as f64
}

/// Which frame sequence a span's indices refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanBasis {
    /// Native frames of the source video.
    Source,
    /// The uniformly downsampled sequence used for annotation and the first turn.
    Sparse,
    /// Frames of a cropped clip, re-indexed from zero.
    ClipLocal,
}

/// Inclusive frame range on a given basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
    pub basis: SpanBasis,
}

impl FrameSpan {
    pub fn new(start: usize, end: usize, basis: SpanBasis) -> Self {
        FrameSpan { start, end, basis }
    }

    pub fn sparse(start: usize, end: usize) -> Self {
        FrameSpan::new(start, end, SpanBasis::Sparse)
    }

    pub fn is_ordered(&self) -> bool {
        self.start <= self.end
    }

    /// Number of frames covered; zero for an inverted span.
    pub fn len(&self) -> usize {
        if self.is_ordered() {
            self.end - self.start + 1
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Union of the inclusive ranges of `spans`. All spans must share one basis.
pub fn frame_set<'a, I>(spans: I) -> Result<BTreeSet<usize>, DomainError>
where
    I: IntoIterator<Item = &'a FrameSpan>,
{
    let mut basis: Option<SpanBasis> = None;
    let mut set = BTreeSet::new();
    for span in spans {
        match basis {
            Some(b) if b != span.basis => return Err(DomainError::MixedBasis(b, span.basis)),
            _ => basis = Some(span.basis),
        }
        set.extend(span.frames());
    }
    Ok(set)
}

/// A video as the engine sees it: metadata plus opaque per-frame handles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub id: String,
    pub frame_count: usize,
    pub source_fps: Fps,
    pub frames: Vec<String>,
}

impl VideoDescriptor {
    pub fn new(id: impl Into<String>, source_fps: Fps, frames: Vec<String>) -> Result<Self, DomainError> {
        let v = VideoDescriptor { id: id.into(), frame_count: frames.len(), source_fps, frames };
        v.check()?;
        Ok(v)
    }

    /// Descriptor whose handles are generic `frame://<id>/<index>` tokens.
    pub fn with_default_handles(
        id: impl Into<String>,
        frame_count: usize,
        source_fps: Fps,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let frames = (0..frame_count).map(|i| default_handle(&id, i)).collect();
        VideoDescriptor::new(id, source_fps, frames)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if self.frame_count == 0 {
            return Err(DomainError::InvalidVideo(format!("{}: frame_count must be >= 1", self.id)));
        }
        if self.frames.len() != self.frame_count {
            return Err(DomainError::InvalidVideo(format!(
                "{}: {} handles for {} frames",
                self.id,
                self.frames.len(),
                self.frame_count
            )));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frame_count as f64 / self.source_fps.as_f64()
    }
}

pub fn default_handle(video_id: &str, index: usize) -> String {
    format!("frame://{video_id}/{index}")
}

/// One ground-truth anomaly instance group.
///
/// `span` and the `boxes` keys are indices on the sparse annotation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyAnnotation {
    pub kind: AnomalyType,
    pub span: FrameSpan,
    pub reason: String,
    pub boxes: BTreeMap<usize, Vec<BBox>>,
    pub saliency: SaliencyLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub status: Status,
    pub anomalies: Vec<AnomalyAnnotation>,
}

impl GroundTruth {
    pub fn normal(video_id: impl Into<String>) -> Self {
        GroundTruth { video_id: video_id.into(), status: Status::Normal, anomalies: Vec::new() }
    }

    pub fn is_abnormal(&self) -> bool {
        self.status == Status::Abnormal
    }

    pub fn types(&self) -> BTreeSet<AnomalyType> {
        self.anomalies.iter().map(|a| a.kind).collect()
    }

    /// Union of all annotated frames on the sparse basis.
    pub fn frames(&self) -> BTreeSet<usize> {
        self.anomalies.iter().flat_map(|a| a.span.frames()).collect()
    }

    /// All GT boxes on `frame`, across annotations.
    pub fn boxes_on(&self, frame: usize) -> Vec<BBox> {
        self.anomalies.iter().filter_map(|a| a.boxes.get(&frame)).flatten().copied().collect()
    }

    /// Mean saliency discount over GT anomalies; 1 for a normal video.
    pub fn mean_discount(&self) -> f64 {
        if self.anomalies.is_empty() {
            return 1.0;
        }
        self.anomalies.iter().map(|a| a.saliency.discount()).sum::<f64>() / self.anomalies.len() as f64
    }
}
