//! Benchmark scoring: confusion counts, per-class precision/recall/F1,
//! hard-split bucket recall, per-category recall and localization IoU.
//!
//! The positive class is "abnormal". Localization reuses the reward kernels,
//! so a benchmark IoU and a rollout reward computed from the same prediction
//! agree exactly.

mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotation::ANNOTATION_FPS;
use crate::domain::{union_area, AnomalyType, BBox, FrameSpan, GroundTruth, Status, VideoDescriptor, FRAME_AREA};
use crate::orchestrator::pipeline::Verdict;
use crate::reward::{spatial_iou_on_frames, temporal_iou, RewardError};
use crate::sampling::{sample_frames, Fps};

pub use report::{emit_report, ReportFormat, CSV_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no prediction for {0:?}")]
    MissingPredictions(Vec<String>),
    #[error("predictions for unknown videos {0:?}")]
    UnknownPredictions(Vec<String>),
    #[error("duplicate predictions for {0:?}")]
    DuplicatePredictions(Vec<String>),
    #[error("duplicate ground truth for {0:?}")]
    DuplicateGroundTruth(Vec<String>),
    #[error("the hard split contains only abnormal videos; normal: {0:?}")]
    NormalInHardSplit(Vec<String>),
    #[error("nothing to score")]
    Empty,
    #[error("prediction line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("prediction for {video_id}: {source}")]
    Reward { video_id: String, source: RewardError },
    #[error("unknown report format {0:?} (expected json, csv or md)")]
    UnknownFormat(String),
}

/// One predictor output for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub status: Status,
    /// Predicted windows on the sparse annotation basis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<FrameSpan>,
    /// Predicted boxes keyed by source frame index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub boxes: BTreeMap<usize, Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<BTreeSet<AnomalyType>>,
}

impl PredictionRecord {
    pub fn status_only(video_id: impl Into<String>, status: Status) -> Self {
        PredictionRecord { video_id: video_id.into(), status, windows: Vec::new(), boxes: BTreeMap::new(), types: None }
    }

    /// The benchmark view of a pipeline verdict. Localization fields are kept
    /// only for abnormal verdicts.
    pub fn from_verdict(verdict: &Verdict) -> Self {
        let mut rec = PredictionRecord::status_only(verdict.video_id.clone(), verdict.status);
        if verdict.status == Status::Abnormal {
            rec.windows = verdict.windows.clone();
            for e in &verdict.evidence {
                for (frame, boxes) in &e.boxes {
                    rec.boxes.entry(*frame).or_default().extend(boxes.iter().copied());
                }
            }
            rec.types = Some(verdict.evidence.iter().filter_map(|e| e.label).collect());
        }
        rec
    }
}

/// Reads JSON-lines predictions; blank lines are skipped.
pub fn read_predictions_jsonl(text: &str) -> Result<Vec<PredictionRecord>, BenchError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| BenchError::Json { line: i + 1, source }))
        .collect()
}

pub fn write_predictions_jsonl(preds: &[PredictionRecord]) -> String {
    preds.iter().map(|p| serde_json::to_string(p).expect("serializable") + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Pairs each ground truth with its prediction by video id.
fn reconcile<'a>(
    preds: &'a [PredictionRecord],
    gts: &[&'a GroundTruth],
) -> Result<Vec<(&'a PredictionRecord, &'a GroundTruth)>, BenchError> {
    let dups = |ids: Vec<&str>| {
        let mut seen = BTreeSet::new();
        let d: BTreeSet<String> = ids.into_iter().filter(|id| !seen.insert(*id)).map(str::to_string).collect();
        d.into_iter().collect::<Vec<_>>()
    };
    let d = dups(gts.iter().map(|g| g.video_id.as_str()).collect());
    if !d.is_empty() {
        return Err(BenchError::DuplicateGroundTruth(d));
    }
    let d = dups(preds.iter().map(|p| p.video_id.as_str()).collect());
    if !d.is_empty() {
        return Err(BenchError::DuplicatePredictions(d));
    }
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.video_id.as_str(), p)).collect();
    let known: BTreeSet<&str> = gts.iter().map(|g| g.video_id.as_str()).collect();
    let unknown: Vec<String> =
        preds.iter().filter(|p| !known.contains(p.video_id.as_str())).map(|p| p.video_id.clone()).collect();
    if !unknown.is_empty() {
        return Err(BenchError::UnknownPredictions(unknown));
    }
    let missing: Vec<String> =
        gts.iter().filter(|g| !by_id.contains_key(g.video_id.as_str())).map(|g| g.video_id.clone()).collect();
    if !missing.is_empty() {
        return Err(BenchError::MissingPredictions(missing));
    }
    Ok(gts.iter().map(|g| (by_id[g.video_id.as_str()], *g)).collect())
}

pub fn confusion(preds: &[PredictionRecord], gts: &[&GroundTruth]) -> Result<Confusion, BenchError> {
    let mut c = Confusion::default();
    for (p, g) in reconcile(preds, gts)? {
        match (g.status, p.status) {
            (Status::Abnormal, Status::Abnormal) => c.tp += 1,
            (Status::Abnormal, Status::Normal) => c.fn_ += 1,
            (Status::Normal, Status::Normal) => c.tn += 1,
            (Status::Normal, Status::Abnormal) => c.fp += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub anomalous: ClassMetrics,
    pub normal: ClassMetrics,
    pub accuracy: f64,
    /// Ratios whose denominator was zero and were reported as 0,
    /// e.g. `anomalous.precision`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(
    hit: usize,
    missed: usize,
    false_alarm: usize,
    class: &str,
    undefined: &mut Vec<String>,
) -> ClassMetrics {
    let recall = ratio(hit, hit + missed, &format!("{class}.recall"), undefined);
    let precision = ratio(hit, hit + false_alarm, &format!("{class}.precision"), undefined);
    let f1 = if recall + precision > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push(format!("{class}.f1"));
        0.0
    };
    ClassMetrics { recall, precision, f1 }
}

pub fn prf_metrics(c: &Confusion) -> PrfMetrics {
    let mut undefined = Vec::new();
    let anomalous = class_metrics(c.tp, c.fn_, c.fp, "anomalous", &mut undefined);
    let normal = class_metrics(c.tn, c.fp, c.fn_, "normal", &mut undefined);
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut undefined);
    PrfMetrics { anomalous, normal, accuracy, undefined }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtentRule {
    /// Mean over box-bearing frames of the union-of-boxes area fraction.
    #[default]
    Mean,
    /// Largest per-frame union-of-boxes area fraction.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardSplitConfig {
    pub duration_s: f64,
    pub extent_frac: f64,
    pub extent_rule: ExtentRule,
}

impl Default for HardSplitConfig {
    fn default() -> Self {
        HardSplitConfig { duration_s: 1.0, extent_frac: 0.20, extent_rule: ExtentRule::Mean }
    }
}

/// Annotated duration: distinct annotation frames over the annotation rate.
pub fn gt_duration_seconds(gt: &GroundTruth) -> f64 {
    gt.frames().len() as f64 / f64::from(ANNOTATION_FPS)
}

/// Spatial extent as a fraction of the frame; 0 when no boxes are annotated.
pub fn gt_extent(gt: &GroundTruth, rule: ExtentRule) -> f64 {
    let fractions: Vec<f64> = gt
        .frames()
        .into_iter()
        .map(|f| gt.boxes_on(f))
        .filter(|b| !b.is_empty())
        .map(|b| union_area(&b) / FRAME_AREA)
        .collect();
    if fractions.is_empty() {
        return 0.0;
    }
    match rule {
        ExtentRule::Mean => fractions.iter().sum::<f64>() / fractions.len() as f64,
        ExtentRule::Max => fractions.iter().copied().fold(0.0, f64::max),
    }
}

pub const BUCKET_LABELS: [&str; 4] = ["<1s/<20%", "<1s/>=20%", ">=1s/<20%", ">=1s/>=20%"];

/// Bucket index in [`BUCKET_LABELS`] order. Both thresholds are strict:
/// exactly 1 s lands in the long bucket.
pub fn hard_bucket(gt: &GroundTruth, cfg: &HardSplitConfig) -> usize {
    let long = gt_duration_seconds(gt) >= cfg.duration_s;
    let large = gt_extent(gt, cfg.extent_rule) >= cfg.extent_frac;
    2 * usize::from(long) + usize::from(large)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRecall {
    pub bucket: String,
    pub total: usize,
    pub hits: usize,
    pub recall: f64,
}

pub fn hard_split_recall(
    preds: &[PredictionRecord],
    gts: &[&GroundTruth],
    cfg: &HardSplitConfig,
) -> Result<Vec<BucketRecall>, BenchError> {
    let normal: Vec<String> = gts.iter().filter(|g| !g.is_abnormal()).map(|g| g.video_id.clone()).collect();
    if !normal.is_empty() {
        return Err(BenchError::NormalInHardSplit(normal));
    }
    let mut counts = [(0usize, 0usize); 4];
    for (p, g) in reconcile(preds, gts)? {
        let b = hard_bucket(g, cfg);
        counts[b].0 += 1;
        counts[b].1 += usize::from(p.status == Status::Abnormal);
    }
    Ok(counts
        .iter()
        .zip(BUCKET_LABELS)
        .map(|(&(total, hits), label)| BucketRecall {
            bucket: label.to_string(),
            total,
            hits,
            recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub total: usize,
    pub hits: usize,
    pub recall: f64,
}

/// Recall per anomaly type over abnormal videos. A video counts toward every
/// type it contains. By default a hit is any abnormal prediction; with
/// `type_matched` the predicted type set must also contain the category.
pub fn per_category_recall(
    preds: &[PredictionRecord],
    gts: &[&GroundTruth],
    type_matched: bool,
) -> Result<BTreeMap<AnomalyType, CategoryRecall>, BenchError> {
    let mut out: BTreeMap<AnomalyType, CategoryRecall> = BTreeMap::new();
    for (p, g) in reconcile(preds, gts)? {
        for kind in g.types() {
            let c = out.entry(kind).or_insert(CategoryRecall { total: 0, hits: 0, recall: 0.0 });
            c.total += 1;
            let named = p.types.as_ref().is_some_and(|t| t.contains(&kind));
            if p.status == Status::Abnormal && (!type_matched || named) {
                c.hits += 1;
            }
        }
    }
    for c in out.values_mut() {
        c.recall = c.hits as f64 / c.total as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationIou {
    pub temporal: f64,
    pub spatial: f64,
    /// Number of abnormal ground-truth videos averaged over.
    pub videos: usize,
}

/// Temporal and spatial IoU of one prediction, 0 for a normal prediction.
///
/// Predicted boxes are looked up at the source index of each matched
/// annotation frame.
pub fn video_localization(
    pred: &PredictionRecord,
    video: &VideoDescriptor,
    gt: &GroundTruth,
) -> Result<(f64, f64), RewardError> {
    if pred.status != Status::Abnormal || !gt.is_abnormal() {
        return Ok((0.0, 0.0));
    }
    let temporal = temporal_iou(&pred.windows, gt)?;
    let annotation = sample_frames(video, Fps::integer(ANNOTATION_FPS));
    let predicted = crate::domain::frame_set(&pred.windows)?;
    let matched: BTreeSet<usize> = predicted.intersection(&gt.frames()).copied().collect();
    let spatial = spatial_iou_on_frames(&matched, gt, |j| {
        Ok(annotation.get(j).and_then(|s| pred.boxes.get(s)).cloned().unwrap_or_default())
    })?;
    Ok((temporal, spatial))
}

pub fn localization_iou(
    preds: &[PredictionRecord],
    corpus: &[(VideoDescriptor, GroundTruth)],
) -> Result<LocalizationIou, BenchError> {
    let gts: Vec<&GroundTruth> = corpus.iter().map(|(_, g)| g).collect();
    let pairs = reconcile(preds, &gts)?;
    let (mut t, mut s, mut n) = (0.0, 0.0, 0usize);
    for ((p, g), (video, _)) in pairs.into_iter().zip(corpus) {
        if !g.is_abnormal() {
            continue;
        }
        let (ti, si) = video_localization(p, video, g)
            .map_err(|source| BenchError::Reward { video_id: g.video_id.clone(), source })?;
        t += ti;
        s += si;
        n += 1;
    }
    Ok(if n == 0 {
        LocalizationIou::default()
    } else {
        LocalizationIou { temporal: t / n as f64, spatial: s / n as f64, videos: n }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: Confusion,
    pub anomalous: ClassMetrics,
    pub normal: ClassMetrics,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
    /// Present when every ground truth is abnormal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_split: Option<Vec<BucketRecall>>,
    pub per_category: BTreeMap<AnomalyType, CategoryRecall>,
    pub localization: LocalizationIou,
}

impl MetricReport {
    /// The report with every rate rounded to `places` decimals.
    pub fn rounded(&self, places: i32) -> Self {
        let scale = 10f64.powi(places);
        let r = |x: f64| (x * scale).round() / scale;
        let class = |c: ClassMetrics| ClassMetrics { recall: r(c.recall), precision: r(c.precision), f1: r(c.f1) };
        MetricReport {
            counts: self.counts,
            anomalous: class(self.anomalous),
            normal: class(self.normal),
            accuracy: r(self.accuracy),
            undefined: self.undefined.clone(),
            hard_split: self
                .hard_split
                .as_ref()
                .map(|b| b.iter().map(|b| BucketRecall { recall: r(b.recall), ..b.clone() }).collect()),
            per_category: self
                .per_category
                .iter()
                .map(|(k, c)| (*k, CategoryRecall { recall: r(c.recall), ..*c }))
                .collect(),
            localization: LocalizationIou {
                temporal: r(self.localization.temporal),
                spatial: r(self.localization.spatial),
                videos: self.localization.videos,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub hard_split: HardSplitConfig,
    pub type_matched: bool,
}

pub fn evaluate(
    preds: &[PredictionRecord],
    corpus: &[(VideoDescriptor, GroundTruth)],
    opts: &EvalOptions,
) -> Result<MetricReport, BenchError> {
    if corpus.is_empty() {
        return Err(BenchError::Empty);
    }
    let gts: Vec<&GroundTruth> = corpus.iter().map(|(_, g)| g).collect();
    let counts = confusion(preds, &gts)?;
    let prf = prf_metrics(&counts);
    let hard_split = if gts.iter().all(|g| g.is_abnormal()) {
        Some(hard_split_recall(preds, &gts, &opts.hard_split)?)
    } else {
        None
    };
    Ok(MetricReport {
        counts,
        anomalous: prf.anomalous,
        normal: prf.normal,
        accuracy: prf.accuracy,
        undefined: prf.undefined,
        hard_split,
        per_category: per_category_recall(preds, &gts, opts.type_matched)?,
        localization: localization_iou(preds, corpus)?,
    })
}
