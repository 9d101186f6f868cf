//! Verifiable rewards for one two-turn rollout.
//!
//! Five components are combined into a scalar:
//!
//! ```text
//! R = w1·R_fmt + w2·γ̄·R_stat + m·(w3·R̃_type + w4·R̃_temp + w5·R̃_spa)
//! R̃_k = 1 − γ̄·(1 − R_k)
//! ```
//!
//! `m` masks the IoU terms for normal ground truth and `γ̄` is the mean
//! saliency discount over GT anomalies (1 for normal videos).
//!
//! Turn-slot accounting: a turn contributes predictions (labels, windows,
//! boxes) only when it parsed and passed validation. Turn two runs only after
//! a valid abnormal turn one; when it does not run, its format slot is neutral
//! if turn one validly answered normal and −1 otherwise, and its status slot
//! is −1 on abnormal ground truth and absent on normal ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::{TurnOutcome, TurnResponse};
use crate::domain::{bbox_iou, frame_set, BBox, DomainError, GroundTruth, Status};
use crate::orchestrator::crop::{ClipDescriptor, IndexMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("{0} is only defined for abnormal ground truth")]
    NormalGroundTruth(&'static str),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("predicted and ground-truth frames use different bases")]
    BasisMismatch,
    #[error("index map has no clip frame for matched sparse frame {0}")]
    IndexMapMissing(usize),
    #[error("turn two is valid but the rollout has no clip index map")]
    NoIndexMap,
}

/// Component weights `(w1, …, w5)` for format, status, type, temporal and spatial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w1: 1.0, w2: 2.0, w3: 2.0, w4: 2.0, w5: 5.0 }
    }
}

impl RewardWeights {
    pub fn check(&self) -> Result<(), String> {
        let all = [self.w1, self.w2, self.w3, self.w4, self.w5];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!("reward weights must be finite and non-negative, got {all:?}"))
        }
    }
}

/// One complete rollout: turn one, and turn two when it ran.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutRecord {
    pub turn1: TurnOutcome,
    pub turn2: Option<TurnOutcome>,
    /// The clip turn two was shown; present iff `turn2` is.
    pub clip: Option<ClipDescriptor>,
}

impl RolloutRecord {
    pub fn terminated(turn1: TurnOutcome) -> Self {
        RolloutRecord { turn1, turn2: None, clip: None }
    }

    pub fn two_turn(turn1: TurnOutcome, turn2: TurnOutcome, clip: ClipDescriptor) -> Self {
        RolloutRecord { turn1, turn2: Some(turn2), clip: Some(clip) }
    }

    pub fn executed_turns(&self) -> usize {
        1 + usize::from(self.turn2.is_some())
    }

    pub fn predicted_window_source_basis(&self) -> Option<crate::domain::FrameSpan> {
        self.clip.as_ref().map(|c| c.source_span)
    }

    fn valid_turn2(&self) -> Option<&TurnResponse> {
        self.turn2.as_ref().and_then(TurnOutcome::valid_response)
    }
}

/// Whether turn two runs after `turn1`: only for a valid abnormal answer,
/// which by validation carries at least one well-formed window.
pub fn continues_to_turn_two(turn1: &TurnOutcome) -> bool {
    turn1.valid_response().is_some_and(|r| r.status == Status::Abnormal)
}

/// Mean over the two turn slots of 0 (valid) / −1 (invalid).
pub fn format_reward(rollout: &RolloutRecord) -> f64 {
    let slot = |ok: bool| if ok { 0.0 } else { -1.0 };
    let first = slot(rollout.turn1.is_valid());
    let second = match &rollout.turn2 {
        Some(t2) => slot(t2.is_valid()),
        // Nothing was owed after a valid "normal".
        None => slot(rollout.turn1.valid_response().is_some_and(|r| r.status == Status::Normal)),
    };
    (first + second) / 2.0
}

/// Mean over turn slots of 0 (status matches GT) / −1 (mismatch or unparseable).
pub fn status_reward(rollout: &RolloutRecord, gt: &GroundTruth) -> f64 {
    let slot = |s: Option<Status>| if s == Some(gt.status) { 0.0 } else { -1.0 };
    let first = slot(rollout.turn1.status());
    match (&rollout.turn2, gt.status) {
        (Some(t2), _) => (first + slot(t2.status())) / 2.0,
        (None, Status::Abnormal) => (first - 1.0) / 2.0,
        (None, Status::Normal) => first,
    }
}

/// `|A ∩ B| / |A ∪ B|`, or 0 when both are empty.
pub fn set_iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over both turns of the label-set IoU against the GT types.
pub fn type_iou_reward(rollout: &RolloutRecord, gt: &GroundTruth) -> Result<f64, RewardError> {
    if !gt.is_abnormal() {
        return Err(RewardError::NormalGroundTruth("type IoU reward"));
    }
    let truth = gt.types();
    let turn_score = |resp: Option<&TurnResponse>| resp.map_or(0.0, |r| set_iou(&r.labels(), &truth));
    Ok((turn_score(rollout.turn1.valid_response()) + turn_score(rollout.valid_turn2())) / 2.0)
}

/// Sparse frames covered by the valid turn-one windows.
pub fn predicted_frames(rollout: &RolloutRecord) -> Result<BTreeSet<usize>, RewardError> {
    match rollout.turn1.valid_response() {
        Some(r) => Ok(frame_set(&r.windows())?),
        None => Ok(BTreeSet::new()),
    }
}

/// Frame-set IoU between predicted windows and GT spans, both on the sparse basis.
pub fn temporal_iou(predicted: &[crate::domain::FrameSpan], gt: &GroundTruth) -> Result<f64, RewardError> {
    let gt_spans: Vec<_> = gt.anomalies.iter().map(|a| a.span).collect();
    if let (Some(p), Some(g)) = (predicted.first(), gt_spans.first()) {
        if p.basis != g.basis {
            return Err(RewardError::BasisMismatch);
        }
    }
    let pred = frame_set(predicted)?;
    let truth = frame_set(&gt_spans)?;
    Ok(set_iou(&pred, &truth))
}

pub fn temporal_iou_reward(rollout: &RolloutRecord, gt: &GroundTruth) -> Result<f64, RewardError> {
    if !gt.is_abnormal() {
        return Err(RewardError::NormalGroundTruth("temporal IoU reward"));
    }
    let windows = rollout.turn1.valid_response().map(TurnResponse::windows).unwrap_or_default();
    temporal_iou(&windows, gt)
}

/// Mean over GT boxes on `matched` frames of the best IoU against the
/// predicted boxes on the same frame; 0 when there are no such GT boxes.
///
/// `predicted(frame)` returns the predicted boxes for a sparse frame.
pub fn spatial_iou_on_frames<F>(
    matched: &BTreeSet<usize>,
    gt: &GroundTruth,
    mut predicted: F,
) -> Result<f64, RewardError>
where
    F: FnMut(usize) -> Result<Vec<BBox>, RewardError>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for &frame in matched {
        let truth = gt.boxes_on(frame);
        if truth.is_empty() {
            continue;
        }
        let preds = predicted(frame)?;
        for g in &truth {
            let mut best = 0.0f64;
            for p in &preds {
                best = best.max(bbox_iou(g, p)?);
            }
            total += best;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn spatial_iou_reward(
    rollout: &RolloutRecord,
    gt: &GroundTruth,
    index_map: Option<&IndexMap>,
) -> Result<f64, RewardError> {
    if !gt.is_abnormal() {
        return Err(RewardError::NormalGroundTruth("spatial IoU reward"));
    }
    let matched: BTreeSet<usize> = predicted_frames(rollout)?.intersection(&gt.frames()).copied().collect();
    let turn2 = rollout.valid_turn2();
    let merged = turn2.map(TurnResponse::merged_boxes);
    spatial_iou_on_frames(&matched, gt, |frame| {
        let Some(merged) = &merged else {
            return Ok(Vec::new());
        };
        let map = index_map.ok_or(RewardError::NoIndexMap)?;
        let clip_frame = map.clip_for_sparse(frame).ok_or(RewardError::IndexMapMissing(frame))?;
        Ok(merged.get(&clip_frame).cloned().unwrap_or_default())
    })
}

/// Per-component rewards and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_stat: f64,
    pub r_type: f64,
    pub r_temp: f64,
    pub r_spa: f64,
    pub gamma_bar: f64,
    pub mask_m: u8,
    pub total: f64,
}

impl RewardBreakdown {
    /// Recomputes the total from the stored components.
    pub fn weighted_total(&self, w: &RewardWeights) -> f64 {
        let g = self.gamma_bar;
        let tilde = |r: f64| 1.0 - g * (1.0 - r);
        let iou_terms = w.w3 * tilde(self.r_type) + w.w4 * tilde(self.r_temp) + w.w5 * tilde(self.r_spa);
        w.w1 * self.r_fmt + w.w2 * g * self.r_stat + f64::from(self.mask_m) * iou_terms
    }

    /// Builds a breakdown from components and fills in `total`.
    pub fn from_components(
        r_fmt: f64,
        r_stat: f64,
        iou: Option<(f64, f64, f64)>,
        gamma_bar: f64,
        w: &RewardWeights,
    ) -> Self {
        let (r_type, r_temp, r_spa) = iou.unwrap_or((0.0, 0.0, 0.0));
        let mut b = RewardBreakdown {
            r_fmt,
            r_stat,
            r_type,
            r_temp,
            r_spa,
            gamma_bar,
            mask_m: u8::from(iou.is_some()),
            total: 0.0,
        };
        b.total = b.weighted_total(w);
        b
    }
}

pub fn aggregate_reward(
    rollout: &RolloutRecord,
    gt: &GroundTruth,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let r_fmt = format_reward(rollout);
    let r_stat = status_reward(rollout, gt);
    let iou = if gt.is_abnormal() {
        let index_map = rollout.clip.as_ref().map(|c| &c.index_map);
        Some((
            type_iou_reward(rollout, gt)?,
            temporal_iou_reward(rollout, gt)?,
            spatial_iou_reward(rollout, gt, index_map)?,
        ))
    } else {
        None
    };
    Ok(RewardBreakdown::from_components(r_fmt, r_stat, iou, gt.mean_discount(), weights))
}
