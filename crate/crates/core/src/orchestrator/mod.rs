//! Coarse-to-fine two-turn inference over a pluggable judge: a sparse scan of
//! the whole video, a dense look at the cropped window, and the scalar reward
//! read off the judge's class probabilities.

pub mod crop;
pub mod judge;
pub mod pipeline;

use serde::{Deserialize, Serialize};

use crate::sampling::Fps;

pub use crop::{crop_window, hull, ClipDescriptor, CropError, IndexMap};
pub use judge::{JudgeBackend, JudgeError, JudgeReply, JudgeRequest, RetryingJudge, SubprocessJudge};
pub use pipeline::{
    best_of_n, run_two_turn, score_rollout_group, BestOfN, Evidence, GroupScore, PipelineError, Verdict, VerdictFlag,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("probabilities must be finite, non-negative and not both zero (p_normal={0}, p_abnormal={1})")]
    BadProbabilities(f64, f64),
    #[error("score lists differ in length: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("no score lists to combine")]
    Empty,
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub sparse_fps: Fps,
    pub dense_fps: Fps,
    /// Upper bound on the clip length at inference time; unset by default.
    pub max_clip_seconds: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { sparse_fps: Fps::integer(4), dense_fps: Fps::integer(8), max_clip_seconds: None }
    }
}

impl SamplingConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.dense_fps.ratio() < self.sparse_fps.ratio() {
            return Err(format!("dense_fps {} is below sparse_fps {}", self.dense_fps, self.sparse_fps));
        }
        if let Some(s) = self.max_clip_seconds {
            if !(s.is_finite() && s > 0.0) {
                return Err(format!("max_clip_seconds must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

/// `p_normal / (p_normal + p_abnormal)`.
pub fn cac_scalar_reward(p_normal: f64, p_abnormal: f64) -> Result<f64, ScoreError> {
    let ok = |p: f64| p.is_finite() && p >= 0.0;
    if !ok(p_normal) || !ok(p_abnormal) || p_normal + p_abnormal <= 0.0 {
        return Err(ScoreError::BadProbabilities(p_normal, p_abnormal));
    }
    Ok(p_normal / (p_normal + p_abnormal))
}

/// Min-max normalizes each list over the candidates (a constant list becomes
/// all 0.5) and averages the lists element-wise.
pub fn combine_rewards(score_lists: &[Vec<f64>]) -> Result<Vec<f64>, ScoreError> {
    let first = score_lists.first().ok_or(ScoreError::Empty)?;
    if score_lists.iter().any(|l| l.len() != first.len()) {
        return Err(ScoreError::LengthMismatch(score_lists.iter().map(Vec::len).collect()));
    }
    if let Some(v) = score_lists.iter().flatten().find(|v| !v.is_finite()) {
        return Err(ScoreError::NonFinite(*v));
    }
    let mut combined = vec![0.0; first.len()];
    for list in score_lists {
        let lo = list.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (c, v) in combined.iter_mut().zip(list) {
            *c += if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        }
    }
    let n = score_lists.len() as f64;
    Ok(combined.into_iter().map(|c| c / n).collect())
}
