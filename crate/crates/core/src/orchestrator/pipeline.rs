//! The two-turn pipeline, rollout-group scoring and Best-of-N selection.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::crop::{crop_window, hull, ClipDescriptor, CropError};
use super::judge::{JudgeBackend, JudgeError, JudgeReply, JudgeRequest};
use super::{cac_scalar_reward, SamplingConfig, ScoreError};
use crate::annotation::{validate_ground_truth, Violation};
use crate::codec::{ParseMode, TurnKind, TurnOutcome};
use crate::domain::{AnomalyType, BBox, DomainError, FrameSpan, GroundTruth, Status, VideoDescriptor};
use crate::reward::{
    aggregate_reward, continues_to_turn_two, RewardBreakdown, RewardError, RewardWeights, RolloutRecord,
};
use crate::sampling::sample_frames;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("invalid video: {0}")]
    Video(#[from] DomainError),
    #[error("ground truth does not fit the video: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    GroundTruth(Vec<Violation>),
    #[error("a rollout group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("no candidates")]
    NoCandidates,
    #[error("invalid sampling config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictFlag {
    TurnOneUnparseable,
    /// Turn one parsed but failed validation; judged normal without a second look.
    TurnOneInvalid,
    TurnTwoUnparseable,
    TurnTwoInvalid,
    /// Turn two did not confirm the turn-one anomaly.
    ConservativeNormal,
    /// The clip was shortened to `max_clip_seconds`.
    ClipClamped,
}

/// One confirmed anomaly with its boxes on source frames.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub label: Option<AnomalyType>,
    pub reason: String,
    pub problem_region: String,
    pub boxes: BTreeMap<usize, Vec<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub video_id: String,
    pub status: Status,
    pub turn1: TurnOutcome,
    pub turn2: Option<TurnOutcome>,
    /// Turn-one windows on the sparse basis, when turn one was valid and abnormal.
    pub windows: Vec<FrameSpan>,
    /// Source-frame span of the cropped clip.
    pub window_source: Option<FrameSpan>,
    pub clip: Option<ClipDescriptor>,
    pub p_normal: f64,
    pub p_abnormal: f64,
    pub scalar_reward: f64,
    pub evidence: Vec<Evidence>,
    pub flags: Vec<VerdictFlag>,
}

struct Run {
    turn1: TurnOutcome,
    reply1: JudgeReply,
    turn2: Option<(TurnOutcome, JudgeReply, ClipDescriptor)>,
}

fn ask(judge: &dyn JudgeBackend, request: JudgeRequest) -> Result<JudgeReply, JudgeError> {
    let reply = judge.judge(&request)?;
    if reply.request_id != request.request_id {
        return Err(JudgeError::Protocol(format!(
            "reply id {:?} does not match request {:?}",
            reply.request_id, request.request_id
        )));
    }
    reply.check()?;
    Ok(reply)
}

/// Runs turn one and, when it continues, turn two. `clamp` applies
/// `max_clip_seconds`, which only inference does.
#[allow(clippy::too_many_arguments)]
fn execute(
    video: &VideoDescriptor,
    sparse: &[usize],
    prompt: &str,
    judge: &dyn JudgeBackend,
    cfg: &SamplingConfig,
    mode: ParseMode,
    sample: u64,
    clamp: bool,
) -> Result<Run, PipelineError> {
    let request_id = |turn: u8| format!("{}/{turn}/{sample}", video.id);
    let reply1 = ask(
        judge,
        JudgeRequest {
            request_id: request_id(1),
            turn: TurnKind::TurnOne,
            frames: sparse.iter().map(|&i| video.frames[i].clone()).collect(),
            prompt: prompt.to_string(),
            prior_cot: None,
            sample,
        },
    )?;
    let turn1 = TurnOutcome::assess(&reply1.raw_text, TurnKind::TurnOne, mode, Some(sparse.len()));
    if !continues_to_turn_two(&turn1) {
        return Ok(Run { turn1, reply1, turn2: None });
    }
    let resp1 = turn1.valid_response().expect("continuing turn one is valid");
    let window = hull(&resp1.windows()).ok_or(CropError::NoWindow)?;
    let max_clip = if clamp { cfg.max_clip_seconds } else { None };
    let clip = crop_window(video, sparse, window, cfg.dense_fps, max_clip)?;
    let reply2 = ask(
        judge,
        JudgeRequest {
            request_id: request_id(2),
            turn: TurnKind::TurnTwo,
            frames: clip.handles(video),
            prompt: prompt.to_string(),
            prior_cot: Some(resp1.to_json_string()),
            sample,
        },
    )?;
    let turn2 = TurnOutcome::assess(&reply2.raw_text, TurnKind::TurnTwo, mode, Some(clip.frame_count()));
    Ok(Run { turn1, reply1, turn2: Some((turn2, reply2, clip)) })
}

fn prepare(video: &VideoDescriptor, cfg: &SamplingConfig) -> Result<Vec<usize>, PipelineError> {
    video.check()?;
    cfg.check().map_err(PipelineError::Config)?;
    Ok(sample_frames(video, cfg.sparse_fps))
}

/// Coarse-to-fine inference on one video with decoding seed `sample`.
///
/// The video is judged abnormal only when turn two validly confirms it;
/// every other path (normal or broken turn one, normal or broken turn two)
/// ends in a normal verdict. The scalar reward comes from the probabilities of
/// the last executed turn.
pub fn run_two_turn(
    video: &VideoDescriptor,
    prompt: &str,
    judge: &dyn JudgeBackend,
    cfg: &SamplingConfig,
    mode: ParseMode,
    sample: u64,
) -> Result<Verdict, PipelineError> {
    let sparse = prepare(video, cfg)?;
    let run = execute(video, &sparse, prompt, judge, cfg, mode, sample, true)?;
    let mut flags = Vec::new();
    if run.turn1.response.is_none() {
        flags.push(VerdictFlag::TurnOneUnparseable);
    } else if !run.turn1.is_valid() {
        flags.push(VerdictFlag::TurnOneInvalid);
    }
    let windows = run.turn1.valid_response().filter(|_| run.turn2.is_some()).map(|r| r.windows()).unwrap_or_default();

    let Some((turn2, reply2, clip)) = run.turn2 else {
        let reply = &run.reply1;
        return Ok(Verdict {
            video_id: video.id.clone(),
            status: Status::Normal,
            turn1: run.turn1,
            turn2: None,
            windows,
            window_source: None,
            clip: None,
            p_normal: reply.p_normal,
            p_abnormal: reply.p_abnormal,
            scalar_reward: cac_scalar_reward(reply.p_normal, reply.p_abnormal)?,
            evidence: Vec::new(),
            flags,
        });
    };

    let full = hull(&windows).map(|w| (sparse[w.start], sparse[w.end]));
    if full.is_some_and(|(s, e)| (s, e) != (clip.source_span.start, clip.source_span.end)) {
        flags.push(VerdictFlag::ClipClamped);
    }
    let confirmed = turn2.valid_response().filter(|r| r.status == Status::Abnormal);
    if turn2.response.is_none() {
        flags.push(VerdictFlag::TurnTwoUnparseable);
    } else if !turn2.is_valid() {
        flags.push(VerdictFlag::TurnTwoInvalid);
    } else if confirmed.is_none() {
        flags.push(VerdictFlag::ConservativeNormal);
    }
    let evidence = confirmed
        .map(|r| {
            r.entries
                .iter()
                .map(|e| Evidence {
                    label: e.label,
                    reason: e.reason.clone(),
                    problem_region: e.problem_region.clone(),
                    boxes: e
                        .boxes
                        .iter()
                        .flatten()
                        .filter_map(|(k, b)| clip.index_map.source_of(*k).map(|s| (s, b.clone())))
                        .collect(),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Verdict {
        video_id: video.id.clone(),
        status: if confirmed.is_some() { Status::Abnormal } else { Status::Normal },
        window_source: Some(clip.source_span),
        turn1: run.turn1,
        turn2: Some(turn2),
        windows,
        clip: Some(clip),
        p_normal: reply2.p_normal,
        p_abnormal: reply2.p_abnormal,
        scalar_reward: cac_scalar_reward(reply2.p_normal, reply2.p_abnormal)?,
        evidence,
        flags,
    })
}

/// Runs `f(0..n)` on up to `workers` threads, keeping results in index order.
/// After the first error no new items are started.
fn parallel_map<T, E, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                if out.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    // The first error in index order wins; untouched slots only follow an error.
    slots.into_inner().expect("result slots").into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub rollouts: Vec<RolloutRecord>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
}

/// Samples `group_size` rollouts (decoding seeds `0..group_size`) and scores
/// each one against `gt`. Each rollout is cropped by its own turn-one windows
/// and stops after turn one unless that turn was valid and abnormal.
#[allow(clippy::too_many_arguments)]
pub fn score_rollout_group(
    video: &VideoDescriptor,
    gt: &GroundTruth,
    prompt: &str,
    judge: &dyn JudgeBackend,
    group_size: usize,
    weights: &RewardWeights,
    cfg: &SamplingConfig,
    mode: ParseMode,
) -> Result<GroupScore, PipelineError> {
    if group_size < 2 {
        return Err(PipelineError::GroupTooSmall(group_size));
    }
    let sparse = prepare(video, cfg)?;
    let violations = validate_ground_truth(gt, video);
    if !violations.is_empty() {
        return Err(PipelineError::GroundTruth(violations));
    }
    weights.check().map_err(PipelineError::Config)?;
    let scored = parallel_map(group_size, judge.max_concurrency(), |i| {
        let run = execute(video, &sparse, prompt, judge, cfg, mode, i as u64, false)?;
        let record = match run.turn2 {
            Some((t2, _, clip)) => RolloutRecord::two_turn(run.turn1, t2, clip),
            None => RolloutRecord::terminated(run.turn1),
        };
        let breakdown = aggregate_reward(&record, gt, weights)?;
        Ok::<_, PipelineError>((record, breakdown))
    })?;
    let (rollouts, breakdowns): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let rewards = breakdowns.iter().map(|b: &RewardBreakdown| b.total).collect();
    Ok(GroupScore { rollouts, breakdowns, rewards })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestOfN {
    pub index: usize,
    pub scores: Vec<f64>,
    pub verdicts: Vec<Verdict>,
}

/// Judges every candidate and picks the highest scalar reward; ties go to the
/// lowest index.
pub fn best_of_n(
    candidates: &[VideoDescriptor],
    prompt: &str,
    judge: &dyn JudgeBackend,
    cfg: &SamplingConfig,
    mode: ParseMode,
    sample: u64,
) -> Result<BestOfN, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::NoCandidates);
    }
    let verdicts = parallel_map(candidates.len(), judge.max_concurrency(), |i| {
        run_two_turn(&candidates[i], prompt, judge, cfg, mode, sample)
    })?;
    let scores: Vec<f64> = verdicts.iter().map(|v| v.scalar_reward).collect();
    Ok(BestOfN { index: first_argmax(&scores), scores, verdicts })
}

/// Index of the first maximum.
pub fn first_argmax(scores: &[f64]) -> usize {
    scores.iter().enumerate().fold(0, |best, (i, s)| if *s > scores[best] { i } else { best })
}
