//! Request handling shared by the HTTP service and the CLI, so both produce
//! identical bodies for identical inputs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use cac_core::annotation::{load_corpus, AnnotationFile, Violation, ViolationKind};
use cac_core::bench::{emit_report, evaluate, BenchError, EvalOptions, PredictionRecord, ReportFormat};
use cac_core::grpo::{group_advantages, grpo_objective, GrpoConfig, ObjectiveTerms, RolloutGroup, TokenRatioStream};
use cac_core::orchestrator::judge::{JudgeBackend, JudgeError, RetryingJudge, SubprocessJudge};
use cac_core::orchestrator::{best_of_n, run_two_turn, score_rollout_group, BestOfN, PipelineError, Verdict};
use cac_core::synth::judge::scripted_judge;
use cac_core::synth::{balanced_corpus, hard_split_corpus};
use cac_core::{Fps, GroundTruth, ParseMode, RewardBreakdown, RolloutRecord, VideoDescriptor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ConfigError, CorpusSource, EngineConfig, JudgeConfig};
use crate::http_judge::HttpJudge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// The request body does not match the schema.
    BadRequest,
    /// Well-formed input that violates a domain rule.
    Domain,
    /// The judge failed or answered out of protocol.
    Judge,
    JudgeTimeout,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        ApiError { kind, message: message.into(), violations: Vec::new() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadRequest, message)
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Domain, message)
    }

    pub fn http_status(&self) -> u16 {
        match self.kind {
            ErrorKind::BadRequest => 400,
            ErrorKind::Domain => 422,
            ErrorKind::Judge => 502,
            ErrorKind::JudgeTimeout => 504,
            ErrorKind::Internal => 500,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::BadRequest | ErrorKind::Internal => 1,
            ErrorKind::Domain => 2,
            ErrorKind::Judge | ErrorKind::JudgeTimeout => 3,
        }
    }

    /// The JSON error body: `{"error": {...}}`.
    pub fn body(&self) -> String {
        let mut text = serde_json::to_string_pretty(&serde_json::json!({ "error": self })).expect("serializable");
        text.push('\n');
        text
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Judge(JudgeError::Timeout(_)) => ApiError::new(ErrorKind::JudgeTimeout, e.to_string()),
            PipelineError::Judge(_) => ApiError::new(ErrorKind::Judge, e.to_string()),
            PipelineError::GroundTruth(violations) => ApiError {
                kind: ErrorKind::Domain,
                message: format!("ground truth has {} violation(s)", violations.len()),
                violations,
            },
            other => ApiError::domain(other.to_string()),
        }
    }
}

impl From<BenchError> for ApiError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Json { .. } | BenchError::UnknownFormat(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::domain(other.to_string()),
        }
    }
}

/// A video in a request; frame handles default to `frame://<id>/<index>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoInput {
    pub id: String,
    pub frame_count: usize,
    pub source_fps: Fps,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<String>>,
}

impl VideoInput {
    pub fn to_descriptor(&self) -> Result<VideoDescriptor, ApiError> {
        let v = match &self.frames {
            Some(frames) => {
                if frames.len() != self.frame_count {
                    return Err(ApiError::domain(format!(
                        "{}: frame_count {} but {} frame handles",
                        self.id,
                        self.frame_count,
                        frames.len()
                    )));
                }
                VideoDescriptor::new(self.id.clone(), self.source_fps, frames.clone())
            }
            None => VideoDescriptor::with_default_handles(self.id.clone(), self.frame_count, self.source_fps),
        };
        v.map_err(|e| ApiError::domain(e.to_string()))
    }
}

impl From<&VideoDescriptor> for VideoInput {
    fn from(v: &VideoDescriptor) -> Self {
        VideoInput {
            id: v.id.clone(),
            frame_count: v.frame_count,
            source_fps: v.source_fps,
            frames: Some(v.frames.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequest {
    pub video: VideoInput,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub sample: Option<u64>,
    #[serde(default)]
    pub parse_mode: Option<ParseMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardResponse {
    pub scalar: f64,
    pub verdict: Verdict,
}

/// Per-token log-probabilities of one rollout under the current, old and
/// reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutLogprobs {
    pub logprobs_current: Vec<f64>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
}

impl RolloutLogprobs {
    fn stream(&self, index: usize) -> Result<TokenRatioStream, ApiError> {
        TokenRatioStream::from_logprobs(&self.logprobs_current, &self.logprobs_old, &self.logprobs_ref)
            .map_err(|e| ApiError::domain(format!("rollout {index}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutScoreRequest {
    /// The video and its ground truth.
    pub annotation: AnnotationFile,
    pub group_size: usize,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub parse_mode: Option<ParseMode>,
    /// One entry per rollout, in sample order; enables the objective terms.
    #[serde(default)]
    pub logprobs: Option<Vec<RolloutLogprobs>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveSummary {
    pub j_clip: f64,
    pub kl: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutScoreResponse {
    pub video_id: String,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub objective: Option<ObjectiveSummary>,
    pub rollouts: Vec<RolloutRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveRollout {
    pub reward: f64,
    pub logprobs_current: Vec<f64>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveRequest {
    pub rollouts: Vec<ObjectiveRollout>,
    /// Overrides the engine's GRPO constants.
    #[serde(default)]
    pub grpo: Option<GrpoConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub predictions: Vec<PredictionRecord>,
    /// Inline ground truth; exclusive with `corpus_dir`.
    #[serde(default)]
    pub corpus: Option<Vec<AnnotationFile>>,
    /// A directory of annotation files readable by the engine.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub options: Option<EvalOptions>,
    #[serde(default)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateRequest {
    /// Annotation files as raw JSON values.
    pub annotations: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileReport {
    pub index: usize,
    pub video_id: Option<String>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateResponse {
    pub valid: bool,
    pub results: Vec<FileReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestOfNRequest {
    pub candidates: Vec<VideoInput>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub sample: Option<u64>,
    #[serde(default)]
    pub parse_mode: Option<ParseMode>,
}

/// Pretty JSON with a trailing newline: the body format of every endpoint.
pub fn to_body<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

pub type Corpus = Vec<(VideoDescriptor, GroundTruth)>;

fn load_sources(sources: &[CorpusSource]) -> Result<Corpus, ConfigError> {
    let mut corpus = Corpus::new();
    for source in sources {
        match source {
            CorpusSource::Dir { path } => corpus.extend(
                load_corpus(path).map_err(|e| ConfigError::Invalid(format!("judge corpus {}: {e}", path.display())))?,
            ),
            CorpusSource::Balanced { seed, n_normal, n_abnormal } => {
                corpus.extend(balanced_corpus(*seed, *n_normal, *n_abnormal))
            }
            CorpusSource::HardSplit { seed, per_bucket } => corpus.extend(hard_split_corpus(*seed, *per_bucket)),
        }
    }
    Ok(corpus)
}

enum JudgeSource {
    /// Built per request over the configured corpus plus request ground truth.
    Scripted {
        corpus: Arc<Corpus>,
    },
    Shared(Arc<dyn JudgeBackend>),
}

/// The configured engine: constants, judge backend and scripted corpus.
pub struct Engine {
    pub config: EngineConfig,
    judge: JudgeSource,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, ConfigError> {
        config.check()?;
        let judge = match &config.judge {
            JudgeConfig::Scripted { corpus, .. } => JudgeSource::Scripted { corpus: Arc::new(load_sources(corpus)?) },
            JudgeConfig::Subprocess { command, timeout_ms, retry } => {
                let inner = SubprocessJudge::spawn(&command[0], &command[1..], Duration::from_millis(*timeout_ms))
                    .map_err(|e| ConfigError::Invalid(format!("starting judge {command:?}: {e}")))?;
                JudgeSource::Shared(Arc::new(RetryingJudge::new(
                    inner,
                    retry.attempts,
                    Duration::from_millis(retry.backoff_ms),
                )))
            }
            JudgeConfig::Http { url, timeout_ms, retry } => JudgeSource::Shared(Arc::new(RetryingJudge::new(
                HttpJudge::new(url.clone(), Duration::from_millis(*timeout_ms), config.concurrency),
                retry.attempts,
                Duration::from_millis(retry.backoff_ms),
            ))),
        };
        Ok(Engine { config, judge })
    }

    /// An engine using `judge` regardless of the configured backend.
    pub fn with_judge(config: EngineConfig, judge: Arc<dyn JudgeBackend>) -> Result<Self, ConfigError> {
        config.check()?;
        Ok(Engine { config, judge: JudgeSource::Shared(judge) })
    }

    fn judge(&self, extra: &[(VideoDescriptor, GroundTruth)]) -> Arc<dyn JudgeBackend> {
        match (&self.judge, &self.config.judge) {
            (JudgeSource::Scripted { corpus }, JudgeConfig::Scripted { script, seed, .. }) => {
                let videos = corpus.iter().chain(extra).cloned();
                Arc::new(scripted_judge(*script, *seed, videos))
            }
            (JudgeSource::Shared(j), _) => Arc::clone(j),
            (JudgeSource::Scripted { .. }, _) => {
                unreachable!("scripted source implies scripted config")
            }
        }
    }

    fn prompt<'a>(&'a self, prompt: &'a Option<String>) -> &'a str {
        prompt.as_deref().unwrap_or(&self.config.prompt)
    }

    pub fn reward(&self, req: &RewardRequest) -> Result<RewardResponse, ApiError> {
        let video = req.video.to_descriptor()?;
        let judge = self.judge(&[]);
        let verdict = run_two_turn(
            &video,
            self.prompt(&req.prompt),
            &*judge,
            &self.config.sampling,
            req.parse_mode.unwrap_or(self.config.parse_mode),
            req.sample.unwrap_or(self.config.seed),
        )?;
        Ok(RewardResponse { scalar: verdict.scalar_reward, verdict })
    }

    pub fn rollout_score(&self, req: &RolloutScoreRequest) -> Result<RolloutScoreResponse, ApiError> {
        let (video, gt) = req.annotation.to_parts().map_err(|violations| ApiError {
            kind: ErrorKind::Domain,
            message: format!("annotation for {} has {} violation(s)", req.annotation.video_id, violations.len()),
            violations,
        })?;
        if let Some(lp) = &req.logprobs {
            if lp.len() != req.group_size {
                return Err(ApiError::domain(format!(
                    "{} logprob entries for group_size {}",
                    lp.len(),
                    req.group_size
                )));
            }
        }
        let judge = self.judge(&[(video.clone(), gt.clone())]);
        let group = score_rollout_group(
            &video,
            &gt,
            self.prompt(&req.prompt),
            &*judge,
            req.group_size,
            &self.config.reward,
            &self.config.sampling,
            req.parse_mode.unwrap_or(self.config.parse_mode),
        )?;
        let advantages = group_advantages(&group.rewards, self.config.grpo.epsilon_a)
            .map_err(|e| ApiError::domain(e.to_string()))?;
        let objective = match &req.logprobs {
            None => None,
            Some(lp) => {
                let streams = lp.iter().enumerate().map(|(i, l)| l.stream(i)).collect::<Result<Vec<_>, _>>()?;
                let terms = objective_terms(group.rewards.clone(), streams, self.config.grpo)?;
                Some(ObjectiveSummary { j_clip: terms.j_clip, kl: terms.kl, objective: terms.objective })
            }
        };
        Ok(RolloutScoreResponse {
            video_id: video.id,
            rewards: group.rewards,
            breakdowns: group.breakdowns,
            advantages,
            objective,
            rollouts: group.rollouts,
        })
    }

    pub fn grpo_objective(&self, req: &ObjectiveRequest) -> Result<ObjectiveTerms, ApiError> {
        let rewards = req.rollouts.iter().map(|r| r.reward).collect();
        let streams = req
            .rollouts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                TokenRatioStream::from_logprobs(&r.logprobs_current, &r.logprobs_old, &r.logprobs_ref)
                    .map_err(|e| ApiError::domain(format!("rollout {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        objective_terms(rewards, streams, req.grpo.unwrap_or(self.config.grpo))
    }

    /// Scores predictions and renders the report in the requested format.
    pub fn evaluate(&self, req: &EvaluateRequest) -> Result<(ReportFormat, String), ApiError> {
        let corpus = match (&req.corpus, &req.corpus_dir) {
            (Some(files), None) => files
                .iter()
                .map(|f| {
                    f.to_parts().map_err(|violations| ApiError {
                        kind: ErrorKind::Domain,
                        message: format!("annotation for {} has {} violation(s)", f.video_id, violations.len()),
                        violations,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            (None, Some(dir)) => load_corpus(dir).map_err(|e| ApiError::domain(e.to_string()))?,
            _ => return Err(ApiError::bad_request("give exactly one of `corpus` and `corpus_dir`")),
        };
        let options = req.options.unwrap_or(EvalOptions { hard_split: self.config.hard_split, type_matched: false });
        let report = evaluate(&req.predictions, &corpus, &options)?;
        let format = req.format.unwrap_or(self.config.report_format);
        Ok((format, emit_report(&report, format)))
    }

    pub fn validate(&self, req: &ValidateRequest) -> ValidateResponse {
        let results: Vec<FileReport> = req.annotations.iter().enumerate().map(|(i, v)| validate_value(i, v)).collect();
        ValidateResponse { valid: results.iter().all(|r| r.violations.is_empty()), results }
    }

    pub fn best_of_n(&self, req: &BestOfNRequest) -> Result<BestOfN, ApiError> {
        let candidates = req.candidates.iter().map(VideoInput::to_descriptor).collect::<Result<Vec<_>, _>>()?;
        let judge = self.judge(&[]);
        Ok(best_of_n(
            &candidates,
            self.prompt(&req.prompt),
            &*judge,
            &self.config.sampling,
            req.parse_mode.unwrap_or(self.config.parse_mode),
            req.sample.unwrap_or(self.config.seed),
        )?)
    }
}

fn objective_terms(
    rewards: Vec<f64>,
    streams: Vec<TokenRatioStream>,
    grpo: GrpoConfig,
) -> Result<ObjectiveTerms, ApiError> {
    let group = RolloutGroup::new(rewards, streams, grpo).map_err(|e| ApiError::domain(e.to_string()))?;
    grpo_objective(&group).map_err(|e| ApiError::domain(e.to_string()))
}

/// Validates one annotation given as a raw JSON value.
pub fn validate_value(index: usize, value: &Value) -> FileReport {
    let video_id = value.get("video_id").and_then(Value::as_str).map(String::from);
    let violations = match serde_json::from_value::<AnnotationFile>(value.clone()) {
        Err(e) => vec![Violation { kind: ViolationKind::Schema, path: String::new(), message: e.to_string() }],
        Ok(file) => file.to_parts().err().unwrap_or_default(),
    };
    FileReport { index, video_id, violations }
}

/// Groups violations by video id, for human-readable listings.
pub fn violations_by_video(reports: &[FileReport]) -> BTreeMap<String, Vec<String>> {
    reports
        .iter()
        .filter(|r| !r.violations.is_empty())
        .map(|r| {
            let key = r.video_id.clone().unwrap_or_else(|| format!("#{}", r.index));
            (key, r.violations.iter().map(ToString::to_string).collect())
        })
        .collect()
}
