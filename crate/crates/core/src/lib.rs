//! Reward computation, two-turn inference orchestration and benchmark scoring
//! for sparse anomaly judgment of generated videos.
//!
//! The engine never touches pixels: videos are frame counts, frame rates and
//! opaque per-frame handles, and the judge is a pluggable backend.

pub mod annotation;
pub mod bench;
pub mod codec;
pub mod domain;
pub mod grpo;
pub mod orchestrator;
pub mod reward;
pub mod sampling;
pub mod synth;

pub use codec::{parse_turn, ParseMode, TurnKind, TurnOutcome, TurnResponse, ValidityReport};
pub use domain::{
    AnomalyAnnotation, AnomalyType, BBox, FrameSpan, GroundTruth, SaliencyLabel, Status, VideoDescriptor,
};
pub use reward::{aggregate_reward, RewardBreakdown, RewardWeights, RolloutRecord};
pub use sampling::{sample_frames, sample_indices, Fps};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
