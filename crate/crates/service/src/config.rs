//! Engine configuration: one TOML file, validated at load.
//!
//! Lookup order: an explicit path (`--config`), then the path in
//! `CAC_ENGINE_CONFIG`, then built-in defaults.

use std::path::{Path, PathBuf};

use cac_core::bench::{HardSplitConfig, ReportFormat};
use cac_core::grpo::GrpoConfig;
use cac_core::orchestrator::SamplingConfig;
use cac_core::synth::judge::JudgeScript;
use cac_core::{ParseMode, RewardWeights};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "CAC_ENGINE_CONFIG";

pub const DEFAULT_PROMPT: &str = "Inspect the frames of this generated video for physically or visually \
implausible content. Answer with one JSON object with keys COT, status and anomalies.";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where a scripted judge learns the ground truth it answers from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A directory of annotation files.
    Dir { path: PathBuf },
    /// `balanced_corpus(seed, n_normal, n_abnormal)`.
    Balanced { seed: u64, n_normal: usize, n_abnormal: usize },
    /// `hard_split_corpus(seed, per_bucket)`.
    HardSplit { seed: u64, per_bucket: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig { attempts: 3, backoff_ms: 200 }
    }
}

fn default_script() -> JudgeScript {
    JudgeScript::PerfectOracle
}

fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeConfig {
    /// A deterministic judge answering from known ground truth.
    Scripted {
        #[serde(default = "default_script")]
        script: JudgeScript,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        corpus: Vec<CorpusSource>,
    },
    /// A child process speaking newline-delimited JSON on stdin/stdout.
    Subprocess {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default)]
        retry: RetryConfig,
    },
    /// An HTTP endpoint taking a `JudgeRequest` body and returning a `JudgeReply`.
    Http {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default)]
        retry: RetryConfig,
    },
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig::Scripted { script: default_script(), seed: 0, corpus: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub sampling: SamplingConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoConfig,
    pub judge: JudgeConfig,
    pub parse_mode: ParseMode,
    /// Requests served at once; also caps judge calls per request.
    pub concurrency: usize,
    pub report_format: ReportFormat,
    pub hard_split: HardSplitConfig,
    /// Default decoding seed for requests that carry none.
    pub seed: u64,
    pub prompt: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            sampling: SamplingConfig::default(),
            reward: RewardWeights::default(),
            grpo: GrpoConfig::default(),
            judge: JudgeConfig::default(),
            parse_mode: ParseMode::Strict,
            concurrency: 4,
            report_format: ReportFormat::Json,
            hard_split: HardSplitConfig::default(),
            seed: 0,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: EngineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), source: Box::new(e) })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    /// Loads from `explicit`, else from `$CAC_ENGINE_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(path) = explicit {
            return Self::from_path(path);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::from_path(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.sampling.check().map_err(ConfigError::Invalid)?;
        self.reward.check().map_err(ConfigError::Invalid)?;
        self.grpo.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be >= 1".into()));
        }
        let h = &self.hard_split;
        if !(h.duration_s.is_finite() && h.duration_s > 0.0) || !(h.extent_frac > 0.0 && h.extent_frac <= 1.0) {
            return Err(ConfigError::Invalid(format!("bad hard-split thresholds {h:?}")));
        }
        match &self.judge {
            JudgeConfig::Scripted { script, .. } => {
                if let JudgeScript::NoisyOracle { flip_prob, box_jitter, .. } = script {
                    if !(0.0..=1.0).contains(flip_prob) || *box_jitter < 0 {
                        return Err(ConfigError::Invalid(format!("bad noisy oracle {script:?}")));
                    }
                }
            }
            JudgeConfig::Subprocess { command, timeout_ms, retry } => {
                if command.is_empty() {
                    return Err(ConfigError::Invalid("subprocess judge needs a command".into()));
                }
                check_transport(*timeout_ms, retry)?;
            }
            JudgeConfig::Http { url, timeout_ms, retry } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    return Err(ConfigError::Invalid(format!("judge url must be http(s), got {url:?}")));
                }
                check_transport(*timeout_ms, retry)?;
            }
        }
        Ok(())
    }
}

fn check_transport(timeout_ms: u64, retry: &RetryConfig) -> Result<(), ConfigError> {
    if timeout_ms == 0 {
        return Err(ConfigError::Invalid("judge timeout_ms must be > 0".into()));
    }
    if retry.attempts == 0 {
        return Err(ConfigError::Invalid("judge retry attempts must be >= 1".into()));
    }
    Ok(())
}
