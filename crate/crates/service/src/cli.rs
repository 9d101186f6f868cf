//! The `cac` command line. Every subcommand goes through [`Engine`], so its
//! JSON output is byte-identical to the matching HTTP endpoint.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 validation failure,
//! 3 judge failure.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cac_core::annotation::{AnnotationFile, Violation, ViolationKind};
use cac_core::bench::{read_predictions_jsonl, write_predictions_jsonl, EvalOptions, ExtentRule, ReportFormat};
use cac_core::synth::fixtures::{confusion_fixture, hard_split_fixture, HARD_SPLIT_HITS, MAIN_TABLE_PLAN};
use cac_core::synth::{balanced_corpus, hard_split_corpus};
use cac_core::ParseMode;
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::config::EngineConfig;
use crate::engine::{
    to_body, violations_by_video, ApiError, BestOfNRequest, Corpus, Engine, ErrorKind, EvaluateRequest,
    ObjectiveRequest, RewardRequest, RolloutLogprobs, RolloutScoreRequest, ValidateRequest, VideoInput,
};

#[derive(Debug, Parser)]
#[command(name = "cac", version, about = "Sparse video anomaly reward engine")]
pub struct Cli {
    /// Engine config (TOML); defaults to $CAC_ENGINE_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthetic data and the default decoding sample.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    parse_mode: Option<ModeArg>,
    /// Output format; csv and md apply to `evaluate` only.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FixtureArg {
    /// 500 + 500 videos with 455/45/362/138 confusion counts.
    MainTable,
    /// 400 hard-split videos with 70/69/76/71 hits per bucket.
    HardSplit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtentArg {
    Mean,
    Max,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check annotation files (or directories of them) against the schema.
    Validate { paths: Vec<PathBuf> },
    /// Write a seeded synthetic corpus of annotation files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        normal: usize,
        #[arg(long, default_value_t = 10)]
        abnormal: usize,
        /// Write a hard-split corpus with this many videos per bucket instead.
        #[arg(long, conflicts_with = "fixture")]
        hard_split: Option<usize>,
        /// Write a benchmark fixture with matching `predictions.jsonl`.
        #[arg(long, value_enum)]
        fixture: Option<FixtureArg>,
        /// Include explicit frame handles in each file.
        #[arg(long)]
        with_handles: bool,
    },
    /// Two-turn inference on one video; prints the verdict and scalar reward.
    Score {
        /// Video JSON (`id`, `frame_count`, `source_fps`, optional `frames`) or an annotation file.
        video: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        sample: Option<u64>,
    },
    /// Sample and score a rollout group against an annotation.
    RolloutScore {
        annotation: PathBuf,
        #[arg(long)]
        group_size: usize,
        #[arg(long)]
        prompt: Option<String>,
        /// JSON array of per-rollout `logprobs_current`/`logprobs_old`/`logprobs_ref`.
        #[arg(long)]
        logprobs: Option<PathBuf>,
    },
    /// Score a prediction file against a corpus directory.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        extent: Option<ExtentArg>,
        /// Count a category hit only when the predicted types include it.
        #[arg(long)]
        type_matched: bool,
    },
    /// Judge every candidate video and pick the highest scalar reward.
    BestOfN {
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        sample: Option<u64>,
    },
    /// GRPO objective terms for a batch of scored rollouts with log-probs.
    GrpoObjective { request: PathBuf },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> ApiError {
    ApiError::bad_request(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, ApiError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ApiError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| io_error(path, e))
}

/// A video file holds either a bare video or a full annotation.
fn read_video(path: &Path) -> Result<VideoInput, ApiError> {
    let value: Value = read_json(path)?;
    if value.get("video_id").is_some() {
        let file: AnnotationFile = serde_json::from_value(value).map_err(|e| io_error(path, e))?;
        let (video, _) = file.to_parts().map_err(|violations| ApiError {
            kind: ErrorKind::Domain,
            message: format!("{}: {} violation(s)", path.display(), violations.len()),
            violations,
        })?;
        Ok(VideoInput::from(&video))
    } else {
        serde_json::from_value(value).map_err(|e| io_error(path, e))
    }
}

fn annotation_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, ApiError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_error(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .filter(|f| f.file_name().is_some_and(|n| n != "manifest.json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn write_corpus(out: &Path, corpus: &Corpus, with_handles: bool) -> Result<(), ApiError> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    for (video, gt) in corpus {
        let path = out.join(format!("{}.json", video.id));
        let text = AnnotationFile::from_parts(video, gt, with_handles).to_json_pretty();
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: EngineConfig,
}

impl Ctx<'_> {
    fn engine(&self) -> Result<Engine, ApiError> {
        Engine::new(self.config.clone()).map_err(|e| ApiError::bad_request(e.to_string()))
    }

    fn json_only(&self) -> Result<(), ApiError> {
        match self.cli.format {
            None | Some(FormatArg::Json) => Ok(()),
            Some(_) => Err(ApiError::bad_request("--format csv/md applies to `evaluate` only")),
        }
    }
}

fn execute(ctx: &Ctx, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, ApiError> {
    let seed = ctx.config.seed;
    let text = match &ctx.cli.command {
        Command::Validate { paths } => {
            ctx.json_only()?;
            let files = annotation_paths(paths)?;
            if files.is_empty() {
                return Err(ApiError::bad_request("no annotation files given"));
            }
            let mut annotations = Vec::new();
            let mut unparseable = Vec::new();
            for (i, f) in files.iter().enumerate() {
                match serde_json::from_str::<Value>(&read_text(f)?) {
                    Ok(v) => annotations.push(v),
                    Err(e) => {
                        annotations.push(Value::Null);
                        unparseable.push((i, e.to_string()));
                    }
                }
            }
            let mut report = ctx.engine()?.validate(&ValidateRequest { annotations });
            // Unparseable text is a schema violation of that file, not a usage error.
            for (i, message) in unparseable {
                report.results[i].violations =
                    vec![Violation::new(ViolationKind::Schema, "", format!("invalid JSON: {message}"))];
            }
            for (video, problems) in violations_by_video(&report.results) {
                for p in problems {
                    let _ = writeln!(err, "{video}: {p}");
                }
            }
            write!(out, "{}", to_body(&report)).map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?;
            return Ok(if report.valid { 0 } else { 2 });
        }
        Command::Synth { out: dir, normal, abnormal, hard_split, fixture, with_handles } => {
            ctx.json_only()?;
            let (corpus, predictions) = match (fixture, hard_split) {
                (Some(FixtureArg::MainTable), _) => {
                    let (c, p) = confusion_fixture(seed, MAIN_TABLE_PLAN);
                    (c, Some(p))
                }
                (Some(FixtureArg::HardSplit), _) => {
                    let (c, p) = hard_split_fixture(seed, 100, HARD_SPLIT_HITS);
                    (c, Some(p))
                }
                (None, Some(per_bucket)) => (hard_split_corpus(seed, *per_bucket), None),
                (None, None) => (balanced_corpus(seed, *normal, *abnormal), None),
            };
            write_corpus(dir, &corpus, *with_handles)?;
            let pred_path = match predictions {
                Some(p) => {
                    let path = dir.join("predictions.jsonl");
                    std::fs::write(&path, write_predictions_jsonl(&p)).map_err(|e| io_error(&path, e))?;
                    Some(path)
                }
                None => None,
            };
            to_body(&serde_json::json!({
                "out": dir,
                "videos": corpus.len(),
                "abnormal": corpus.iter().filter(|(_, g)| g.is_abnormal()).count(),
                "predictions": pred_path,
                "seed": seed,
            }))
        }
        Command::Score { video, prompt, sample } => {
            ctx.json_only()?;
            let req =
                RewardRequest { video: read_video(video)?, prompt: prompt.clone(), sample: *sample, parse_mode: None };
            to_body(&ctx.engine()?.reward(&req)?)
        }
        Command::RolloutScore { annotation, group_size, prompt, logprobs } => {
            ctx.json_only()?;
            let logprobs = match logprobs {
                Some(p) => Some(read_json::<Vec<RolloutLogprobs>>(p)?),
                None => None,
            };
            let req = RolloutScoreRequest {
                annotation: read_json(annotation)?,
                group_size: *group_size,
                prompt: prompt.clone(),
                parse_mode: None,
                logprobs,
            };
            to_body(&ctx.engine()?.rollout_score(&req)?)
        }
        Command::Evaluate { predictions, corpus, extent, type_matched } => {
            let preds = read_predictions_jsonl(&read_text(predictions)?).map_err(ApiError::from)?;
            let mut options = EvalOptions { hard_split: ctx.config.hard_split, type_matched: *type_matched };
            if let Some(e) = extent {
                options.hard_split.extent_rule = match e {
                    ExtentArg::Mean => ExtentRule::Mean,
                    ExtentArg::Max => ExtentRule::Max,
                };
            }
            let req = EvaluateRequest {
                predictions: preds,
                corpus: None,
                corpus_dir: Some(corpus.clone()),
                options: Some(options),
                format: None,
            };
            ctx.engine()?.evaluate(&req)?.1
        }
        Command::BestOfN { candidates, prompt, sample } => {
            ctx.json_only()?;
            let candidates = candidates.iter().map(|p| read_video(p)).collect::<Result<Vec<_>, _>>()?;
            let req = BestOfNRequest { candidates, prompt: prompt.clone(), sample: *sample, parse_mode: None };
            to_body(&ctx.engine()?.best_of_n(&req)?)
        }
        Command::GrpoObjective { request } => {
            ctx.json_only()?;
            to_body(&ctx.engine()?.grpo_objective(&read_json::<ObjectiveRequest>(request)?)?)
        }
        Command::Serve { bind } => {
            let engine = Arc::new(ctx.engine()?);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?;
            runtime
                .block_on(crate::server::serve(engine, *bind))
                .map_err(|e| ApiError::bad_request(format!("serving on {bind}: {e}")))?;
            return Ok(0);
        }
    };
    let _ = err;
    out.write_all(text.as_bytes()).map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?;
    Ok(0)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let mut config = match EngineConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 1;
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = cli.parse_mode {
        config.parse_mode = match mode {
            ModeArg::Strict => ParseMode::Strict,
            ModeArg::Lenient => ParseMode::Lenient,
        };
    }
    if let Some(format) = cli.format {
        config.report_format = match format {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Md,
        };
    }
    let ctx = Ctx { cli: &cli, config };
    match execute(&ctx, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            for v in &e.violations {
                let _ = writeln!(err, "  {v}");
            }
            e.exit_code()
        }
    }
}
