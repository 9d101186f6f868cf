//! The judge interface and its wire protocol.
//!
//! A judge receives ordered frame handles plus prompt text and answers with
//! raw model text and the probabilities of the "normal" and "abnormal"
//! answers. External model servers speak newline-delimited JSON, one
//! [`JudgeRequest`] per line in and one [`JudgeReply`] per line out.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::TurnKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub request_id: String,
    pub turn: TurnKind,
    pub frames: Vec<String>,
    pub prompt: String,
    #[serde(default)]
    pub prior_cot: Option<String>,
    /// Decoding seed; distinct values ask a stochastic judge for distinct samples.
    #[serde(default)]
    pub sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReply {
    pub request_id: String,
    pub raw_text: String,
    pub p_normal: f64,
    pub p_abnormal: f64,
}

impl JudgeReply {
    pub fn check(&self) -> Result<(), JudgeError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if ok(self.p_normal) && ok(self.p_abnormal) {
            Ok(())
        } else {
            Err(JudgeError::Protocol(format!(
                "probabilities out of [0,1]: p_normal={}, p_abnormal={}",
                self.p_normal, self.p_abnormal
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("judge transport failed: {0}")]
    Transport(String),
    #[error("judge timed out after {0:?}")]
    Timeout(Duration),
    #[error("judge does not know video {0:?}")]
    UnknownVideo(String),
    #[error("judge protocol error: {0}")]
    Protocol(String),
}

impl JudgeError {
    /// Transport failures and timeouts may succeed on retry; the rest will not.
    pub fn is_retriable(&self) -> bool {
        matches!(self, JudgeError::Transport(_) | JudgeError::Timeout(_))
    }
}

/// A judge backend. Implementations must tolerate concurrent calls up to
/// [`max_concurrency`](JudgeBackend::max_concurrency).
pub trait JudgeBackend: Send + Sync {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError>;

    fn max_concurrency(&self) -> usize {
        1
    }
}

impl<J: JudgeBackend + ?Sized> JudgeBackend for &J {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        (**self).judge(request)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<J: JudgeBackend + ?Sized> JudgeBackend for Box<J> {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        (**self).judge(request)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

/// Retries retriable failures with linear backoff.
pub struct RetryingJudge<J> {
    inner: J,
    attempts: usize,
    backoff: Duration,
}

impl<J: JudgeBackend> RetryingJudge<J> {
    pub fn new(inner: J, attempts: usize, backoff: Duration) -> Self {
        RetryingJudge { inner, attempts: attempts.max(1), backoff }
    }
}

impl<J: JudgeBackend> JudgeBackend for RetryingJudge<J> {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        let mut attempt = 1;
        loop {
            match self.inner.judge(request) {
                Err(e) if e.is_retriable() && attempt < self.attempts => {
                    log::warn!("judge attempt {attempt}/{} for {} failed: {e}", self.attempts, request.request_id);
                    thread::sleep(self.backoff * attempt as u32);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A judge served by a child process speaking NDJSON on stdin/stdout.
/// Calls are serialized over the single pipe.
pub struct SubprocessJudge {
    pipe: Mutex<Pipe>,
    timeout: Duration,
}

impl SubprocessJudge {
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, JudgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| JudgeError::Transport(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| JudgeError::Transport("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| JudgeError::Transport("no stdout".into()))?;
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(SubprocessJudge { pipe: Mutex::new(Pipe { child, stdin, lines }), timeout })
    }
}

impl JudgeBackend for SubprocessJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        let mut pipe = self.pipe.lock().map_err(|_| JudgeError::Transport("judge pipe poisoned".into()))?;
        let line = serde_json::to_string(request).map_err(|e| JudgeError::Protocol(e.to_string()))?;
        writeln!(pipe.stdin, "{line}")
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| JudgeError::Transport(format!("writing request: {e}")))?;
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            let text = match pipe.lines.recv_timeout(left) {
                Ok(Ok(text)) => text,
                Ok(Err(e)) => return Err(JudgeError::Transport(format!("reading reply: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(JudgeError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(JudgeError::Transport("judge process closed stdout".into()))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let reply: JudgeReply =
                serde_json::from_str(&text).map_err(|e| JudgeError::Protocol(format!("bad reply line: {e}")))?;
            if reply.request_id != request.request_id {
                // A late answer to an earlier, timed-out request.
                log::warn!("dropping stale reply {}", reply.request_id);
                continue;
            }
            reply.check()?;
            return Ok(reply);
        }
    }
}

impl Drop for SubprocessJudge {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}
