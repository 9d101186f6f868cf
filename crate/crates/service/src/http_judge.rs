//! Judge backend that POSTs each `JudgeRequest` as JSON to a model server.

use std::time::Duration;

use cac_core::orchestrator::judge::{JudgeBackend, JudgeError, JudgeReply, JudgeRequest};

pub struct HttpJudge {
    agent: ureq::Agent,
    url: String,
    timeout: Duration,
    concurrency: usize,
}

impl HttpJudge {
    pub fn new(url: impl Into<String>, timeout: Duration, concurrency: usize) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        HttpJudge { agent, url: url.into(), timeout, concurrency: concurrency.max(1) }
    }
}

impl JudgeBackend for HttpJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        let mut response = self.agent.post(&self.url).send_json(request).map_err(|e| match e {
            ureq::Error::Timeout(_) => JudgeError::Timeout(self.timeout),
            other => JudgeError::Transport(other.to_string()),
        })?;
        let status = response.status();
        if status.is_server_error() {
            return Err(JudgeError::Transport(format!("judge server answered {status}")));
        }
        if !status.is_success() {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(JudgeError::Protocol(format!("judge server answered {status}: {body}")));
        }
        response.body_mut().read_json::<JudgeReply>().map_err(|e| match e {
            ureq::Error::Timeout(_) => JudgeError::Timeout(self.timeout),
            ureq::Error::Io(io) => JudgeError::Transport(io.to_string()),
            other => JudgeError::Protocol(format!("unreadable judge reply: {other}")),
        })
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}
