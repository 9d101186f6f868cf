#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cac_core::annotation::AnnotationFile;
use cac_core::synth::balanced_corpus;
use cac_core::{GroundTruth, VideoDescriptor};
use cac_service::config::{CorpusSource, EngineConfig, JudgeConfig};
use cac_service::engine::Engine;
use cac_service::server::router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const SEED: u64 = 7;

/// Two normal then two abnormal videos, ids `syn-7-0000` .. `syn-7-0003`.
pub fn corpus() -> Vec<(VideoDescriptor, GroundTruth)> {
    balanced_corpus(SEED, 2, 2)
}

pub fn scripted_config() -> EngineConfig {
    EngineConfig {
        judge: JudgeConfig::Scripted {
            script: cac_core::synth::judge::JudgeScript::PerfectOracle,
            seed: 0,
            corpus: vec![CorpusSource::Balanced { seed: SEED, n_normal: 2, n_abnormal: 2 }],
        },
        ..EngineConfig::default()
    }
}

pub fn scripted_engine() -> Arc<Engine> {
    Arc::new(Engine::new(scripted_config()).unwrap())
}

pub fn annotation(index: usize) -> Value {
    let (v, g) = &corpus()[index];
    serde_json::to_value(AnnotationFile::from_parts(v, g, false)).unwrap()
}

pub fn video_input(index: usize) -> Value {
    let (v, _) = &corpus()[index];
    serde_json::json!({ "id": v.id, "frame_count": v.frame_count, "source_fps": v.source_fps })
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }
}

pub async fn send(engine: Arc<Engine>, method: &str, path: &str, body: Option<String>) -> Reply {
    let mut req = Request::builder().method(method).uri(path);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = router(engine).oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp.headers().get("content-type").map(|h| h.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply { status, content_type, body: String::from_utf8(bytes.to_vec()).unwrap() }
}

pub async fn post(engine: Arc<Engine>, path: &str, body: &Value) -> Reply {
    send(engine, "POST", path, Some(body.to_string())).await
}
