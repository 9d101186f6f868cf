//! Scripted judges over a known synthetic corpus.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::parse_handle;
use crate::annotation::ANNOTATION_FPS;
use crate::codec::{format_time_region, TurnKind, KEY_ANOMALIES, KEY_STATUS};
use crate::domain::{AnomalyAnnotation, AnomalyType, BBox, FrameSpan, GroundTruth, Status, VideoDescriptor, COORD_MAX};
use crate::orchestrator::crop::IndexMap;
use crate::orchestrator::judge::{JudgeBackend, JudgeError, JudgeReply, JudgeRequest};
use crate::sampling::{sample_frames, Fps};

/// Probability a scripted judge puts on the answer it gives.
pub const CONFIDENT: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedMode {
    /// Valid JSON wrapped in a code fence or prose.
    Fenced,
    /// Output cut off mid-object.
    Truncated,
    /// `status` or `anomalies` under a different key.
    WrongKey,
    /// Turn two leaves one clip frame without boxes.
    FrameGap,
}

impl std::str::FromStr for MalformedMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fenced" => Ok(MalformedMode::Fenced),
            "truncated" => Ok(MalformedMode::Truncated),
            "wrong_key" | "wrong-key" => Ok(MalformedMode::WrongKey),
            "frame_gap" | "frame-gap" => Ok(MalformedMode::FrameGap),
            other => Err(format!("unknown malformed mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum JudgeScript {
    PerfectOracle,
    /// The oracle with its status flipped with probability `flip_prob`,
    /// windows shifted by up to `window_jitter` frames per end, and box
    /// coordinates shifted by up to `box_jitter`.
    NoisyOracle {
        flip_prob: f64,
        window_jitter: usize,
        box_jitter: i64,
    },
    AlwaysNormal,
    AlwaysAbnormal,
    Malformed {
        mode: MalformedMode,
    },
}

/// A deterministic judge answering from ground truth.
pub struct ScriptedJudge {
    script: JudgeScript,
    seed: u64,
    corpus: HashMap<String, (VideoDescriptor, GroundTruth)>,
}

/// Builds a scripted judge over `corpus`, looked up by video id.
pub fn scripted_judge<I>(script: JudgeScript, seed: u64, corpus: I) -> ScriptedJudge
where
    I: IntoIterator<Item = (VideoDescriptor, GroundTruth)>,
{
    ScriptedJudge { script, seed, corpus: corpus.into_iter().map(|(v, g)| (v.id.clone(), (v, g))).collect() }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// What the judge believes about the clip it is looking at.
enum Belief<'a> {
    Normal,
    /// The true anomalies.
    Truth(&'a [AnomalyAnnotation]),
    /// A made-up anomaly on a normal video.
    Invented {
        kind: AnomalyType,
        bbox: BBox,
    },
}

struct View<'a> {
    video: &'a VideoDescriptor,
    gt: &'a GroundTruth,
    /// Source index of each frame in the request.
    shown: Vec<usize>,
    /// Source index of each annotation frame.
    annotation: Vec<usize>,
}

impl View<'_> {
    /// The window over the shown frames that covers an annotation span.
    fn window(&self, span: FrameSpan) -> (usize, usize) {
        let (lo, hi) = (self.annotation[span.start], self.annotation[span.end]);
        let inside: Vec<usize> = (0..self.shown.len()).filter(|&p| (lo..=hi).contains(&self.shown[p])).collect();
        match (inside.first(), inside.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                let p = nearest(&self.shown, lo);
                (p, p)
            }
        }
    }

    /// Boxes of one anomaly on every shown clip frame: the annotated boxes on
    /// the clip frame each annotation frame maps to, the nearest annotated
    /// boxes elsewhere.
    fn clip_boxes(&self, a: &AnomalyAnnotation) -> BTreeMap<usize, Vec<BBox>> {
        let map = IndexMap::build(self.shown.clone(), &self.annotation);
        let mut exact: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
        for (j, boxes) in &a.boxes {
            if let Some(k) = map.clip_for_sparse(*j) {
                exact.entry(k).or_default().extend(boxes.iter().copied());
            }
        }
        (0..self.shown.len())
            .map(|k| {
                let boxes = exact.get(&k).cloned().unwrap_or_else(|| {
                    a.boxes
                        .iter()
                        .min_by_key(|(j, _)| self.annotation[**j].abs_diff(self.shown[k]))
                        .map_or_else(|| vec![BBox::FULL_FRAME], |(_, b)| b.clone())
                });
                (k, boxes)
            })
            .collect()
    }
}

fn nearest(sorted: &[usize], target: usize) -> usize {
    (0..sorted.len()).min_by_key(|&p| sorted[p].abs_diff(target)).unwrap_or(0)
}

fn jitter_box(rng: &mut ChaCha8Rng, b: BBox, jitter: i64) -> BBox {
    if jitter == 0 {
        return b;
    }
    let mut shift = |v: i64| (v + rng.random_range(-jitter..=jitter)).clamp(0, COORD_MAX);
    let mut out = BBox { xmin: shift(b.xmin), ymin: shift(b.ymin), xmax: shift(b.xmax), ymax: shift(b.ymax) };
    for (lo, hi) in [(&mut out.xmin, &mut out.xmax), (&mut out.ymin, &mut out.ymax)] {
        if *lo > *hi {
            std::mem::swap(lo, hi);
        }
        if *lo == *hi {
            if *hi < COORD_MAX {
                *hi += 1;
            } else {
                *lo -= 1;
            }
        }
    }
    out
}

fn box_value(boxes: &[BBox]) -> Value {
    if boxes.len() == 1 {
        json!(boxes[0].to_array())
    } else {
        Value::Array(boxes.iter().map(|b| json!(b.to_array())).collect())
    }
}

fn response(status: Status, entries: Vec<Value>) -> Value {
    let cot = match status {
        Status::Normal => "Scanned every frame; nothing violates physical or visual plausibility.",
        Status::Abnormal => "Located an implausible region and checked its extent frame by frame.",
    };
    json!({ "COT": cot, KEY_STATUS: status.as_str(), KEY_ANOMALIES: entries })
}

fn turn_one_entry(kind: AnomalyType, window: (usize, usize)) -> Value {
    json!({
        "Attributed Time Region": format_time_region(&FrameSpan::sparse(window.0, window.1)),
        "Attributed Label": kind.name(),
        "Reason for Anomaly": format!("{} visible in this range", kind.name().to_lowercase()),
        "Problem Region": "highlighted object",
    })
}

fn turn_two_entry(kind: AnomalyType, boxes: &BTreeMap<usize, Vec<BBox>>) -> Value {
    let bbox: Map<String, Value> = boxes.iter().map(|(k, b)| (format!("Frame {k}"), box_value(b))).collect();
    json!({
        "Attributed Label": kind.name(),
        "Reason for Anomaly": format!("{} visible in this range", kind.name().to_lowercase()),
        "Problem Region": "highlighted object",
        "BBOX": bbox,
    })
}

impl ScriptedJudge {
    fn rng(&self, video_id: &str, sample: u64, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(video_id));
        rng.set_stream(sample.wrapping_mul(8).wrapping_add(salt));
        rng
    }

    fn view<'a>(&'a self, request: &JudgeRequest) -> Result<View<'a>, JudgeError> {
        let first = request.frames.first().ok_or_else(|| JudgeError::Protocol("request has no frames".into()))?;
        let (id, _) =
            parse_handle(first).ok_or_else(|| JudgeError::Protocol(format!("unrecognised handle {first:?}")))?;
        let (video, gt) = self.corpus.get(id).ok_or_else(|| JudgeError::UnknownVideo(id.to_string()))?;
        let shown = request
            .frames
            .iter()
            .map(|h| match parse_handle(h) {
                Some((other, idx)) if other == id && idx < video.frame_count => Ok(idx),
                _ => Err(JudgeError::Protocol(format!("handle {h:?} is not a frame of {id}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let annotation = sample_frames(video, Fps::integer(ANNOTATION_FPS));
        Ok(View { video, gt, shown, annotation })
    }

    fn belief<'a>(&self, view: &View<'a>, sample: u64) -> Belief<'a> {
        let truth = || {
            if view.gt.is_abnormal() {
                Belief::Truth(&view.gt.anomalies)
            } else {
                Belief::Normal
            }
        };
        match self.script {
            JudgeScript::PerfectOracle | JudgeScript::Malformed { .. } => truth(),
            JudgeScript::AlwaysNormal => Belief::Normal,
            JudgeScript::AlwaysAbnormal => {
                Belief::Invented { kind: AnomalyType::ObjectDistortion, bbox: BBox::FULL_FRAME }
            }
            JudgeScript::NoisyOracle { flip_prob, .. } => {
                let mut rng = self.rng(&view.video.id, sample, 0);
                let flip = rng.random_bool(flip_prob.clamp(0.0, 1.0));
                match (view.gt.is_abnormal(), flip) {
                    (_, false) => truth(),
                    (true, true) => Belief::Normal,
                    (false, true) => Belief::Invented {
                        kind: AnomalyType::ALL[rng.random_range(0..AnomalyType::ALL.len())],
                        bbox: super::random_box(&mut rng, 50..=400),
                    },
                }
            }
        }
    }

    fn answer(&self, view: &View, request: &JudgeRequest) -> Value {
        let belief = self.belief(view, request.sample);
        let mut rng = self.rng(&view.video.id, request.sample, 1 + request.turn as u64);
        let (window_jitter, box_jitter) = match self.script {
            JudgeScript::NoisyOracle { window_jitter, box_jitter, .. } => (window_jitter, box_jitter),
            _ => (0, 0),
        };
        let n = view.shown.len();
        match (belief, request.turn) {
            (Belief::Normal, _) => response(Status::Normal, Vec::new()),
            (Belief::Truth(anomalies), TurnKind::TurnOne) => {
                let entries = anomalies
                    .iter()
                    .map(|a| {
                        let (s, e) = view.window(a.span);
                        let mut shift = |p: usize| {
                            let d = rng.random_range(0..=2 * window_jitter) as i64 - window_jitter as i64;
                            (p as i64 + d).clamp(0, n as i64 - 1) as usize
                        };
                        let (s, e) = (shift(s), shift(e));
                        turn_one_entry(a.kind, (s.min(e), s.max(e)))
                    })
                    .collect();
                response(Status::Abnormal, entries)
            }
            (Belief::Truth(anomalies), TurnKind::TurnTwo) => {
                let entries = anomalies
                    .iter()
                    .map(|a| {
                        let boxes = view
                            .clip_boxes(a)
                            .into_iter()
                            .map(|(k, list)| {
                                (k, list.into_iter().map(|b| jitter_box(&mut rng, b, box_jitter)).collect())
                            })
                            .collect();
                        turn_two_entry(a.kind, &boxes)
                    })
                    .collect();
                response(Status::Abnormal, entries)
            }
            (Belief::Invented { kind, .. }, TurnKind::TurnOne) => {
                let window = if matches!(self.script, JudgeScript::AlwaysAbnormal) {
                    (0, n - 1)
                } else {
                    let len = rng.random_range(1..=4.min(n));
                    let start = rng.random_range(0..=n - len);
                    (start, start + len - 1)
                };
                response(Status::Abnormal, vec![turn_one_entry(kind, window)])
            }
            (Belief::Invented { kind, bbox }, TurnKind::TurnTwo) => {
                let boxes = (0..n).map(|k| (k, vec![bbox])).collect();
                response(Status::Abnormal, vec![turn_two_entry(kind, &boxes)])
            }
        }
    }
}

fn corrupt(mode: MalformedMode, turn: TurnKind, value: Value, rng: &mut ChaCha8Rng) -> String {
    let text = serde_json::to_string(&value).expect("serializable");
    match mode {
        MalformedMode::Fenced => {
            let wrapped = match rng.random_range(0..4) {
                0 => format!("```json\n{text}\n```"),
                1 => format!("```\n{text}\n```"),
                2 => format!("Here is my analysis:\n{text}"),
                _ => format!("{text}\nLet me know if you need more detail."),
            };
            wrapped
        }
        MalformedMode::Truncated => {
            let cut = rng.random_range(1..text.len());
            // Keep the cut on a character boundary.
            let cut = (0..=cut).rev().find(|&c| text.is_char_boundary(c)).unwrap_or(0);
            text[..cut].to_string()
        }
        MalformedMode::WrongKey => {
            let (from, to) = match rng.random_range(0..4) {
                0 => (KEY_STATUS, "Status"),
                1 => (KEY_STATUS, "state"),
                2 => (KEY_ANOMALIES, "Anomalies"),
                _ => (KEY_ANOMALIES, "anomaly"),
            };
            let Value::Object(map) = value else { unreachable!("responses are objects") };
            let renamed: Map<String, Value> =
                map.into_iter().map(|(k, v)| (if k == from { to.to_string() } else { k }, v)).collect();
            serde_json::to_string(&renamed).expect("serializable")
        }
        MalformedMode::FrameGap => {
            let mut value = value;
            if turn == TurnKind::TurnTwo {
                let frames: Vec<String> = value[KEY_ANOMALIES]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|e| e["BBOX"].as_object())
                    .flat_map(|m| m.keys().cloned())
                    .collect();
                if !frames.is_empty() {
                    let victim = frames[rng.random_range(0..frames.len())].clone();
                    for entry in value[KEY_ANOMALIES].as_array_mut().into_iter().flatten() {
                        if let Some(m) = entry["BBOX"].as_object_mut() {
                            m.shift_remove(&victim);
                        }
                    }
                }
            }
            serde_json::to_string(&value).expect("serializable")
        }
    }
}

impl JudgeBackend for ScriptedJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeReply, JudgeError> {
        let view = self.view(request)?;
        let value = self.answer(&view, request);
        let status = if value[KEY_STATUS] == "abnormal" { Status::Abnormal } else { Status::Normal };
        let raw_text = match self.script {
            JudgeScript::Malformed { mode } => {
                let mut rng = self.rng(&view.video.id, request.sample, 4 + request.turn as u64);
                corrupt(mode, request.turn, value, &mut rng)
            }
            _ => serde_json::to_string(&value).expect("serializable"),
        };
        let (p_normal, p_abnormal) = match status {
            Status::Normal => (CONFIDENT, 1.0 - CONFIDENT),
            Status::Abnormal => (1.0 - CONFIDENT, CONFIDENT),
        };
        Ok(JudgeReply { request_id: request.request_id.clone(), raw_text, p_normal, p_abnormal })
    }

    fn max_concurrency(&self) -> usize {
        8
    }
}
