//! Shared test support: a random rollout generator and a naive, independently
//! written reward evaluator working from raw response text.

#![allow(dead_code)]

use cac_core::codec::format_time_region;
use cac_core::domain::SaliencyLabel;
use cac_core::orchestrator::{crop_window, hull, ClipDescriptor};
use cac_core::reward::continues_to_turn_two;
use cac_core::{
    sample_frames, AnomalyType, BBox, Fps, FrameSpan, GroundTruth, ParseMode, RewardWeights, RolloutRecord, Status,
    TurnKind, TurnOutcome, VideoDescriptor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub const SPARSE_FPS: u32 = 4;
pub const DENSE_FPS: u32 = 8;

pub struct Case {
    pub video: VideoDescriptor,
    pub gt: GroundTruth,
    pub rollout: RolloutRecord,
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..900);
    let y = rng.random_range(0..900);
    BBox::new(x, y, x + rng.random_range(1..=1000 - x), y + rng.random_range(1..=1000 - y)).unwrap()
}

/// A box near some GT box half of the time, anywhere otherwise.
fn plausible_box(rng: &mut ChaCha8Rng, gt: &GroundTruth) -> BBox {
    let all: Vec<BBox> = gt.anomalies.iter().flat_map(|a| a.boxes.values().flatten().copied()).collect();
    if all.is_empty() || rng.random_bool(0.5) {
        return random_box(rng);
    }
    let b = all[rng.random_range(0..all.len())];
    let mut j = |v: i64| (v + rng.random_range(-60..=60)).clamp(0, 1000);
    let (x0, x1) = (j(b.xmin), j(b.xmax));
    let (y0, y1) = (j(b.ymin), j(b.ymax));
    let fix = |a: i64, b: i64| {
        let (lo, hi) = (a.min(b), a.max(b));
        if lo == hi {
            if hi < 1000 {
                (lo, hi + 1)
            } else {
                (lo - 1, hi)
            }
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = fix(x0, x1);
    let (y0, y1) = fix(y0, y1);
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, gt: &GroundTruth) -> AnomalyType {
    let truth: Vec<AnomalyType> = gt.types().into_iter().collect();
    if !truth.is_empty() && rng.random_bool(0.6) {
        truth[rng.random_range(0..truth.len())]
    } else {
        AnomalyType::ALL[rng.random_range(0..5)]
    }
}

fn random_window(rng: &mut ChaCha8Rng, gt: &GroundTruth, n: usize) -> (usize, usize) {
    if let (true, Some(a)) = (rng.random_bool(0.6), gt.anomalies.first()) {
        let mut j = |v: usize| (v as i64 + rng.random_range(-2..=2)).clamp(0, n as i64 - 1) as usize;
        let (s, e) = (j(a.span.start), j(a.span.end));
        (s.min(e), s.max(e))
    } else {
        let s = rng.random_range(0..n);
        (s, rng.random_range(s..n))
    }
}

fn envelope(status: &str, entries: Vec<Value>) -> String {
    json!({"COT": "reasoning", "status": status, "anomalies": entries}).to_string()
}

fn random_turn_one(rng: &mut ChaCha8Rng, gt: &GroundTruth, n: usize) -> String {
    match rng.random_range(0..10) {
        0 | 1 => envelope("normal", vec![]),
        2 => "I think it is fine".to_string(),
        3 => envelope("abnormal", vec![]),
        4 => {
            let e = json!({"Attributed Label": "Object Distortion", "Attributed Time Region": "Frame 0", "Reason for Anomaly": "r", "Problem Region": "p"});
            envelope("normal", vec![e])
        }
        _ => {
            let entries = (0..rng.random_range(1..=3))
                .map(|_| {
                    let (s, e) = random_window(rng, gt, n);
                    let mut m = Map::new();
                    m.insert("Attributed Time Region".into(), json!(format_time_region(&FrameSpan::sparse(s, e))));
                    if rng.random_range(0..20) > 0 {
                        m.insert("Attributed Label".into(), json!(random_labels(rng, gt).name()));
                    }
                    m.insert("Reason for Anomaly".into(), json!("r"));
                    m.insert("Problem Region".into(), json!("p"));
                    Value::Object(m)
                })
                .collect();
            envelope("abnormal", entries)
        }
    }
}

fn random_turn_two(rng: &mut ChaCha8Rng, gt: &GroundTruth, n: usize) -> String {
    match rng.random_range(0..8) {
        0 => envelope("normal", vec![]),
        1 => "{\"status\": \"abnormal\", \"anomalies\": [".to_string(),
        _ => {
            let gap = if rng.random_range(0..6) == 0 { Some(rng.random_range(0..n)) } else { None };
            let entries = (0..rng.random_range(1..=2))
                .map(|_| {
                    let mut bbox = Map::new();
                    for k in 0..n {
                        if Some(k) == gap {
                            continue;
                        }
                        let count = rng.random_range(1..=2);
                        let list: Vec<Value> = (0..count).map(|_| json!(plausible_box(rng, gt).to_array())).collect();
                        let v = if count == 1 { list[0].clone() } else { Value::Array(list) };
                        bbox.insert(format!("Frame {k}"), v);
                    }
                    json!({
                        "Attributed Label": random_labels(rng, gt).name(),
                        "Reason for Anomaly": "r",
                        "Problem Region": "p",
                        "BBOX": bbox,
                    })
                })
                .collect();
            envelope("abnormal", entries)
        }
    }
}

/// Executes one random rollout against a known video the same way GRPO
/// scoring does: turn one on the sparse frames, and turn two on the crop of
/// the turn-one windows when turn one is valid and abnormal.
pub fn random_case(rng: &mut ChaCha8Rng, video: &VideoDescriptor, gt: &GroundTruth) -> Case {
    let sparse = sample_frames(video, Fps::integer(SPARSE_FPS));
    let raw1 = random_turn_one(rng, gt, sparse.len());
    let turn1 = TurnOutcome::assess(&raw1, TurnKind::TurnOne, ParseMode::Strict, Some(sparse.len()));
    let rollout = if continues_to_turn_two(&turn1) {
        let window = hull(&turn1.valid_response().unwrap().windows()).unwrap();
        let clip = crop_window(video, &sparse, window, Fps::integer(DENSE_FPS), None).unwrap();
        let raw2 = random_turn_two(rng, gt, clip.frame_count());
        let turn2 = TurnOutcome::assess(&raw2, TurnKind::TurnTwo, ParseMode::Strict, Some(clip.frame_count()));
        RolloutRecord::two_turn(turn1, turn2, clip)
    } else {
        RolloutRecord::terminated(turn1)
    };
    Case { video: video.clone(), gt: gt.clone(), rollout }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- naive evaluator ----

fn naive_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])) as f64;
    let h = (a[3].min(b[3]) - a[1].max(b[1])) as f64;
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |r: [i64; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    inter / (area(a) + area(b) - inter)
}

fn jaccard(a: &[String], b: &[String]) -> f64 {
    let a: Vec<&String> = a.iter().fold(Vec::new(), |mut v, x| {
        if !v.contains(&x) {
            v.push(x);
        }
        v
    });
    let b: Vec<&String> = b.iter().fold(Vec::new(), |mut v, x| {
        if !v.contains(&x) {
            v.push(x);
        }
        v
    });
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn frame_number(text: &str) -> usize {
    text.trim().trim_start_matches("Frame").trim().parse().unwrap()
}

fn window_of(text: &str) -> (usize, usize) {
    match text.split_once('-') {
        Some((a, b)) => (frame_number(a), frame_number(b)),
        None => (frame_number(text), frame_number(text)),
    }
}

fn boxes_of(v: &Value) -> Vec<[i64; 4]> {
    let arr = v.as_array().unwrap();
    let one = |x: &Value| -> [i64; 4] {
        let a = x.as_array().unwrap();
        [a[0].as_i64().unwrap(), a[1].as_i64().unwrap(), a[2].as_i64().unwrap(), a[3].as_i64().unwrap()]
    };
    if arr.first().is_some_and(Value::is_array) {
        arr.iter().map(one).collect()
    } else {
        vec![one(v)]
    }
}

fn labels_of(v: &Value) -> Vec<String> {
    v["anomalies"].as_array().unwrap().iter().filter_map(|e| e["Attributed Label"].as_str().map(String::from)).collect()
}

/// Clip frame nearest in source time to `src`, ties to the earlier frame,
/// or `None` when `src` lies outside the clip.
fn nearest_clip_frame(clip: &ClipDescriptor, src: usize) -> Option<usize> {
    let d = &clip.dense_indices;
    if src < d[0] || src > *d.last().unwrap() {
        return None;
    }
    let mut best = 0;
    for k in 1..d.len() {
        if d[k].abs_diff(src) < d[best].abs_diff(src) {
            best = k;
        }
    }
    Some(best)
}

/// Straight transcription of the reward definition from raw text, the
/// validity flags and the clip, without the kernel's helpers.
pub fn naive_total(case: &Case, w: &RewardWeights) -> f64 {
    let r = &case.rollout;
    let gt = &case.gt;
    let gt_abnormal = gt.status == Status::Abnormal;
    let status_of = |t: &TurnOutcome| -> Option<&'static str> {
        let v: Value = serde_json::from_str(&t.raw).ok()?;
        t.response.as_ref()?;
        Some(if v["status"] == "abnormal" { "abnormal" } else { "normal" })
    };
    let truth = if gt_abnormal { "abnormal" } else { "normal" };
    let valid_json = |t: &TurnOutcome| -> Option<Value> {
        if t.validity.valid {
            serde_json::from_str(&t.raw).ok()
        } else {
            None
        }
    };

    let t1 = valid_json(&r.turn1);
    let t2 = r.turn2.as_ref().and_then(valid_json);
    let fmt1 = if r.turn1.validity.valid { 0.0 } else { -1.0 };
    let fmt2 = match &r.turn2 {
        Some(t) => {
            if t.validity.valid {
                0.0
            } else {
                -1.0
            }
        }
        None => {
            if t1.as_ref().is_some_and(|v| v["status"] == "normal") {
                0.0
            } else {
                -1.0
            }
        }
    };
    let r_fmt = (fmt1 + fmt2) / 2.0;

    let s1 = if status_of(&r.turn1) == Some(truth) { 0.0 } else { -1.0 };
    let r_stat = match &r.turn2 {
        Some(t) => (s1 + if status_of(t) == Some(truth) { 0.0 } else { -1.0 }) / 2.0,
        None if gt_abnormal => (s1 - 1.0) / 2.0,
        None => s1,
    };

    let gamma = if gt.anomalies.is_empty() {
        1.0
    } else {
        gt.anomalies.iter().map(|a| if a.saliency == SaliencyLabel::Salient { 1.0 } else { 0.5 }).sum::<f64>()
            / gt.anomalies.len() as f64
    };
    let mut total = w.w1 * r_fmt + w.w2 * gamma * r_stat;
    if !gt_abnormal {
        return total;
    }

    let gt_labels: Vec<String> = gt.anomalies.iter().map(|a| a.kind.name().to_string()).collect();
    let type_turn = |v: &Option<Value>| v.as_ref().map_or(0.0, |v| jaccard(&labels_of(v), &gt_labels));
    let r_type = (type_turn(&t1) + type_turn(&t2)) / 2.0;

    let n = sample_frames(&case.video, Fps::integer(SPARSE_FPS)).len();
    let mut pred = vec![false; n];
    if let Some(v) = &t1 {
        for e in v["anomalies"].as_array().unwrap() {
            let (s, en) = window_of(e["Attributed Time Region"].as_str().unwrap());
            pred[s..=en].fill(true);
        }
    }
    let mut truth_frames = vec![false; n];
    for a in &gt.anomalies {
        truth_frames[a.span.start..=a.span.end].fill(true);
    }
    let inter = (0..n).filter(|&f| pred[f] && truth_frames[f]).count();
    let union = (0..n).filter(|&f| pred[f] || truth_frames[f]).count();
    let r_temp = if union == 0 { 0.0 } else { inter as f64 / union as f64 };

    let sparse = sample_frames(&case.video, Fps::integer(SPARSE_FPS));
    let mut sum = 0.0;
    let mut count = 0;
    for f in 0..n {
        if !(pred[f] && truth_frames[f]) {
            continue;
        }
        let gt_boxes: Vec<[i64; 4]> =
            gt.anomalies.iter().filter_map(|a| a.boxes.get(&f)).flatten().map(|b| b.to_array()).collect();
        let mut predicted: Vec<[i64; 4]> = Vec::new();
        if let (Some(v), Some(clip)) = (&t2, &r.clip) {
            if let Some(k) = nearest_clip_frame(clip, sparse[f]) {
                for e in v["anomalies"].as_array().unwrap() {
                    if let Some(b) = e["BBOX"].get(format!("Frame {k}")) {
                        predicted.extend(boxes_of(b));
                    }
                }
            }
        }
        for g in gt_boxes {
            sum += predicted.iter().map(|p| naive_iou(g, *p)).fold(0.0, f64::max);
            count += 1;
        }
    }
    let r_spa = if count == 0 { 0.0 } else { sum / count as f64 };

    let tilde = |x: f64| 1.0 - gamma * (1.0 - x);
    total += w.w3 * tilde(r_type) + w.w4 * tilde(r_temp) + w.w5 * tilde(r_spa);
    total
}
