//! Parsing and validation of the judge's structured per-turn output.
//!
//! Each turn answers with one JSON object:
//!
//! ```text
//! {
//!   "COT": "...",
//!   "status": "abnormal" | "normal",
//!   "anomalies": [
//!     {
//!       "Attributed Time Region": "Frame 3 - Frame 7",   // turn one
//!       "Attributed Label": "Human Distortion",
//!       "Reason for Anomaly": "...",
//!       "Problem Region": "...",
//!       "BBOX": { "Frame 0": [xmin, ymin, xmax, ymax] }  // turn two
//!     }
//!   ]
//! }
//! ```
//!
//! [`parse_turn`] turns text into a [`TurnResponse`]; [`check_validity`] applies
//! the stage-specific, status-conditioned schema used by the format reward.
//! Both stages report problems with stable [`ViolationCode`]s.

mod json;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::domain::{parse_taxonomy_label, AnomalyType, BBox, FrameSpan, SpanBasis, Status};

pub const KEY_COT: &str = "COT";
pub const KEY_STATUS: &str = "status";
pub const KEY_ANOMALIES: &str = "anomalies";
pub const KEY_TIME_REGION: &str = "Attributed Time Region";
pub const KEY_LABEL: &str = "Attributed Label";
pub const KEY_REASON: &str = "Reason for Anomaly";
pub const KEY_REGION: &str = "Problem Region";
pub const KEY_BBOX: &str = "BBOX";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    /// Sparse global scan proposing time windows.
    TurnOne,
    /// Dense local grounding producing per-frame boxes.
    TurnTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// The whole text must be one JSON object (surrounding whitespace allowed).
    #[default]
    Strict,
    /// The first balanced top-level object is extracted and parsed.
    Lenient,
}

impl std::str::FromStr for ParseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(ParseMode::Strict),
            "lenient" => Ok(ParseMode::Lenient),
            other => Err(format!("unknown parse mode {other:?}")),
        }
    }
}

/// Stable vocabulary of output problems. Codes serialize in
/// `SCREAMING_SNAKE_CASE`, e.g. `FRAME_GAP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    // Parse failures.
    MalformedJson,
    ExtraText,
    NotAnObject,
    MissingKey,
    WrongType,
    BadStatus,
    UnknownLabel,
    BadTimeRegion,
    BadFrameKey,
    MalformedBox,
    // Schema violations on a parsed response.
    TurnMismatch,
    NormalWithEntries,
    EmptyAnomalies,
    MissingLabel,
    MissingWindow,
    WindowOutOfRange,
    MissingBoxes,
    InvalidBox,
    FrameOutOfRange,
    FrameGap,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::MalformedJson => "MALFORMED_JSON",
            ViolationCode::ExtraText => "EXTRA_TEXT",
            ViolationCode::NotAnObject => "NOT_AN_OBJECT",
            ViolationCode::MissingKey => "MISSING_KEY",
            ViolationCode::WrongType => "WRONG_TYPE",
            ViolationCode::BadStatus => "BAD_STATUS",
            ViolationCode::UnknownLabel => "UNKNOWN_LABEL",
            ViolationCode::BadTimeRegion => "BAD_TIME_REGION",
            ViolationCode::BadFrameKey => "BAD_FRAME_KEY",
            ViolationCode::MalformedBox => "MALFORMED_BOX",
            ViolationCode::TurnMismatch => "TURN_MISMATCH",
            ViolationCode::NormalWithEntries => "NORMAL_WITH_ENTRIES",
            ViolationCode::EmptyAnomalies => "EMPTY_ANOMALIES",
            ViolationCode::MissingLabel => "MISSING_LABEL",
            ViolationCode::MissingWindow => "MISSING_WINDOW",
            ViolationCode::WindowOutOfRange => "WINDOW_OUT_OF_RANGE",
            ViolationCode::MissingBoxes => "MISSING_BOXES",
            ViolationCode::InvalidBox => "INVALID_BOX",
            ViolationCode::FrameOutOfRange => "FRAME_OUT_OF_RANGE",
            ViolationCode::FrameGap => "FRAME_GAP",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("not valid JSON: {0}")]
    MalformedJson(String),
    #[error("text outside the JSON object")]
    ExtraText,
    #[error("top-level JSON value is not an object")]
    NotAnObject,
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("key {key:?} has the wrong type, expected {expected}")]
    WrongType { key: String, expected: &'static str },
    #[error("status must be \"normal\" or \"abnormal\", got {0:?}")]
    BadStatus(String),
    #[error("unknown anomaly label {0:?}")]
    UnknownLabel(String),
    #[error("unparseable time region {0:?}")]
    BadTimeRegion(String),
    #[error("unparseable BBOX frame key {0:?}")]
    BadFrameKey(String),
    #[error("malformed box array for {0}")]
    MalformedBox(String),
}

impl ParseError {
    pub fn code(&self) -> ViolationCode {
        match self {
            ParseError::MalformedJson(_) => ViolationCode::MalformedJson,
            ParseError::ExtraText => ViolationCode::ExtraText,
            ParseError::NotAnObject => ViolationCode::NotAnObject,
            ParseError::MissingKey(_) => ViolationCode::MissingKey,
            ParseError::WrongType { .. } => ViolationCode::WrongType,
            ParseError::BadStatus(_) => ViolationCode::BadStatus,
            ParseError::UnknownLabel(_) => ViolationCode::UnknownLabel,
            ParseError::BadTimeRegion(_) => ViolationCode::BadTimeRegion,
            ParseError::BadFrameKey(_) => ViolationCode::BadFrameKey,
            ParseError::MalformedBox(_) => ViolationCode::MalformedBox,
        }
    }
}

/// One anomaly item of a turn response.
///
/// Turn-one entries carry `time_region` (sparse basis) and no boxes; turn-two
/// entries carry `boxes` keyed by clip-local frame index and no time region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnomalyEntry {
    pub label: Option<AnomalyType>,
    pub reason: String,
    pub problem_region: String,
    pub time_region: Option<FrameSpan>,
    pub boxes: Option<BTreeMap<usize, Vec<BBox>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResponse {
    pub turn: TurnKind,
    pub status: Status,
    pub cot: String,
    pub entries: Vec<AnomalyEntry>,
    pub raw: String,
}

impl TurnResponse {
    pub fn labels(&self) -> std::collections::BTreeSet<AnomalyType> {
        self.entries.iter().filter_map(|e| e.label).collect()
    }

    pub fn windows(&self) -> Vec<FrameSpan> {
        self.entries.iter().filter_map(|e| e.time_region).collect()
    }

    /// Boxes per clip-local frame, concatenated across entries.
    pub fn merged_boxes(&self) -> BTreeMap<usize, Vec<BBox>> {
        let mut out: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
        for boxes in self.entries.iter().filter_map(|e| e.boxes.as_ref()) {
            for (frame, list) in boxes {
                out.entry(*frame).or_default().extend(list.iter().copied());
            }
        }
        out
    }

    /// Canonical JSON form; reparses to an equal response.
    pub fn to_value(&self) -> Value {
        let mut top = Map::new();
        top.insert(KEY_COT.into(), Value::String(self.cot.clone()));
        top.insert(KEY_STATUS.into(), Value::String(self.status.as_str().into()));
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let mut m = Map::new();
                if self.turn == TurnKind::TurnOne {
                    if let Some(span) = e.time_region {
                        m.insert(KEY_TIME_REGION.into(), Value::String(format_time_region(&span)));
                    }
                }
                if let Some(label) = e.label {
                    m.insert(KEY_LABEL.into(), Value::String(label.name().into()));
                }
                m.insert(KEY_REASON.into(), Value::String(e.reason.clone()));
                m.insert(KEY_REGION.into(), Value::String(e.problem_region.clone()));
                if self.turn == TurnKind::TurnTwo {
                    if let Some(boxes) = &e.boxes {
                        m.insert(KEY_BBOX.into(), boxes_to_value(boxes));
                    }
                }
                Value::Object(m)
            })
            .collect();
        top.insert(KEY_ANOMALIES.into(), Value::Array(entries));
        Value::Object(top)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("serializable")
    }
}

impl Serialize for TurnResponse {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

fn boxes_to_value(boxes: &BTreeMap<usize, Vec<BBox>>) -> Value {
    let mut m = Map::new();
    for (frame, list) in boxes {
        let v = if list.len() == 1 {
            serde_json::to_value(list[0]).expect("box")
        } else {
            serde_json::to_value(list).expect("boxes")
        };
        m.insert(format!("Frame {frame}"), v);
    }
    Value::Object(m)
}

pub fn format_time_region(span: &FrameSpan) -> String {
    if span.start == span.end {
        format!("Frame {}", span.start)
    } else {
        format!("Frame {} - Frame {}", span.start, span.end)
    }
}

static TIME_REGION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)^\s*(?:
            frame\s*(?P<a>\d+)\s*-\s*frame\s*(?P<b>\d+)
          | frame\s*(?P<c>\d+)
          | (?P<d>\d+)\s*-\s*(?P<e>\d+)
          | (?P<f>\d+)
        )\s*$",
    )
    .expect("time region regex")
});

static FRAME_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:frame\s*)?(\d+)\s*$").expect("frame key regex"));

/// Parses `Frame a - Frame b`, `Frame a`, `a-b` or `a` into a sparse-basis span.
/// Out-of-range or inverted spans are errors; nothing is clamped.
pub fn parse_time_region(text: &str, sequence_length: usize) -> Result<FrameSpan, ParseError> {
    let bad = || ParseError::BadTimeRegion(text.to_string());
    let caps = TIME_REGION.captures(text).ok_or_else(bad)?;
    let num = |name: &str| caps.name(name).map(|m| m.as_str().parse::<usize>().map_err(|_| bad()));
    let (start, end) = if let (Some(a), Some(b)) = (num("a"), num("b")) {
        (a?, b?)
    } else if let (Some(d), Some(e)) = (num("d"), num("e")) {
        (d?, e?)
    } else if let Some(c) = num("c").or_else(|| num("f")) {
        let c = c?;
        (c, c)
    } else {
        return Err(bad());
    };
    if start > end || end >= sequence_length {
        return Err(bad());
    }
    Ok(FrameSpan::sparse(start, end))
}

/// Parses one turn's raw text.
pub fn parse_turn(raw: &str, turn: TurnKind, mode: ParseMode) -> Result<TurnResponse, ParseError> {
    let body = match mode {
        ParseMode::Strict => raw.trim(),
        ParseMode::Lenient => json::first_balanced_object(raw)
            .ok_or_else(|| ParseError::MalformedJson("no balanced JSON object found".into()))?,
    };
    let (value, dups) = match json::parse_tracking_duplicates(body) {
        Ok(parsed) => parsed,
        Err(e) => {
            let embedded =
                json::first_balanced_object(body).is_some_and(|inner| json::parse_tracking_duplicates(inner).is_ok());
            return Err(if embedded { ParseError::ExtraText } else { ParseError::MalformedJson(e.to_string()) });
        }
    };
    for key in &dups {
        log::warn!("duplicate key {key:?} in {turn:?} output; keeping the last occurrence");
    }
    let Value::Object(top) = value else {
        return Err(ParseError::NotAnObject);
    };

    let status_text = required_str(&top, KEY_STATUS)?;
    let status = match status_text.trim().to_lowercase().as_str() {
        "normal" => Status::Normal,
        "abnormal" => Status::Abnormal,
        _ => return Err(ParseError::BadStatus(status_text.to_string())),
    };
    let cot = optional_str(&top, KEY_COT)?.unwrap_or_default().to_string();
    let items = match top.get(KEY_ANOMALIES) {
        None => return Err(ParseError::MissingKey(KEY_ANOMALIES.into())),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(wrong_type(KEY_ANOMALIES, "array")),
    };
    let entries = items.iter().map(|item| parse_entry(item, turn)).collect::<Result<Vec<_>, _>>()?;
    Ok(TurnResponse { turn, status, cot, entries, raw: raw.to_string() })
}

fn parse_entry(item: &Value, turn: TurnKind) -> Result<AnomalyEntry, ParseError> {
    let Value::Object(obj) = item else {
        return Err(wrong_type(KEY_ANOMALIES, "array of objects"));
    };
    let label = optional_str(obj, KEY_LABEL)?
        .map(|l| parse_taxonomy_label(l).map_err(|_| ParseError::UnknownLabel(l.to_string())))
        .transpose()?;
    let mut entry = AnomalyEntry {
        label,
        reason: optional_str(obj, KEY_REASON)?.unwrap_or_default().to_string(),
        problem_region: optional_str(obj, KEY_REGION)?.unwrap_or_default().to_string(),
        ..AnomalyEntry::default()
    };
    match turn {
        TurnKind::TurnOne => {
            entry.time_region =
                optional_str(obj, KEY_TIME_REGION)?.map(|t| parse_time_region(t, usize::MAX)).transpose()?;
        }
        TurnKind::TurnTwo => {
            entry.boxes = match obj.get(KEY_BBOX) {
                None | Some(Value::Null) => None,
                Some(Value::Object(map)) => Some(parse_bbox_map(map)?),
                Some(_) => return Err(wrong_type(KEY_BBOX, "object")),
            };
        }
    }
    Ok(entry)
}

fn parse_bbox_map(map: &Map<String, Value>) -> Result<BTreeMap<usize, Vec<BBox>>, ParseError> {
    let mut out = BTreeMap::new();
    for (key, value) in map {
        let frame = FRAME_KEY
            .captures(key)
            .and_then(|c| c[1].parse::<usize>().ok())
            .ok_or_else(|| ParseError::BadFrameKey(key.clone()))?;
        let boxes = parse_box_list(value).ok_or_else(|| ParseError::MalformedBox(key.clone()))?;
        if out.insert(frame, boxes).is_some() {
            log::warn!("BBOX frame {frame} given twice; keeping the last occurrence");
        }
    }
    Ok(out)
}

/// Accepts `[x0, y0, x1, y1]` or `[[x0, y0, x1, y1], ...]` (non-empty).
fn parse_box_list(value: &Value) -> Option<Vec<BBox>> {
    let items = value.as_array()?;
    if items.is_empty() {
        return None;
    }
    if items.iter().all(Value::is_array) {
        return items.iter().map(parse_box).collect();
    }
    parse_box(value).map(|b| vec![b])
}

fn parse_box(value: &Value) -> Option<BBox> {
    let items = value.as_array()?;
    if items.len() != 4 {
        return None;
    }
    let mut coords = [0i64; 4];
    for (slot, item) in coords.iter_mut().zip(items) {
        *slot = match item.as_i64() {
            Some(v) => v,
            None => {
                let f = item.as_f64()?;
                if f.fract() != 0.0 || f.abs() > 1e12 {
                    return None;
                }
                f as i64
            }
        };
    }
    Some(BBox::from_array(coords))
}

fn wrong_type(key: &str, expected: &'static str) -> ParseError {
    ParseError::WrongType { key: key.to_string(), expected }
}

fn required_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, ParseError> {
    optional_str(obj, key)?.ok_or_else(|| ParseError::MissingKey(key.to_string()))
}

fn optional_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>, ParseError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(wrong_type(key, "string")),
    }
}

/// Outcome of the format check for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub reasons: Vec<ViolationCode>,
}

impl ValidityReport {
    pub fn from_codes(mut codes: Vec<ViolationCode>) -> Self {
        let mut seen = std::collections::HashSet::new();
        codes.retain(|c| seen.insert(*c));
        ValidityReport { valid: codes.is_empty(), reasons: codes }
    }

    pub fn from_parse_error(err: &ParseError) -> Self {
        ValidityReport::from_codes(vec![err.code()])
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.reasons.contains(&code)
    }
}

/// Applies the status-conditioned schema to a parsed response.
///
/// `expected_frames` is the length of the frame sequence the judge was shown:
/// for turn one it bounds the predicted windows, for turn two it is the clip
/// length and every clip frame must appear in some entry's `BBOX`. Normal
/// responses ignore it.
pub fn check_validity(resp: &TurnResponse, turn: TurnKind, expected_frames: Option<usize>) -> ValidityReport {
    let mut codes = Vec::new();
    if resp.turn != turn {
        codes.push(ViolationCode::TurnMismatch);
    }
    match resp.status {
        Status::Normal => {
            if !resp.entries.is_empty() {
                codes.push(ViolationCode::NormalWithEntries);
            }
        }
        Status::Abnormal => {
            if resp.entries.is_empty() {
                codes.push(ViolationCode::EmptyAnomalies);
            }
            for entry in &resp.entries {
                if entry.label.is_none() {
                    codes.push(ViolationCode::MissingLabel);
                }
                match turn {
                    TurnKind::TurnOne => match entry.time_region {
                        None => codes.push(ViolationCode::MissingWindow),
                        Some(span) => {
                            if span.basis != SpanBasis::Sparse || !span.is_ordered() {
                                codes.push(ViolationCode::MissingWindow);
                            } else if expected_frames.is_some_and(|n| span.end >= n) {
                                codes.push(ViolationCode::WindowOutOfRange);
                            }
                        }
                    },
                    TurnKind::TurnTwo => match &entry.boxes {
                        None => codes.push(ViolationCode::MissingBoxes),
                        Some(boxes) if boxes.is_empty() => codes.push(ViolationCode::MissingBoxes),
                        Some(boxes) => {
                            if boxes.values().flatten().any(|b| !b.is_valid()) {
                                codes.push(ViolationCode::InvalidBox);
                            }
                            if let Some(n) = expected_frames {
                                if boxes.keys().any(|&f| f >= n) {
                                    codes.push(ViolationCode::FrameOutOfRange);
                                }
                            }
                        }
                    },
                }
            }
            if let (TurnKind::TurnTwo, Some(n)) = (turn, expected_frames) {
                let covered = resp.merged_boxes();
                if !resp.entries.is_empty() && (0..n).any(|f| !covered.contains_key(&f)) {
                    codes.push(ViolationCode::FrameGap);
                }
            }
        }
    }
    ValidityReport::from_codes(codes)
}

/// A parsed (or unparseable) turn together with its validity verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub raw: String,
    pub response: Option<TurnResponse>,
    pub validity: ValidityReport,
}

impl Serialize for TurnOutcome {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("TurnOutcome", 4)?;
        st.serialize_field("raw", &self.raw)?;
        st.serialize_field("parsed", &self.response)?;
        st.serialize_field("valid", &self.validity.valid)?;
        st.serialize_field("reasons", &self.validity.reasons)?;
        st.end()
    }
}

impl TurnOutcome {
    /// Parses and checks one turn.
    pub fn assess(raw: &str, turn: TurnKind, mode: ParseMode, expected_frames: Option<usize>) -> Self {
        match parse_turn(raw, turn, mode) {
            Ok(resp) => {
                let validity = check_validity(&resp, turn, expected_frames);
                TurnOutcome { raw: raw.to_string(), response: Some(resp), validity }
            }
            Err(err) => {
                TurnOutcome { raw: raw.to_string(), response: None, validity: ValidityReport::from_parse_error(&err) }
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validity.valid
    }

    /// The response, only when it parsed and passed validation.
    pub fn valid_response(&self) -> Option<&TurnResponse> {
        self.response.as_ref().filter(|_| self.validity.valid)
    }

    pub fn status(&self) -> Option<Status> {
        self.response.as_ref().map(|r| r.status)
    }
}
