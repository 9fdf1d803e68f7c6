//! Session events and their canonical JSON wire form.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::command::{Answer, CommandAst, ParseError};
use crate::narrator::{AudioCue, PoseReport, SceneEntity};
use crate::session::Metrics;
use crate::slam::MotionInput;
use crate::world::{Direction, GridIndex, Pose};

/// Significant digits kept for every floating-point number on the wire.
pub const WIRE_SIG_DIGITS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NarrationContext {
    Initial,
    Step,
    Position,
    Surroundings,
    Notice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationPayload {
    pub context: NarrationContext,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<SceneEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_report: Option<PoseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub step: u64,
    /// Plan text form of the primitive: `F1`, `L` or `R`.
    pub primitive: String,
    pub motions: Vec<MotionInput>,
    /// Stereo clearance measured before a forward move.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clearance_m: Option<f64>,
    pub estimated_pose: Pose,
    pub planned_cell: GridIndex,
    pub planned_heading: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequestPayload {
    pub text: String,
    /// Robot-relative direction offered: `right`, `left` or `back`.
    pub proposed: String,
    pub blocked_cell: GridIndex,
    /// True when the question is asked again after an unusable answer.
    pub repeated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceResolvedPayload {
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_move: Option<Direction>,
    pub plan: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationPayload {
    pub observed: Pose,
    pub planned: Pose,
    pub position_error_m: f64,
    pub heading_error_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    /// Stereo clearance below the threshold.
    Clearance,
    /// The target cell is a wall on the recovered map.
    WallOnMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyHaltPayload {
    pub reason: HaltReason,
    pub clearance_m: f64,
    pub threshold_m: f64,
    pub target_cell: GridIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPayload {
    pub utterance: String,
    pub canonical: String,
    pub commands: Vec<CommandAst>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyUtterance,
    ParseError,
    LimitExceeded,
    PlanTooLong,
    NotAnAnswer,
    DirectionBlocked,
    NoRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedPayload {
    pub utterance: String,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ParseError>,
    /// Spoken-form explanation.
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedPayload {
    pub steps: u64,
    pub forward_cells: u64,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Narration(NarrationPayload),
    Cue(AudioCue),
    Step(StepPayload),
    GuidanceRequest(GuidanceRequestPayload),
    GuidanceResolved(GuidanceResolvedPayload),
    Deviation(DeviationPayload),
    SafetyHalt(SafetyHaltPayload),
    Parsed(ParsedPayload),
    Rejected(RejectedPayload),
    Completed(CompletedPayload),
    MetricsSnapshot(Metrics),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Narration(_) => "narration",
            EventBody::Cue(_) => "cue",
            EventBody::Step(_) => "step",
            EventBody::GuidanceRequest(_) => "guidance_request",
            EventBody::GuidanceResolved(_) => "guidance_resolved",
            EventBody::Deviation(_) => "deviation",
            EventBody::SafetyHalt(_) => "safety_halt",
            EventBody::Parsed(_) => "parsed",
            EventBody::Rejected(_) => "rejected",
            EventBody::Completed(_) => "completed",
            EventBody::MetricsSnapshot(_) => "metrics_snapshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEvent {
    pub seq: u64,
    /// Simulated time in seconds.
    pub t: f64,
    pub body: EventBody,
}

impl SessionEvent {
    /// `{"seq", "t", "kind", "payload"}` with canonical numbers.
    pub fn to_wire(&self) -> Value {
        let body = serde_json::to_value(&self.body).expect("event bodies serialize");
        let Value::Object(mut tagged) = body else {
            unreachable!("adjacently tagged enums serialize to objects")
        };
        let mut out = Map::new();
        out.insert("seq".into(), Value::from(self.seq));
        out.insert("t".into(), Value::from(self.t));
        out.insert("kind".into(), tagged.remove("kind").unwrap_or(Value::Null));
        out.insert("payload".into(), tagged.remove("payload").unwrap_or(Value::Object(Map::new())));
        canonicalize(Value::Object(out))
    }

    /// One log line, no trailing newline.
    pub fn to_line(&self) -> String {
        self.to_wire().to_string()
    }

    pub fn from_wire(v: &Value) -> Result<Self, String> {
        let seq = v.get("seq").and_then(Value::as_u64).ok_or("missing seq")?;
        let t = v.get("t").and_then(Value::as_f64).ok_or("missing t")?;
        let mut tagged = Map::new();
        tagged.insert("kind".into(), v.get("kind").cloned().ok_or("missing kind")?);
        tagged.insert("payload".into(), v.get("payload").cloned().ok_or("missing payload")?);
        let body = serde_json::from_value(Value::Object(tagged)).map_err(|e| e.to_string())?;
        Ok(Self { seq, t, body })
    }
}

/// Rounds a float to [`WIRE_SIG_DIGITS`] significant digits; -0 becomes 0.
pub fn canonical_f64(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    let s = format!("{:.*e}", WIRE_SIG_DIGITS - 1, x);
    let r: f64 = s.parse().expect("formatted float parses");
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Applies [`canonical_f64`] to every non-integer number in a JSON tree.
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = canonical_f64(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

/// Serializes any value with canonical numbers.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    canonicalize(serde_json::to_value(value).expect("value serializes")).to_string()
}
