//! Operator gateway wire protocol: JSON messages with a `type` field and a
//! per-direction sequence number.
//!
//! Client to server: `command`. Server to client: `snapshot` and `ack`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::manager::OperatorCommand;
use crate::mpc::SlotPose;
use crate::scenario::Scenario;
use crate::world::{FormationGeometry, TargetRegion, Tower, UavStatus, Vec3, WireSegment, WorkerState};

/// Reason attached to rejected payloads that do not parse.
pub const SCHEMA_VIOLATION: &str = "schema violation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionCommand {
    Pause,
    Resume,
    SetSpeed { speed: f64 },
}

/// Anything an operator can send: mission commands go to the manager queue,
/// session commands only affect pacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConsoleCommand {
    Mission(OperatorCommand),
    Session(SessionCommand),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Command { seq: u64, command: ConsoleCommand },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot {
        seq: u64,
        snapshot: Box<Snapshot>,
    },
    Ack {
        seq: u64,
        command_seq: Option<u64>,
        status: AckStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

/// Static scene description, sent with a client's first snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub towers: Vec<Tower>,
    pub wires: Vec<WireSegment>,
    pub regions: Vec<TargetRegion>,
    pub separation_min: f64,
}

impl Scene {
    pub fn from_scenario(s: &Scenario) -> Self {
        Scene { towers: s.towers.clone(), wires: s.wires.clone(), regions: s.regions.clone(), separation_min: s.separation_min }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub id: u32,
    pub position: Vec3,
    pub velocity: Vec3,
    pub heading: f64,
    pub battery_fraction: f64,
    pub status: UavStatus,
    pub task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSnapshot {
    pub task: u32,
    pub worker: u32,
    pub geometry: FormationGeometry,
    pub slots: Vec<SlotPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub assignments: BTreeMap<u32, Vec<String>>,
    pub pending: Vec<String>,
    pub completed_regions: Vec<u32>,
    pub mission_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub time: f64,
    pub branch: String,
    pub reason: String,
}

/// Self-contained public mission state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub vehicles: Vec<VehicleSnapshot>,
    pub workers: Vec<WorkerState>,
    pub formations: Vec<FormationSnapshot>,
    pub plan: PlanSummary,
    pub decisions: Vec<DecisionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
}

/// Parses and checks one client text frame. Returns the ack to send and the
/// accepted command, if any.
pub fn handle_client_text(text: &str, ack_seq: u64, scenario: &Scenario) -> (ServerMessage, Option<ConsoleCommand>) {
    let reject = |command_seq, reason: String| ServerMessage::Ack {
        seq: ack_seq,
        command_seq,
        status: AckStatus::Rejected,
        reason: Some(reason),
    };
    let msg: ClientMessage = match serde_json::from_str(text) {
        Ok(m) => m,
        Err(_) => {
            // echo the sequence number when it is recoverable
            let seq = serde_json::from_str::<serde_json::Value>(text).ok().and_then(|v| v.get("seq")?.as_u64());
            return (reject(seq, SCHEMA_VIOLATION.into()), None);
        }
    };
    let ClientMessage::Command { seq, command } = msg;
    let check = match &command {
        ConsoleCommand::Mission(c) => c.validate(scenario),
        ConsoleCommand::Session(SessionCommand::SetSpeed { speed }) if !(*speed > 0.0 && speed.is_finite()) => {
            Err("speed must be positive".into())
        }
        ConsoleCommand::Session(_) => Ok(()),
    };
    match check {
        Ok(()) => (ServerMessage::Ack { seq: ack_seq, command_seq: Some(seq), status: AckStatus::Accepted, reason: None }, Some(command)),
        Err(e) => (reject(Some(seq), e), None),
    }
}
