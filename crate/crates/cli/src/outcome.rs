//! Exit status and the machine-readable reason printed at the end of a run.

use std::path::PathBuf;

use lineguard_core::sim::{Metrics, SimError};
use lineguard_core::ScenarioError;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Success,
    MissionFailure,
    ConfigurationError,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::MissionFailure => 1,
            ExitStatus::ConfigurationError => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub status: ExitStatus,
    pub exit_code: i32,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Outcome {
    fn new(status: ExitStatus, reason: &str, detail: Option<Value>) -> Self {
        Outcome { status, exit_code: status.code(), reason: reason.into(), detail, out: None }
    }
}

/// Success iff the mission completed without a recorded safety violation.
/// Failures name the planner failure first, since it explains the rest.
pub fn judge(m: &Metrics) -> Outcome {
    if m.mission_complete && m.safety_violations.is_empty() {
        return Outcome::new(ExitStatus::Success, "mission-complete", Some(json!({ "time": m.mission_complete_time })));
    }
    if let Some(f) = m.planner_failures.first() {
        let detail = json!({
            "node": f.node,
            "label": f.label,
            "uavs": f.uavs,
            "regions": f.regions,
            "robustness": f.robustness,
        });
        return Outcome::new(ExitStatus::MissionFailure, "planner-failure", Some(detail));
    }
    if !m.safety_violations.is_empty() {
        let detail = serde_json::to_value(&m.safety_violations).expect("violations serialise");
        return Outcome::new(ExitStatus::MissionFailure, "safety-violation", Some(detail));
    }
    let pending: Vec<&u32> = m.region_completion.keys().collect();
    Outcome::new(ExitStatus::MissionFailure, "mission-incomplete", Some(json!({ "completed_regions": pending })))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot bind gateway port {port}: {source}")]
    PortBusy { port: u16, source: std::io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn outcome(&self) -> Outcome {
        let reason = match self {
            CliError::Scenario(ScenarioError::Io(_)) => "scenario-unreadable",
            CliError::Scenario(ScenarioError::Parse { .. }) => "scenario-parse-error",
            CliError::Scenario(ScenarioError::Invalid(_)) => "scenario-invalid",
            CliError::Config(_) => "invalid-config",
            CliError::Sim(_) => "engine-startup",
            CliError::PortBusy { .. } => "port-busy",
            CliError::Io(_) => "io-error",
        };
        let detail = match self {
            CliError::Scenario(ScenarioError::Invalid(v)) => serde_json::to_value(v).ok(),
            other => Some(Value::String(other.to_string())),
        };
        Outcome::new(ExitStatus::ConfigurationError, reason, detail)
    }
}
