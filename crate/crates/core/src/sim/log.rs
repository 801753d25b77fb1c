//! Mission log: everything a run produced, written as a directory of CSV,
//! JSON-lines and JSON files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bus::BusStats;
use crate::manager::PlannerFailure;
use crate::world::UavState;

pub const TELEMETRY_HEADER: &str = "t,uav,px,py,pz,vx,vy,vz,ax,ay,az,psi,battery,status";
pub const MPC_HEADER: &str =
    "t,uav,status,iterations,qp_iterations,action_cost,perception_cost,equality_residual,inequality_residual,band_lower,band_upper";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyViolation {
    pub kind: String,
    pub time: f64,
    pub uavs: Vec<u32>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MpcMetrics {
    pub solves: u64,
    pub converged: u64,
    pub iteration_limit: u64,
    pub degraded: u64,
    /// Worst independent residuals over converged solves.
    pub max_converged_equality: f64,
    pub max_converged_inequality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedPlan {
    pub plan_id: u32,
    pub start_time: f64,
    pub uavs: Vec<u32>,
    pub regions: Vec<u32>,
    pub planned_robustness: f64,
    /// Robustness of the flown states against the plan's formula; absent
    /// when the run ended before the plan horizon.
    pub executed_robustness: Option<f64>,
    /// Whether a later plan replaced this one before its horizon.
    pub superseded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub duration: f64,
    pub master_steps: u64,
    pub min_pairwise_distance: Option<f64>,
    pub min_pairwise_at: Option<(f64, u32, u32)>,
    pub min_obstacle_clearance: Option<f64>,
    pub min_obstacle_clearance_at: Option<(f64, u32)>,
    /// Share of controller ticks, after the formation transient, with the
    /// worker inside the camera footprint.
    pub fov_fraction: Option<f64>,
    pub fov_samples: u64,
    pub fov_per_uav: BTreeMap<u32, f64>,
    pub max_tracking_error: f64,
    pub mpc: MpcMetrics,
    pub executed_plans: Vec<ExecutedPlan>,
    pub region_completion: BTreeMap<u32, f64>,
    pub safety_task_completion: BTreeMap<u32, f64>,
    pub mission_complete: bool,
    pub mission_complete_time: Option<f64>,
    pub planner_failures: Vec<PlannerFailure>,
    pub safety_violations: Vec<SafetyViolation>,
    pub recharges: u64,
    /// Battery increases outside a recharge; must stay empty.
    pub energy_anomalies: Vec<(f64, u32)>,
}

#[derive(Debug, Clone, Default)]
pub struct MissionLog {
    pub telemetry_csv: String,
    pub commands: Vec<String>,
    pub decisions: Vec<String>,
    pub events: Vec<String>,
    pub mpc_csv: String,
    pub snapshots: Vec<String>,
    pub bus_stats: BTreeMap<String, BusStats>,
    pub metrics: Metrics,
}

fn status_name(s: &UavState) -> &'static str {
    match s.status {
        crate::world::UavStatus::Active => "active",
        crate::world::UavStatus::Failed => "failed",
        crate::world::UavStatus::Landed => "landed",
    }
}

fn join_lines(lines: &[String]) -> String {
    let mut s = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}

impl MissionLog {
    pub fn new() -> Self {
        MissionLog {
            telemetry_csv: format!("{TELEMETRY_HEADER}\n"),
            mpc_csv: format!("{MPC_HEADER}\n"),
            ..MissionLog::default()
        }
    }

    pub fn push_state(&mut self, t: f64, uav: u32, s: &UavState) {
        let (p, v, a) = (s.position, s.velocity, s.acceleration);
        let _ = writeln!(
            self.telemetry_csv,
            "{t},{uav},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.x,
            p.y,
            p.z,
            v.x,
            v.y,
            v.z,
            a.x,
            a.y,
            a.z,
            s.heading,
            s.battery_energy,
            status_name(s)
        );
    }

    pub fn push_event(&mut self, time: f64, kind: &str, detail: serde_json::Value) {
        let line = serde_json::json!({ "time": time, "event": kind, "detail": detail });
        self.events.push(line.to_string());
    }

    /// File name and contents of every log file, in a fixed order.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("telemetry.csv", self.telemetry_csv.clone()),
            ("commands.jsonl", join_lines(&self.commands)),
            ("decisions.jsonl", join_lines(&self.decisions)),
            ("events.jsonl", join_lines(&self.events)),
            ("mpc.csv", self.mpc_csv.clone()),
            ("snapshots.jsonl", join_lines(&self.snapshots)),
            ("bus_stats.json", serde_json::to_string_pretty(&self.bus_stats).expect("stats serialise") + "\n"),
            ("metrics.json", serde_json::to_string_pretty(&self.metrics).expect("metrics serialise") + "\n"),
        ]
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, body) in self.files() {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    /// Number of logged master steps (telemetry rows per vehicle).
    pub fn master_steps(&self) -> u64 {
        self.metrics.master_steps
    }
}
