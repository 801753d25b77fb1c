//! Scenario files: world, fleet, mission requests, timed events and every
//! tunable of the stack, with structural validation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manager::{ManagerParams, OperatorCommand};
use crate::mpc::MpcParams;
use crate::planner::PlannerParams;
use crate::sim::{BusConfig, PlantParams, SensingParams, SimParams, TrackerGains};
use crate::world::{distance_to_obstacles, CameraParams, FormationGeometry, TargetRegion, Tower, UavState, Vec3, WireSegment, WorkerScript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMember {
    pub id: u32,
    pub initial: UavState,
    #[serde(default)]
    pub camera: CameraParams,
    /// Nominal idle discharge in watts.
    pub discharge_rate: f64,
}

/// Per-axis kinematic bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_max: Vec3,
    pub a_max: Vec3,
}

impl Limits {
    /// Scalar bounds valid along any direction: the smallest axis component.
    pub fn scalar(&self) -> (f64, f64) {
        (
            self.v_max.x.min(self.v_max.y).min(self.v_max.z),
            self.a_max.x.min(self.a_max.y).min(self.a_max.z),
        )
    }
}

impl Default for Limits {
    fn default() -> Self {
        Limits { v_max: Vec3::new(3.0, 3.0, 3.0), a_max: Vec3::new(2.5, 2.5, 2.5) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: u32,
    pub position: Vec3,
}

/// Mission request issued at start-up; the task manager turns requests into
/// allocatable tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissionRequest {
    Inspect {
        regions: Vec<u32>,
        /// Optional per-region deadlines in seconds after assignment. When
        /// absent the manager derives them from travel-time estimates.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deadlines: Option<Vec<f64>>,
    },
    Safety {
        worker: u32,
        geometry: FormationGeometry,
        uav_count: usize,
        duration: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Multiplies the vehicle's total discharge by `factor` from now on.
    BatteryAnomaly { uav: u32, factor: f64 },
    UavFailure { uav: u32 },
    Operator { command: OperatorCommand },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub time: f64,
    #[serde(flatten)]
    pub event: EventKind,
}

fn default_ts() -> f64 {
    0.1
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub towers: Vec<Tower>,
    #[serde(default)]
    pub wires: Vec<WireSegment>,
    #[serde(default)]
    pub regions: Vec<TargetRegion>,
    #[serde(default)]
    pub workers: Vec<WorkerScript>,
    pub fleet: Vec<FleetMember>,
    #[serde(default)]
    pub limits: Limits,
    pub separation_min: f64,
    #[serde(default = "default_ts")]
    pub ts: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    #[serde(default)]
    pub mission: Vec<MissionRequest>,
    #[serde(default)]
    pub stations: Vec<Station>,
    #[serde(default = "default_margin")]
    pub obstacle_margin: f64,
    #[serde(default)]
    pub planner: PlannerParams,
    #[serde(default)]
    pub mpc: MpcParams,
    #[serde(default)]
    pub manager: ManagerParams,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub tracker: TrackerGains,
    #[serde(default)]
    pub sensing: SensingParams,
    #[serde(default)]
    pub bus: BusConfig,
    #[serde(default)]
    pub sim: SimParams,
}

impl Scenario {
    /// One idle vehicle, no obstacles; a base for tests and fixtures.
    pub fn minimal() -> Scenario {
        Scenario {
            name: "minimal".into(),
            towers: vec![],
            wires: vec![],
            regions: vec![],
            workers: vec![],
            fleet: vec![FleetMember {
                id: 0,
                initial: UavState::at_rest(Vec3::new(0.0, 0.0, 5.0), 10_000.0),
                camera: CameraParams::default(),
                discharge_rate: 10.0,
            }],
            limits: Limits::default(),
            separation_min: 1.0,
            ts: 0.1,
            seed: 0,
            events: vec![],
            mission: vec![],
            stations: vec![],
            obstacle_margin: 1.0,
            planner: PlannerParams::default(),
            mpc: MpcParams::default(),
            manager: ManagerParams::default(),
            plant: PlantParams::default(),
            tracker: TrackerGains::default(),
            sensing: SensingParams::default(),
            bus: BusConfig::default(),
            sim: SimParams::default(),
        }
    }

    pub fn region(&self, id: u32) -> Option<&TargetRegion> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn member(&self, id: u32) -> Option<&FleetMember> {
        self.fleet.iter().find(|m| m.id == id)
    }

    pub fn worker(&self, id: u32) -> Option<&WorkerScript> {
        self.workers.iter().find(|w| w.id == id)
    }

    pub fn station(&self, id: u32) -> Option<&Station> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn distance_to_obstacles(&self, p: Vec3) -> f64 {
        distance_to_obstacles(p, &self.towers, &self.wires)
    }

    /// Controller parameters with the scenario-wide limits filled in.
    pub fn mpc_params(&self) -> MpcParams {
        MpcParams {
            separation_min: self.separation_min,
            obstacle_margin: self.obstacle_margin,
            v_max: self.limits.v_max,
            a_max: self.limits.a_max,
            ..self.mpc.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            context: text.lines().nth(e.line().saturating_sub(1)).unwrap_or("").trim().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }
}

/// One failed invariant: the offending field path and the rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub detail: String,
    /// Source line of the field's top-level key, filled in when loading from text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        write!(f, "{}: {}", self.field, self.rule)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}\n  | {context}")]
    Parse { line: usize, column: usize, context: String, message: String },
    #[error("invalid scenario:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn check(&mut self, ok: bool, field: impl Into<String>, rule: &str, detail: impl FnOnce() -> String) {
        if !ok {
            self.out.push(Violation { field: field.into(), rule: rule.into(), detail: detail(), line: None });
        }
    }
}

fn finite(v: Vec3) -> bool {
    v.is_finite()
}

fn check_geometry(c: &mut Checker, field: &str, g: &FormationGeometry) {
    c.check(g.distance > 0.0, format!("{field}.distance"), "distance > 0", || format!("{}", g.distance));
    c.check(
        g.inter_uav_angle > 0.0 && g.inter_uav_angle < std::f64::consts::PI,
        format!("{field}.inter_uav_angle"),
        "0 < inter_uav_angle < pi",
        || format!("{}", g.inter_uav_angle),
    );
}

/// Lists every broken invariant; empty means the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    c.check(!s.fleet.is_empty(), "fleet", "fleet non-empty", String::new);
    c.check(s.ts > 0.0, "ts", "Ts > 0", || format!("{}", s.ts));
    c.check(s.separation_min > 0.0, "separation_min", "separation_min > 0", || format!("{}", s.separation_min));
    c.check(s.obstacle_margin >= 0.0, "obstacle_margin", "obstacle_margin >= 0", || format!("{}", s.obstacle_margin));
    for j in 0..3 {
        c.check(s.limits.v_max.axis(j) > 0.0, "limits.v_max", "v_max > 0", || format!("{:?}", s.limits.v_max));
        c.check(s.limits.a_max.axis(j) > 0.0, "limits.a_max", "a_max > 0", || format!("{:?}", s.limits.a_max));
    }

    for (i, t) in s.towers.iter().enumerate() {
        let f = format!("towers[{i}]");
        c.check(finite(t.center), format!("{f}.center"), "finite", String::new);
        c.check(t.radius > 0.0, format!("{f}.radius"), "radius > 0", || format!("{}", t.radius));
        c.check(t.height > 0.0, format!("{f}.height"), "height > 0", || format!("{}", t.height));
        c.check(t.insulators.len() <= 12, format!("{f}.insulators"), "at most 12 insulators", || {
            format!("{}", t.insulators.len())
        });
        for (k, p) in t.insulators.iter().enumerate() {
            let rho = (*p - t.center).horizontal_norm();
            let inside = rho <= 1.1 * t.radius && p.z >= t.center.z && p.z <= t.top() + 0.1 * t.height;
            c.check(inside, format!("{f}.insulators[{k}]"), "insulator within 1.1 x radius", || format!("{p:?}"));
        }
    }
    for (i, w) in s.wires.iter().enumerate() {
        let f = format!("wires[{i}]");
        c.check(w.endpoint_a != w.endpoint_b, f.clone(), "endpoints distinct", String::new);
        c.check(w.clearance_radius > 0.0, format!("{f}.clearance_radius"), "clearance_radius > 0", String::new);
    }
    for (i, r) in s.regions.iter().enumerate() {
        let f = format!("regions[{i}]");
        c.check(
            r.half_extents.x > 0.0 && r.half_extents.y > 0.0 && r.half_extents.z > 0.0,
            format!("{f}.half_extents"),
            "half_extents > 0",
            || format!("{:?}", r.half_extents),
        );
        c.check(r.dwell_time >= 0.0, format!("{f}.dwell_time"), "dwell_time >= 0", || format!("{}", r.dwell_time));
        c.check(s.distance_to_obstacles(r.viewpoint) > 0.0, format!("{f}.viewpoint"), "viewpoint outside obstacles", || {
            format!("{:?}", r.viewpoint)
        });
        c.check(
            s.regions.iter().filter(|o| o.id == r.id).count() == 1,
            format!("{f}.id"),
            "unique region id",
            || r.id.to_string(),
        );
    }
    for (i, w) in s.workers.iter().enumerate() {
        let f = format!("workers[{i}]");
        c.check(!w.waypoints.is_empty(), format!("{f}.waypoints"), "waypoints non-empty", String::new);
        c.check(w.waypoints.iter().all(|p| finite(*p)), format!("{f}.waypoints"), "finite", String::new);
        c.check(w.speed >= 0.0, format!("{f}.speed"), "speed >= 0", String::new);
    }

    for (i, m) in s.fleet.iter().enumerate() {
        let f = format!("fleet[{i}]");
        let st = &m.initial;
        c.check(
            finite(st.position) && finite(st.velocity) && finite(st.acceleration),
            format!("{f}.initial"),
            "finite",
            String::new,
        );
        c.check(st.battery_energy >= 0.0, format!("{f}.initial.battery_energy"), "battery_energy >= 0", String::new);
        c.check(st.heading.abs() <= std::f64::consts::PI, format!("{f}.initial.heading"), "|heading| <= pi", String::new);
        c.check(m.discharge_rate > 0.0, format!("{f}.discharge_rate"), "discharge_rate > 0", String::new);
        let fov_ok = |a: f64| a > 0.0 && a < std::f64::consts::PI;
        c.check(
            fov_ok(m.camera.fov_horizontal) && fov_ok(m.camera.fov_vertical),
            format!("{f}.camera"),
            "0 < fov < pi",
            String::new,
        );
        c.check(
            s.fleet.iter().filter(|o| o.id == m.id).count() == 1,
            format!("{f}.id"),
            "unique vehicle id",
            || m.id.to_string(),
        );
    }
    for i in 0..s.fleet.len() {
        for j in (i + 1)..s.fleet.len() {
            let d = s.fleet[i].initial.position.distance(s.fleet[j].initial.position);
            c.check(d >= s.separation_min, format!("fleet[{i}]/fleet[{j}]"), "initial separation", || {
                format!("{d} < {}", s.separation_min)
            });
        }
    }

    for (i, e) in s.events.iter().enumerate() {
        let f = format!("events[{i}]");
        c.check(e.time >= 0.0 && e.time.is_finite(), format!("{f}.time"), "time >= 0", String::new);
        match &e.event {
            EventKind::BatteryAnomaly { uav, factor } => {
                c.check(s.member(*uav).is_some(), format!("{f}.uav"), "known vehicle", || uav.to_string());
                c.check(*factor > 0.0, format!("{f}.factor"), "factor > 0", String::new);
            }
            EventKind::UavFailure { uav } => {
                c.check(s.member(*uav).is_some(), format!("{f}.uav"), "known vehicle", || uav.to_string());
            }
            EventKind::Operator { command } => {
                if let Err(e) = command.validate(s) {
                    c.check(false, format!("{f}.command"), "valid operator command", || e);
                }
            }
        }
    }
    for (i, m) in s.mission.iter().enumerate() {
        let f = format!("mission[{i}]");
        match m {
            MissionRequest::Inspect { regions, deadlines } => {
                c.check(!regions.is_empty(), format!("{f}.regions"), "at least one region", String::new);
                for r in regions {
                    c.check(s.region(*r).is_some(), format!("{f}.regions"), "known region", || r.to_string());
                }
                if let Some(d) = deadlines {
                    c.check(d.len() == regions.len(), format!("{f}.deadlines"), "one deadline per region", String::new);
                }
            }
            MissionRequest::Safety { worker, geometry, uav_count, duration } => {
                c.check(s.worker(*worker).is_some(), format!("{f}.worker"), "known worker", || worker.to_string());
                c.check(*uav_count >= 1, format!("{f}.uav_count"), "uav_count >= 1", String::new);
                c.check(*duration >= 0.0, format!("{f}.duration"), "duration >= 0", String::new);
                check_geometry(&mut c, &format!("{f}.geometry"), geometry);
            }
        }
    }

    let m = &s.mpc;
    c.check(m.shooting_points >= 2, "mpc.shooting_points", "W >= 2", String::new);
    c.check(m.horizon > 0.0, "mpc.horizon", "horizon > 0", String::new);
    c.check(m.d_min < m.d_max, "mpc.d_min", "d_min < d_max", || format!("{} >= {}", m.d_min, m.d_max));
    c.check(m.weights.all_nonnegative(), "mpc.weights", "weights >= 0", String::new);
    c.check(m.tolerance > 0.0, "mpc.tolerance", "tolerance > 0", String::new);
    c.check(m.yaw_rate_max > 0.0, "mpc.yaw_rate_max", "yaw_rate_max > 0", String::new);
    c.check(s.plant.lag > 0.0, "plant.lag", "lag > 0", String::new);
    c.check(s.plant.a_max_clamp > 0.0 && s.plant.yaw_rate_limit > 0.0, "plant", "clamps > 0", String::new);
    c.check(
        s.tracker.kp > 0.0 && s.tracker.kv > 0.0 && s.tracker.k_yaw > 0.0,
        "tracker",
        "gains > 0",
        String::new,
    );
    c.check(
        s.sensing.sigma_pos >= 0.0 && s.sensing.sigma_vel >= 0.0 && s.sensing.sigma_worker >= 0.0,
        "sensing",
        "sigma >= 0",
        String::new,
    );
    for (name, t) in &s.bus.topics {
        let f = format!("bus.topics.{name}");
        c.check(t.rate_hz > 0.0, format!("{f}.rate_hz"), "rate > 0", String::new);
        c.check(t.latency >= 0.0, format!("{f}.latency"), "latency >= 0", String::new);
        c.check((0.0..=1.0).contains(&t.drop_probability), format!("{f}.drop_probability"), "drop in [0, 1]", String::new);
    }
    c.check(s.sim.dt > 0.0, "sim.dt", "dt > 0", String::new);
    c.out
}

/// Best-effort source line of the top-level key a violation refers to.
fn locate(text: &str, field: &str) -> Option<usize> {
    let key = field.split(['.', '[', '/']).next()?;
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario = Scenario::from_json(text)?;
    let mut violations = validate_scenario(&scenario);
    if violations.is_empty() {
        return Ok(scenario);
    }
    for v in &mut violations {
        v.line = locate(text, &v.field);
    }
    Err(ScenarioError::Invalid(violations))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_is_valid() {
        assert!(validate_scenario(&Scenario::minimal()).is_empty());
    }

    #[test]
    fn empty_fleet_is_reported() {
        let mut s = Scenario::minimal();
        s.fleet.clear();
        let v = validate_scenario(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "fleet non-empty");
    }

    #[test]
    fn coincident_vehicles_are_reported() {
        let mut s = Scenario::minimal();
        let mut other = s.fleet[0].clone();
        other.id = 1;
        other.initial.position = Vec3::ZERO;
        s.fleet[0].initial.position = Vec3::ZERO;
        s.fleet.push(other);
        let v = validate_scenario(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "initial separation");
    }

    #[test]
    fn parse_error_has_location() {
        let err = Scenario::from_json("{\n  \"fleet\": [,]\n}").unwrap_err();
        match err {
            ScenarioError::Parse { line, context, .. } => {
                assert_eq!(line, 2);
                assert!(context.contains("fleet"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn violations_carry_line_context() {
        let mut s = Scenario::minimal();
        s.fleet.clear();
        let err = parse_scenario(&s.to_json()).unwrap_err();
        match err {
            ScenarioError::Invalid(v) => assert!(v[0].line.is_some()),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::minimal();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}
