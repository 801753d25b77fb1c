//! Cognitive task manager: allocation under battery and capability limits,
//! plan monitoring, online re-planning and emergency landing.
//!
//! Each tick runs a fixed-priority selector (see [`bt`]) with the branches
//! emergency, replan, dispatch and operator; exactly one fires.

pub mod bt;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::formation_slots;
use crate::planner::{plan_inspection, HeadingSchedule, InspectionTask, PlanError, RegionVisit, StartState, Trajectory};
use crate::scenario::{MissionRequest, Scenario};
use crate::world::{FormationGeometry, UavState, UavStatus, Vec3, WireSegment, WorkerState, CAP_INSPECTION, CAP_SAFETY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerParams {
    /// Endurance below which a vehicle is sent to land.
    pub critical_endurance: f64,
    /// Fractional reserve required on top of the estimated task time.
    pub reserve_margin: f64,
    /// Largest task and vehicle count solved by exhaustive enumeration.
    pub exhaustive_limit: usize,
    /// Multiplier on straight-line travel time when deriving deadlines.
    pub deadline_slack: f64,
    /// Extra seconds granted per visited region when deriving deadlines.
    pub deadline_pad: f64,
    /// Idle vehicles below this endurance go to a recharging station.
    pub recharge_endurance: f64,
}

impl Default for ManagerParams {
    fn default() -> Self {
        ManagerParams {
            critical_endurance: 60.0,
            reserve_margin: 0.2,
            exhaustive_limit: 6,
            deadline_slack: 1.4,
            deadline_pad: 2.0,
            recharge_endurance: 120.0,
        }
    }
}

/// Operator requests, queued and applied at a manager tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    AssignInspection {
        regions: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deadlines: Option<Vec<f64>>,
    },
    AssignSafety {
        worker: u32,
        geometry: FormationGeometry,
        uav_count: usize,
        duration: f64,
    },
    /// Partial update of a safety formation; absent fields keep their value.
    SetFormation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        worker: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        distance: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        azimuth_center: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        elevation: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inter_uav_angle: Option<f64>,
    },
    InjectFailure {
        uav: u32,
    },
}

impl OperatorCommand {
    /// Checks the command against the scenario; the error is a human-readable reason.
    pub fn validate(&self, scenario: &Scenario) -> Result<(), String> {
        match self {
            OperatorCommand::AssignInspection { regions, deadlines } => {
                if regions.is_empty() {
                    return Err("assign_inspection needs at least one region".into());
                }
                if let Some(r) = regions.iter().find(|r| scenario.region(**r).is_none()) {
                    return Err(format!("unknown region {r}"));
                }
                if deadlines.as_ref().is_some_and(|d| d.len() != regions.len() || d.iter().any(|x| !(*x > 0.0))) {
                    return Err("deadlines must be positive, one per region".into());
                }
                Ok(())
            }
            OperatorCommand::AssignSafety { worker, geometry, uav_count, duration } => {
                if scenario.worker(*worker).is_none() {
                    return Err(format!("unknown worker {worker}"));
                }
                if *uav_count == 0 || !(*duration >= 0.0) {
                    return Err("uav_count must be >= 1 and duration >= 0".into());
                }
                check_geometry(geometry)
            }
            OperatorCommand::SetFormation { worker, distance, azimuth_center, elevation, inter_uav_angle } => {
                if distance.is_none() && azimuth_center.is_none() && elevation.is_none() && inter_uav_angle.is_none() {
                    return Err("set_formation needs at least one field".into());
                }
                if let Some(w) = worker {
                    if scenario.worker(*w).is_none() {
                        return Err(format!("unknown worker {w}"));
                    }
                }
                if distance.is_some_and(|d| !(d > 0.0 && d.is_finite())) {
                    return Err("distance must be positive".into());
                }
                if inter_uav_angle.is_some_and(|a| !(a > 0.0 && a < std::f64::consts::PI)) {
                    return Err("inter_uav_angle must lie in (0, pi)".into());
                }
                if [azimuth_center, elevation].iter().any(|v| v.is_some_and(|x| !x.is_finite())) {
                    return Err("angles must be finite".into());
                }
                Ok(())
            }
            OperatorCommand::InjectFailure { uav } => {
                if scenario.member(*uav).is_none() {
                    return Err(format!("unknown vehicle {uav}"));
                }
                Ok(())
            }
        }
    }
}

fn check_geometry(g: &FormationGeometry) -> Result<(), String> {
    if !(g.distance > 0.0) {
        return Err("distance must be positive".into());
    }
    if !(g.inter_uav_angle > 0.0 && g.inter_uav_angle < std::f64::consts::PI) {
        return Err("inter_uav_angle must lie in (0, pi)".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Inspect { regions: Vec<u32>, deadlines: Vec<f64> },
    Safety { task: u32, worker: u32, geometry: FormationGeometry, slot: usize, slots: usize },
    Idle,
    Recharge { station: u32 },
    Land,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub required: BTreeSet<String>,
    /// Seconds of work at the task location (dwell or formation time).
    pub duration: f64,
    /// Where the task starts and ends, for travel estimates.
    pub start: Vec3,
    pub end: Vec3,
}

impl Task {
    pub fn label(&self) -> String {
        match &self.kind {
            TaskKind::Inspect { regions, .. } => {
                format!("inspect[{}]", regions.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","))
            }
            TaskKind::Safety { task, slot, .. } => format!("safety{task}/slot{slot}"),
            TaskKind::Idle => "idle".into(),
            TaskKind::Recharge { station } => format!("recharge{station}"),
            TaskKind::Land => "land".into(),
        }
    }
}

/// UAV id → ordered task list, with endurance margins at creation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub assignment: BTreeMap<u32, Vec<Task>>,
    pub created: f64,
    pub margins: BTreeMap<u32, f64>,
    pub pending: Vec<Task>,
    pub total_travel: f64,
}

/// A vehicle as seen by the allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleView {
    pub id: u32,
    pub state: UavState,
    pub endurance: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("no active vehicles")]
    NoActiveVehicles,
}

/// Battery energy over discharge power, in seconds.
pub fn estimate_endurance(state: &UavState, discharge_rate: f64) -> f64 {
    state.battery_energy / discharge_rate
}

/// Time-optimal rest-to-rest time over distance `d` under speed and
/// acceleration bounds: triangular profile if `v_max` is never reached,
/// trapezoidal otherwise.
pub fn travel_time_distance(d: f64, v_max: f64, a_max: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    if d <= v_max * v_max / a_max {
        2.0 * (d / a_max).sqrt()
    } else {
        d / v_max + v_max / a_max
    }
}

pub fn travel_time(from: Vec3, to: Vec3, v_max: f64, a_max: f64) -> f64 {
    travel_time_distance(from.distance(to), v_max, a_max)
}

fn route_cost(start: Vec3, tasks: &[&Task], v: f64, a: f64) -> (f64, f64) {
    let mut here = start;
    let mut travel = 0.0;
    let mut work = 0.0;
    for t in tasks {
        travel += travel_time(here, t.start, v, a);
        work += t.duration;
        here = t.end;
    }
    (travel, work)
}

/// Best visiting order for a subset of tasks (bitmask over `tasks`), by
/// dynamic programming over (subset, last task).
fn best_orders(start: Vec3, tasks: &[Task], v: f64, a: f64) -> Vec<(f64, Vec<usize>)> {
    let n = tasks.len();
    let full = 1usize << n;
    let mut dp = vec![vec![f64::INFINITY; n]; full];
    let mut parent = vec![vec![usize::MAX; n]; full];
    for i in 0..n {
        dp[1 << i][i] = travel_time(start, tasks[i].start, v, a);
    }
    for mask in 1..full {
        for last in 0..n {
            if mask & (1 << last) == 0 || !dp[mask][last].is_finite() {
                continue;
            }
            for nxt in 0..n {
                if mask & (1 << nxt) != 0 {
                    continue;
                }
                let c = dp[mask][last] + travel_time(tasks[last].end, tasks[nxt].start, v, a);
                let m2 = mask | (1 << nxt);
                if c < dp[m2][nxt] {
                    dp[m2][nxt] = c;
                    parent[m2][nxt] = last;
                }
            }
        }
    }
    let mut out = vec![(0.0, Vec::new()); full];
    for (mask, slot) in out.iter_mut().enumerate().skip(1) {
        let mut best = (f64::INFINITY, usize::MAX);
        for last in 0..n {
            if dp[mask][last] < best.0 {
                best = (dp[mask][last], last);
            }
        }
        let mut order = Vec::new();
        let (mut m, mut cur) = (mask, best.1);
        while cur != usize::MAX {
            order.push(cur);
            let p = parent[m][cur];
            m &= !(1 << cur);
            cur = p;
        }
        order.reverse();
        *slot = (best.0, order);
    }
    out
}

fn capable(v: &VehicleView, t: &Task) -> bool {
    t.required.is_subset(&v.state.capabilities)
}

/// Formation slots occupy a vehicle for their whole duration, so a route
/// holding one holds nothing else.
fn exclusive(t: &Task) -> bool {
    matches!(t.kind, TaskKind::Safety { .. })
}

/// Assigns tasks to vehicles: maximises the number of assigned tasks, then
/// minimises total travel time; ties go to the lowest vehicle id. Each
/// vehicle's route must fit in its endurance with the reserve margin.
pub fn allocate(tasks: &[Task], fleet: &[VehicleView], scenario: &Scenario, time: f64) -> Result<Plan, AllocError> {
    let mut vehicles: Vec<&VehicleView> = fleet.iter().filter(|v| v.state.is_active()).collect();
    vehicles.sort_by_key(|v| v.id);
    if vehicles.is_empty() {
        return Err(AllocError::NoActiveVehicles);
    }
    let (vmax, amax) = scenario.limits.scalar();
    let reserve = 1.0 + scenario.manager.reserve_margin;
    let limit = scenario.manager.exhaustive_limit;
    let routes: Vec<Vec<usize>> = if tasks.len() <= limit && vehicles.len() <= limit {
        exhaustive(tasks, &vehicles, vmax, amax, reserve)
    } else {
        greedy(tasks, &vehicles, vmax, amax, reserve)
    };
    let mut plan = Plan { created: time, ..Plan::default() };
    let mut assigned = vec![false; tasks.len()];
    for (v, route) in vehicles.iter().zip(&routes) {
        if route.is_empty() {
            continue;
        }
        let list: Vec<&Task> = route.iter().map(|&i| &tasks[i]).collect();
        let (travel, work) = route_cost(v.state.position, &list, vmax, amax);
        plan.total_travel += travel;
        plan.margins.insert(v.id, v.endurance - reserve * (travel + work));
        plan.assignment.insert(v.id, route.iter().map(|&i| tasks[i].clone()).collect());
        for &i in route {
            assigned[i] = true;
        }
    }
    plan.pending = tasks.iter().zip(&assigned).filter(|(_, a)| !**a).map(|(t, _)| t.clone()).collect();
    Ok(plan)
}

/// Per vehicle and task subset: best travel time and visiting order, if feasible.
type RouteTable = Vec<Vec<Option<(f64, Vec<usize>)>>>;

fn exhaustive(tasks: &[Task], vehicles: &[&VehicleView], v: f64, a: f64, reserve: f64) -> Vec<Vec<usize>> {
    let n = tasks.len();
    let m = vehicles.len();
    let table: RouteTable = vehicles
        .iter()
        .map(|veh| {
            best_orders(veh.state.position, tasks, v, a)
                .into_iter()
                .enumerate()
                .map(|(mask, (travel, order))| {
                    let members = || (0..n).filter(|i| mask & (1 << i) != 0);
                    let ok = members().all(|i| capable(veh, &tasks[i]))
                        && (mask.count_ones() <= 1 || !members().any(|i| exclusive(&tasks[i])));
                    let work: f64 = order.iter().map(|&i| tasks[i].duration).sum();
                    (ok && (mask == 0 || veh.endurance >= reserve * (travel + work))).then_some((travel, order))
                })
                .collect()
        })
        .collect();

    let mut choice = vec![0usize; n]; // value m means unassigned
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    let mut masks = vec![0usize; m];
    fn rec(
        i: usize,
        n: usize,
        m: usize,
        choice: &mut Vec<usize>,
        masks: &mut Vec<usize>,
        table: &RouteTable,
        best: &mut Option<(usize, f64, Vec<usize>)>,
    ) {
        if i == n {
            let mut travel = 0.0;
            for (k, &mask) in masks.iter().enumerate() {
                match &table[k][mask] {
                    Some((t, _)) => travel += t,
                    None => return,
                }
            }
            let count = choice.iter().filter(|&&c| c < m).count();
            let better = match best {
                None => true,
                Some((bc, bt, _)) => count > *bc || (count == *bc && travel < *bt - 1e-9),
            };
            if better {
                *best = Some((count, travel, choice.clone()));
            }
            return;
        }
        for k in 0..=m {
            if k < m {
                let mask = masks[k] | (1 << i);
                if table[k][mask].is_none() {
                    continue;
                }
                masks[k] = mask;
                choice[i] = k;
                rec(i + 1, n, m, choice, masks, table, best);
                masks[k] &= !(1 << i);
            } else {
                choice[i] = m;
                rec(i + 1, n, m, choice, masks, table, best);
            }
        }
    }
    rec(0, n, m, &mut choice, &mut masks, &table, &mut best);
    let mut routes = vec![Vec::new(); m];
    if let Some((_, _, ch)) = best {
        for k in 0..m {
            let mask = ch.iter().enumerate().filter(|(_, &c)| c == k).fold(0, |acc, (i, _)| acc | (1 << i));
            if mask != 0 {
                routes[k] = table[k][mask].as_ref().map(|(_, o)| o.clone()).unwrap_or_default();
            }
        }
    }
    routes
}

fn greedy(tasks: &[Task], vehicles: &[&VehicleView], v: f64, a: f64, reserve: f64) -> Vec<Vec<usize>> {
    let m = vehicles.len();
    let mut routes: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut used = vec![0.0f64; m]; // travel + work so far
    let mut ends: Vec<Vec3> = vehicles.iter().map(|v| v.state.position).collect();
    let mut open: BTreeSet<usize> = (0..tasks.len()).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for k in 0..m {
            for &i in &open {
                let t = &tasks[i];
                if !capable(vehicles[k], t) {
                    continue;
                }
                if !routes[k].is_empty() && (exclusive(t) || routes[k].iter().any(|&j| exclusive(&tasks[j]))) {
                    continue;
                }
                let inc = travel_time(ends[k], t.start, v, a);
                if vehicles[k].endurance < reserve * (used[k] + inc + t.duration) {
                    continue;
                }
                if best.is_none_or(|(c, _, _)| inc < c) {
                    best = Some((inc, k, i));
                }
            }
        }
        let Some((inc, k, i)) = best else { break };
        routes[k].push(i);
        used[k] += inc + tasks[i].duration;
        ends[k] = tasks[i].end;
        open.remove(&i);
    }
    routes
}

/// Commands sent to vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    FollowTrajectory {
        plan_id: u32,
        start_time: f64,
        trajectory: Trajectory,
        headings: HeadingSchedule,
        regions: Vec<u32>,
    },
    Formation {
        task: u32,
        worker: u32,
        geometry: FormationGeometry,
        slot: usize,
        slots: usize,
    },
    Hover,
    Recharge {
        station: u32,
        position: Vec3,
    },
    Land,
}

impl Command {
    /// Compact description for logs (trajectories elided).
    pub fn summary(&self) -> serde_json::Value {
        match self {
            Command::FollowTrajectory { plan_id, start_time, trajectory, regions, .. } => serde_json::json!({
                "kind": "follow_trajectory", "plan_id": plan_id, "start_time": start_time,
                "duration": trajectory.duration(), "regions": regions,
            }),
            other => serde_json::to_value(other).expect("command serialises"),
        }
    }
}

/// Vehicle report consumed by the manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub uav: u32,
    pub time: f64,
    pub state: UavState,
    /// Fraction of the current trajectory or formation time elapsed.
    pub progress: f64,
    /// Regions whose dwell this vehicle has completed.
    pub completed_regions: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Pending,
    Assigned(u32),
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum UnitKind {
    Region { region: u32, deadline: Option<f64> },
    Slot { task: u32, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Unit {
    id: usize,
    kind: UnitKind,
    status: UnitStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SafetyTask {
    id: u32,
    worker: u32,
    geometry: FormationGeometry,
    uav_count: usize,
    duration: f64,
    started: Option<f64>,
    done: bool,
    completed_at: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct VehicleRecord {
    telemetry: Option<Telemetry>,
    last_sample: Option<(f64, f64)>,
    rate: Option<f64>,
    endurance: f64,
    landing: bool,
    /// Assigned unit ids in execution order.
    route: Vec<usize>,
    /// Whether the vehicle is executing something other than hovering.
    busy: bool,
    recharging: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub uav: u32,
    pub command: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerFailure {
    pub uavs: Vec<u32>,
    pub regions: Vec<u32>,
    pub node: Option<usize>,
    pub label: String,
    pub robustness: Option<f64>,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time: f64,
    pub branch: String,
    pub reason: String,
    pub commands: Vec<CommandRecord>,
    pub assignments: BTreeMap<u32, Vec<String>>,
    pub pending: Vec<String>,
    pub endurance: BTreeMap<u32, f64>,
    pub margins: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner_failure: Option<PlannerFailure>,
    #[serde(default)]
    pub mission_complete: bool,
}

/// Executed inspection plan, kept for post-run robustness evaluation.
#[derive(Debug, Clone)]
pub struct IssuedPlan {
    pub id: u32,
    pub start_time: f64,
    pub task: InspectionTask,
    pub robustness: f64,
}

#[derive(Debug, Default)]
pub struct TickInput {
    pub time: f64,
    pub telemetry: Vec<Telemetry>,
    pub workers: Vec<WorkerState>,
    pub operator: Vec<OperatorCommand>,
}

pub struct TickOutput {
    pub commands: BTreeMap<u32, Vec<Command>>,
    pub decision: Decision,
}

pub struct TaskManager {
    scenario: Scenario,
    units: Vec<Unit>,
    safety: BTreeMap<u32, SafetyTask>,
    vehicles: BTreeMap<u32, VehicleRecord>,
    workers: BTreeMap<u32, WorkerState>,
    queue: VecDeque<OperatorCommand>,
    needs_replan: Option<String>,
    plan: Plan,
    plans: Vec<IssuedPlan>,
    planner_failures: Vec<PlannerFailure>,
    next_plan_id: u32,
    mission_complete_at: Option<f64>,
}

impl TaskManager {
    pub fn new(scenario: &Scenario) -> Self {
        let mut m = TaskManager {
            scenario: scenario.clone(),
            units: Vec::new(),
            safety: BTreeMap::new(),
            vehicles: scenario.fleet.iter().map(|f| (f.id, VehicleRecord::default())).collect(),
            workers: BTreeMap::new(),
            queue: VecDeque::new(),
            needs_replan: None,
            plan: Plan::default(),
            plans: Vec::new(),
            planner_failures: Vec::new(),
            next_plan_id: 0,
            mission_complete_at: None,
        };
        for req in &scenario.mission {
            match req {
                MissionRequest::Inspect { regions, deadlines } => m.add_regions(regions, deadlines.as_deref()),
                MissionRequest::Safety { worker, geometry, uav_count, duration } => {
                    m.add_safety(*worker, *geometry, *uav_count, *duration)
                }
            }
        }
        if m.units.is_empty() {
            // nothing to do: complete from the start until tasks are assigned
            m.mission_complete_at = Some(0.0);
        } else {
            m.needs_replan = Some("initial allocation".into());
        }
        m
    }

    fn add_regions(&mut self, regions: &[u32], deadlines: Option<&[f64]>) {
        self.mission_complete_at = None;
        for (k, r) in regions.iter().enumerate() {
            let id = self.units.len();
            let deadline = deadlines.and_then(|d| d.get(k).copied());
            self.units.push(Unit { id, kind: UnitKind::Region { region: *r, deadline }, status: UnitStatus::Pending });
        }
    }

    fn add_safety(&mut self, worker: u32, geometry: FormationGeometry, uav_count: usize, duration: f64) {
        self.mission_complete_at = None;
        let id = self.safety.len() as u32;
        self.safety.insert(id, SafetyTask { id, worker, geometry, uav_count, duration, started: None, done: false, completed_at: None });
        for slot in 0..uav_count {
            let uid = self.units.len();
            self.units.push(Unit { id: uid, kind: UnitKind::Slot { task: id, slot }, status: UnitStatus::Pending });
        }
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn issued_plans(&self) -> &[IssuedPlan] {
        &self.plans
    }

    pub fn planner_failures(&self) -> &[PlannerFailure] {
        &self.planner_failures
    }

    pub fn mission_complete_at(&self) -> Option<f64> {
        self.mission_complete_at
    }

    /// Completion time of every finished safety task.
    pub fn safety_completion(&self) -> BTreeMap<u32, f64> {
        self.safety.values().filter_map(|s| s.completed_at.map(|t| (s.id, t))).collect()
    }

    pub fn endurance(&self, uav: u32) -> Option<f64> {
        self.vehicles.get(&uav).filter(|v| v.telemetry.is_some()).map(|v| v.endurance)
    }

    /// Current formation geometry and slot count of every safety task.
    pub fn formations(&self) -> Vec<(u32, u32, FormationGeometry, usize)> {
        self.safety.values().filter(|s| !s.done).map(|s| (s.id, s.worker, s.geometry, s.uav_count)).collect()
    }

    /// Region completion times are reported by the vehicles.
    pub fn completed_regions(&self) -> BTreeSet<u32> {
        self.units
            .iter()
            .filter(|u| u.status == UnitStatus::Done)
            .filter_map(|u| match u.kind {
                UnitKind::Region { region, .. } => Some(region),
                _ => None,
            })
            .collect()
    }

    fn unit_task(&self, u: &Unit) -> Task {
        match &u.kind {
            UnitKind::Region { region, deadline } => {
                let r = self.scenario.region(*region).expect("validated region");
                Task {
                    kind: TaskKind::Inspect { regions: vec![*region], deadlines: deadline.iter().copied().collect() },
                    required: [CAP_INSPECTION.to_string()].into(),
                    duration: r.dwell_time,
                    start: r.viewpoint,
                    end: r.viewpoint,
                }
            }
            UnitKind::Slot { task, slot } => {
                let s = &self.safety[task];
                let worker = self.worker_estimate(s.worker);
                let pose = formation_slots(&worker, &s.geometry, s.uav_count)[*slot];
                let remaining = match s.started {
                    Some(t0) => (t0 + s.duration - self.now()).max(0.0),
                    None => s.duration,
                };
                Task {
                    kind: TaskKind::Safety { task: *task, worker: s.worker, geometry: s.geometry, slot: *slot, slots: s.uav_count },
                    required: [CAP_SAFETY.to_string()].into(),
                    duration: remaining,
                    start: pose.position,
                    end: pose.position,
                }
            }
        }
    }

    fn now(&self) -> f64 {
        self.vehicles.values().filter_map(|v| v.telemetry.as_ref().map(|t| t.time)).fold(0.0, f64::max)
    }

    fn worker_estimate(&self, id: u32) -> WorkerState {
        self.workers.get(&id).copied().unwrap_or_else(|| {
            self.scenario.worker(id).map(|w| w.state_at(0.0)).unwrap_or(WorkerState { id, position: Vec3::ZERO, velocity: Vec3::ZERO })
        })
    }

    fn available(&self, id: u32) -> bool {
        let v = &self.vehicles[&id];
        !v.landing && !v.recharging && v.telemetry.as_ref().is_some_and(|t| t.state.is_active())
    }

    fn views(&self) -> Vec<VehicleView> {
        self.vehicles
            .iter()
            .filter(|(id, _)| self.available(**id))
            .map(|(id, v)| VehicleView { id: *id, state: v.telemetry.as_ref().unwrap().state.clone(), endurance: v.endurance })
            .collect()
    }

    fn remaining_estimate(&self, id: u32) -> f64 {
        let v = &self.vehicles[&id];
        let Some(tel) = &v.telemetry else { return 0.0 };
        let tasks: Vec<Task> = v
            .route
            .iter()
            .map(|&u| &self.units[u])
            .filter(|u| u.status != UnitStatus::Done)
            .map(|u| self.unit_task(u))
            .collect();
        let refs: Vec<&Task> = tasks.iter().collect();
        let (vmax, amax) = self.scenario.limits.scalar();
        let (travel, work) = route_cost(tel.state.position, &refs, vmax, amax);
        travel + work
    }

    fn margin(&self, id: u32) -> f64 {
        let v = &self.vehicles[&id];
        v.endurance - (1.0 + self.scenario.manager.reserve_margin) * self.remaining_estimate(id)
    }

    fn ingest(&mut self, input: &TickInput) {
        for w in &input.workers {
            self.workers.insert(w.id, *w);
        }
        let mut done_regions = BTreeSet::new();
        for t in &input.telemetry {
            let Some(v) = self.vehicles.get_mut(&t.uav) else { continue };
            if v.telemetry.as_ref().is_some_and(|old| old.time >= t.time) {
                continue;
            }
            done_regions.extend(t.completed_regions.iter().copied());
            v.telemetry = Some(t.clone());
        }
        for (id, v) in self.vehicles.iter_mut() {
            let Some(tel) = &v.telemetry else { continue };
            let nominal = self.scenario.member(*id).map(|m| m.discharge_rate).unwrap_or(1.0);
            if let Some((t0, e0)) = v.last_sample {
                if tel.time > t0 {
                    let observed = (e0 - tel.state.battery_energy) / (tel.time - t0);
                    v.rate = (observed > 0.0).then_some(observed);
                }
            }
            v.last_sample = Some((tel.time, tel.state.battery_energy));
            v.endurance = estimate_endurance(&tel.state, v.rate.unwrap_or(nominal));
            // the station resets the battery and releases the vehicle as active
            if v.recharging
                && tel.state.is_active()
                && self.scenario.member(*id).is_some_and(|m| tel.state.battery_energy >= m.initial.battery_energy)
            {
                v.recharging = false;
                v.rate = None;
                v.last_sample = None;
                v.endurance = estimate_endurance(&tel.state, nominal);
            }
        }
        for u in &mut self.units {
            if let UnitKind::Region { region, .. } = u.kind {
                if done_regions.contains(&region) && u.status != UnitStatus::Failed {
                    u.status = UnitStatus::Done;
                }
            }
        }
        let now = input.time;
        for s in self.safety.values_mut() {
            if let Some(t0) = s.started {
                if !s.done && now >= t0 + s.duration {
                    s.done = true;
                    s.completed_at = Some(now);
                }
            }
        }
        for u in &mut self.units {
            if let UnitKind::Slot { task, .. } = u.kind {
                if self.safety[&task].done {
                    u.status = UnitStatus::Done;
                }
            }
        }
        self.queue.extend(input.operator.iter().cloned());
    }

    /// One behavior-tree pass.
    pub fn tick(&mut self, input: TickInput) -> TickOutput {
        self.ingest(&input);
        let time = input.time;
        let mut out = TickOutput { commands: BTreeMap::new(), decision: self.decision(time, "idle", "") };

        let tree = bt::Selector::new(vec![
            bt::Branch::Emergency,
            bt::Branch::Replan,
            bt::Branch::Dispatch,
            bt::Branch::Operator,
        ]);
        let fired = tree.run(|b| match b {
            bt::Branch::Emergency => self.emergency(time, &mut out),
            bt::Branch::Replan => self.replan(time, &mut out),
            bt::Branch::Dispatch => self.dispatch(time, &mut out),
            bt::Branch::Operator => self.operator(time, &mut out),
        });
        let branch = fired.map(|b| b.name()).unwrap_or("idle");
        let reason = std::mem::take(&mut out.decision.reason);
        let failure = out.decision.planner_failure.take();
        let robustness = out.decision.robustness.take();
        let commands: Vec<CommandRecord> = out
            .commands
            .iter()
            .flat_map(|(u, cs)| cs.iter().map(move |c| CommandRecord { uav: *u, command: c.summary() }))
            .collect();
        let newly_complete = self.mission_complete_at.is_none() && self.mission_done();
        if newly_complete {
            self.mission_complete_at = Some(time);
        }
        out.decision = Decision {
            commands,
            planner_failure: failure,
            robustness,
            mission_complete: newly_complete,
            ..self.decision(time, branch, &reason)
        };
        out
    }

    fn mission_done(&self) -> bool {
        !self.units.is_empty() && self.units.iter().all(|u| u.status == UnitStatus::Done)
    }

    fn decision(&self, time: f64, branch: &str, reason: &str) -> Decision {
        let assignments = self
            .vehicles
            .iter()
            .filter(|(_, v)| !v.route.is_empty())
            .map(|(id, v)| (*id, v.route.iter().map(|&u| self.unit_label(u)).collect()))
            .collect();
        Decision {
            time,
            branch: branch.into(),
            reason: reason.into(),
            commands: Vec::new(),
            assignments,
            pending: self.units.iter().filter(|u| u.status == UnitStatus::Pending).map(|u| self.unit_label(u.id)).collect(),
            endurance: self.vehicles.iter().filter(|(_, v)| v.telemetry.is_some()).map(|(id, v)| (*id, v.endurance)).collect(),
            margins: self
                .vehicles
                .iter()
                .filter(|(_, v)| !v.route.is_empty())
                .map(|(id, _)| (*id, self.margin(*id)))
                .collect(),
            robustness: None,
            planner_failure: None,
            mission_complete: false,
        }
    }

    fn unit_label(&self, u: usize) -> String {
        match &self.units[u].kind {
            UnitKind::Region { region, .. } => format!("region{region}"),
            UnitKind::Slot { task, slot } => format!("safety{task}/slot{slot}"),
        }
    }

    fn emergency(&mut self, _time: f64, out: &mut TickOutput) -> bool {
        let critical = self.scenario.manager.critical_endurance;
        let ids: Vec<u32> = self
            .vehicles
            .iter()
            .filter(|(_, v)| {
                !v.landing
                    && v.telemetry.as_ref().is_some_and(|t| {
                        t.state.status == UavStatus::Failed || (t.state.status == UavStatus::Active && v.endurance < critical)
                    })
            })
            .map(|(id, _)| *id)
            .collect();
        if ids.is_empty() {
            return false;
        }
        let mut released = Vec::new();
        for id in &ids {
            let v = self.vehicles.get_mut(id).unwrap();
            v.landing = true;
            v.busy = false;
            for u in std::mem::take(&mut v.route) {
                if self.units[u].status == UnitStatus::Assigned(*id) {
                    self.units[u].status = UnitStatus::Pending;
                    released.push(u);
                }
            }
            out.commands.entry(*id).or_default().push(Command::Land);
        }
        if !released.is_empty() {
            self.needs_replan = Some(format!("reassign tasks of vehicles {ids:?}"));
        }
        out.decision.reason = format!("vehicles {ids:?} failed or below {critical} s endurance");
        if !released.is_empty() {
            let labels: Vec<String> = released.iter().map(|&u| self.unit_label(u)).collect();
            out.decision.reason += &format!("; released {}", labels.join(","));
        }
        true
    }

    fn replan(&mut self, time: f64, out: &mut TickOutput) -> bool {
        let infeasible: Vec<u32> = self
            .vehicles
            .iter()
            .filter(|(id, v)| !v.route.is_empty() && self.available(**id))
            .map(|(id, _)| *id)
            .filter(|id| self.margin(*id) < 0.0)
            .collect();
        let reason = match (&self.needs_replan, infeasible.is_empty()) {
            (Some(r), _) => r.clone(),
            (None, false) => format!("endurance margin negative for vehicles {infeasible:?}"),
            (None, true) => return false,
        };
        if self.views().is_empty() {
            // nothing to allocate to yet; keep the request for a later tick
            return false;
        }
        self.needs_replan = None;

        let open: Vec<usize> = self
            .units
            .iter()
            .filter(|u| matches!(u.status, UnitStatus::Pending | UnitStatus::Assigned(_)))
            .map(|u| u.id)
            .collect();
        let tasks: Vec<Task> = open.iter().map(|&u| self.unit_task(&self.units[u])).collect();
        let views = self.views();
        let plan = match allocate(&tasks, &views, &self.scenario, time) {
            Ok(p) => p,
            Err(e) => {
                out.decision.reason = format!("{reason}: {e}");
                return true;
            }
        };

        // translate the plan back to unit ids
        let old_routes: BTreeMap<u32, Vec<usize>> = self.vehicles.iter().map(|(id, v)| (*id, v.route.clone())).collect();
        for v in self.vehicles.values_mut() {
            v.route.clear();
        }
        for &u in &open {
            self.units[u].status = UnitStatus::Pending;
        }
        for (uav, list) in &plan.assignment {
            let route: Vec<usize> = list
                .iter()
                .map(|t| open[tasks.iter().position(|x| x == t).expect("task comes from the open list")])
                .collect();
            for &u in &route {
                self.units[u].status = UnitStatus::Assigned(*uav);
            }
            self.vehicles.get_mut(uav).unwrap().route = route;
        }
        self.plan = merge_plan(plan);

        // inspection vehicles are planned jointly
        let inspect: Vec<u32> = self
            .vehicles
            .iter()
            .filter(|(_, v)| v.route.iter().any(|&u| matches!(self.units[u].kind, UnitKind::Region { .. })))
            .map(|(id, _)| *id)
            .collect();
        let inspect_changed = inspect.iter().any(|id| old_routes.get(id) != Some(&self.vehicles[id].route))
            || old_routes.iter().any(|(id, r)| {
                !inspect.contains(id) && r.iter().any(|&u| matches!(self.units[u].kind, UnitKind::Region { .. }))
            });
        if !inspect.is_empty() && inspect_changed {
            self.plan_inspection_for(&inspect, time, out);
        }

        for (id, v) in &self.vehicles {
            let old = old_routes.get(id).cloned().unwrap_or_default();
            if v.route == old {
                continue;
            }
            if let Some(&u) = v.route.first() {
                if let UnitKind::Slot { task, slot } = self.units[u].kind {
                    let s = &self.safety[&task];
                    out.commands.entry(*id).or_default().push(Command::Formation {
                        task,
                        worker: s.worker,
                        geometry: s.geometry,
                        slot,
                        slots: s.uav_count,
                    });
                }
            } else if self.available(*id) && !old.is_empty() {
                out.commands.entry(*id).or_default().push(Command::Hover);
            }
        }
        for (id, cmds) in &out.commands {
            if cmds.iter().any(|c| matches!(c, Command::FollowTrajectory { .. } | Command::Formation { .. })) {
                self.vehicles.get_mut(id).unwrap().busy = true;
            }
        }
        for s in self.safety.values_mut() {
            let assigned = self.units.iter().any(|u| {
                matches!(u.kind, UnitKind::Slot { task, .. } if task == s.id) && matches!(u.status, UnitStatus::Assigned(_))
            });
            if assigned && s.started.is_none() {
                s.started = Some(time);
            }
        }
        out.decision.reason = reason;
        true
    }

    fn plan_inspection_for(&mut self, uavs: &[u32], time: f64, out: &mut TickOutput) {
        let (vmax, amax) = self.scenario.limits.scalar();
        let params = self.scenario.manager.clone();
        let mut starts = Vec::new();
        let mut visits = Vec::new();
        let mut horizon: f64 = 0.0;
        for id in uavs {
            let v = &self.vehicles[id];
            let tel = v.telemetry.as_ref().unwrap();
            let st = &tel.state;
            // extrapolate the latest report to the plan start
            let lag = (time - tel.time).max(0.0);
            starts.push(StartState {
                position: st.position + st.velocity * lag + st.acceleration * (0.5 * lag * lag),
                velocity: st.velocity + st.acceleration * lag,
                heading: st.heading,
            });
            let mut here = st.position;
            let (mut travel, mut dwell) = (0.0, 0.0);
            let mut list = Vec::new();
            for (k, &u) in v.route.iter().enumerate() {
                let UnitKind::Region { region, deadline } = self.units[u].kind else { continue };
                let r = self.scenario.region(region).unwrap();
                travel += travel_time(here, r.viewpoint, vmax, amax);
                dwell += r.dwell_time;
                here = r.viewpoint;
                let derived = params.deadline_slack * travel + dwell + params.deadline_pad * (k + 1) as f64;
                let d = deadline.unwrap_or(derived);
                horizon = horizon.max(d);
                list.push(RegionVisit { region, deadline: d });
            }
            visits.push(list);
        }
        let task = InspectionTask {
            uav_ids: uavs.to_vec(),
            starts,
            region_visits: visits,
            horizon: horizon + params.deadline_pad,
            separation_min: self.scenario.separation_min,
        };
        // landing or failed vehicles become vertical keep-out columns
        let mut world = self.scenario.clone();
        for (id, v) in &self.vehicles {
            if uavs.contains(id) {
                continue;
            }
            let Some(t) = &v.telemetry else { continue };
            let p = t.state.position;
            if p.z <= 0.1 || !(v.landing || t.state.status == UavStatus::Failed) {
                continue;
            }
            let column = WireSegment {
                endpoint_a: Vec3::new(p.x, p.y, 0.0),
                endpoint_b: Vec3::new(p.x, p.y, p.z + 0.5),
                clearance_radius: 0.5 * self.scenario.separation_min,
            };
            let r = column.clearance_radius + self.scenario.obstacle_margin;
            let blocked = task.starts.iter().any(|s| {
                (s.position.x - p.x).abs() <= r && (s.position.y - p.y).abs() <= r && s.position.z <= p.z + 0.5 + r
            });
            if !blocked {
                world.wires.push(column);
            }
        }
        let regions_of = |task: &InspectionTask| task.region_visits.iter().flatten().map(|v| v.region).collect::<Vec<_>>();
        match plan_inspection(&task, &world, &self.scenario.limits, self.scenario.ts) {
            Ok(plan) => {
                let pid = self.next_plan_id;
                self.next_plan_id += 1;
                for (i, id) in plan.uav_ids.iter().enumerate() {
                    let k = task.uav_ids.iter().position(|u| u == id).unwrap();
                    out.commands.entry(*id).or_default().push(Command::FollowTrajectory {
                        plan_id: pid,
                        start_time: time,
                        trajectory: plan.trajectories[i].clone(),
                        headings: plan.headings[i].clone(),
                        regions: task.region_visits[k].iter().map(|v| v.region).collect(),
                    });
                }
                out.decision.robustness = Some(plan.robustness);
                self.plans.push(IssuedPlan { id: pid, start_time: time, task: task.clone(), robustness: plan.robustness });
            }
            Err(err) => {
                let (node, robustness) = match &err {
                    PlanError::Unsatisfied { node, robustness, .. } => (Some(*node), Some(*robustness)),
                    _ => (None, None),
                };
                let label = match &err {
                    PlanError::Unsatisfied { label, .. } => label.clone(),
                    other => other.to_string(),
                };
                let failure = PlannerFailure { uavs: uavs.to_vec(), regions: regions_of(&task), node, label, robustness };
                log::warn!("planner failure at t={time}: {err}");
                for u in &mut self.units {
                    if matches!(u.kind, UnitKind::Region { .. }) && matches!(u.status, UnitStatus::Assigned(id) if uavs.contains(&id)) {
                        u.status = UnitStatus::Failed;
                    }
                }
                for id in uavs {
                    let units = &self.units;
                    self.vehicles.get_mut(id).unwrap().route.retain(|&u| units[u].status != UnitStatus::Failed);
                    out.commands.entry(*id).or_default().push(Command::Hover);
                }
                self.planner_failures.push(failure.clone());
                out.decision.planner_failure = Some(failure);
            }
        }
    }

    fn dispatch(&mut self, _time: f64, out: &mut TickOutput) -> bool {
        let mut reasons = Vec::new();
        let ids: Vec<u32> = self.vehicles.keys().copied().collect();
        for id in ids {
            if !self.available(id) {
                continue;
            }
            let all_done = {
                let v = &self.vehicles[&id];
                v.route.iter().all(|&u| self.units[u].status == UnitStatus::Done)
            };
            let v = &self.vehicles[&id];
            if !(v.busy && all_done) {
                if !v.busy && v.route.is_empty() && v.endurance < self.scenario.manager.recharge_endurance {
                    if let Some(st) = self.nearest_station(id) {
                        let v = self.vehicles.get_mut(&id).unwrap();
                        v.recharging = true;
                        out.commands.entry(id).or_default().push(Command::Recharge { station: st.0, position: st.1 });
                        reasons.push(format!("vehicle {id} to station {}", st.0));
                    }
                }
                continue;
            }
            let v = self.vehicles.get_mut(&id).unwrap();
            v.busy = false;
            v.route.clear();
            out.commands.entry(id).or_default().push(Command::Hover);
            reasons.push(format!("vehicle {id} finished its tasks"));
        }
        if reasons.is_empty() {
            return false;
        }
        out.decision.reason = reasons.join("; ");
        true
    }

    fn nearest_station(&self, id: u32) -> Option<(u32, Vec3)> {
        let p = self.vehicles[&id].telemetry.as_ref()?.state.position;
        self.scenario
            .stations
            .iter()
            .min_by(|a, b| a.position.distance(p).total_cmp(&b.position.distance(p)).then(a.id.cmp(&b.id)))
            .map(|s| (s.id, s.position))
    }

    fn operator(&mut self, _time: f64, out: &mut TickOutput) -> bool {
        if self.queue.is_empty() {
            return false;
        }
        let mut notes = Vec::new();
        while let Some(cmd) = self.queue.pop_front() {
            if let Err(e) = cmd.validate(&self.scenario) {
                notes.push(format!("ignored invalid command: {e}"));
                continue;
            }
            match cmd {
                OperatorCommand::AssignInspection { regions, deadlines } => {
                    self.add_regions(&regions, deadlines.as_deref());
                    self.needs_replan = Some("operator inspection request".into());
                    notes.push(format!("inspection of regions {regions:?} queued"));
                }
                OperatorCommand::AssignSafety { worker, geometry, uav_count, duration } => {
                    self.add_safety(worker, geometry, uav_count, duration);
                    self.needs_replan = Some("operator safety request".into());
                    notes.push(format!("safety formation around worker {worker} queued"));
                }
                OperatorCommand::SetFormation { worker, distance, azimuth_center, elevation, inter_uav_angle } => {
                    let targets: Vec<u32> = self
                        .safety
                        .values()
                        .filter(|s| !s.done && worker.is_none_or(|w| w == s.worker))
                        .map(|s| s.id)
                        .collect();
                    for tid in targets {
                        let s = self.safety.get_mut(&tid).unwrap();
                        let g = &mut s.geometry;
                        if let Some(d) = distance {
                            g.distance = d;
                        }
                        if let Some(a) = azimuth_center {
                            g.azimuth_center = a;
                        }
                        if let Some(e) = elevation {
                            g.elevation = e;
                        }
                        if let Some(a) = inter_uav_angle {
                            g.inter_uav_angle = a;
                        }
                        let (geometry, worker, slots) = (s.geometry, s.worker, s.uav_count);
                        for (id, v) in &self.vehicles {
                            for &u in &v.route {
                                if let UnitKind::Slot { task, slot } = self.units[u].kind {
                                    if task == tid && self.units[u].status == UnitStatus::Assigned(*id) {
                                        out.commands.entry(*id).or_default().push(Command::Formation {
                                            task,
                                            worker,
                                            geometry,
                                            slot,
                                            slots,
                                        });
                                    }
                                }
                            }
                        }
                        notes.push(format!("formation {tid} geometry updated"));
                    }
                }
                OperatorCommand::InjectFailure { uav } => {
                    // applied to the vehicle by the simulator; nothing to plan here
                    notes.push(format!("failure of vehicle {uav} acknowledged"));
                }
            }
        }
        out.decision.reason = notes.join("; ");
        true
    }
}

/// Merges consecutive single-region tasks of a route into one inspection task.
fn merge_plan(mut plan: Plan) -> Plan {
    for tasks in plan.assignment.values_mut() {
        let mut merged: Vec<Task> = Vec::new();
        for t in tasks.drain(..) {
            if let (Some(last), TaskKind::Inspect { regions, deadlines }) = (merged.last_mut(), &t.kind) {
                if let TaskKind::Inspect { regions: lr, deadlines: ld } = &mut last.kind {
                    lr.extend(regions.iter().copied());
                    ld.extend(deadlines.iter().copied());
                    last.duration += t.duration;
                    last.end = t.end;
                    continue;
                }
            }
            merged.push(t);
        }
        *tasks = merged;
    }
    plan
}
