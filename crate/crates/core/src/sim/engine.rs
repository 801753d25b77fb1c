//! Fixed-step mission loop.
//!
//! Each master step: scenario events, command delivery, worker sensing,
//! controllers, tracking, plant integration, bookkeeping. The manager ticks
//! at its own period and talks to the vehicles only through the bus.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bus::{Bus, BusError};
use super::log::{ExecutedPlan, MissionLog, SafetyViolation};
use super::{gaussian3, plant_step, sense, track, PlantParams, Reference};
use crate::gateway::{DecisionSummary, FormationSnapshot, PlanSummary, Snapshot, VehicleSnapshot};
use crate::manager::{travel_time_distance, Command, IssuedPlan, OperatorCommand, TaskManager, Telemetry, TickInput};
use crate::mpc::{formation_slots, in_field_of_view, MpcContext, MpcSolution, MpcStatus, NeighborPrediction, SafetyController, WorkerFilter};
use crate::planner::{build_inspection_spec, trajectories_to_trace, HeadingSchedule, Trajectory};
use crate::scenario::{validate_scenario, EventKind, Scenario, Violation};
use crate::stl::{CompiledFormula, Semantics};
use crate::world::{distance_to_obstacles, CameraParams, FormationGeometry, UavState, UavStatus, Vec3, WorkerState};

const TOPICS: [&str; 4] = ["commands", "predictions", "telemetry", "worker"];
const MANAGER: &str = "manager";
const SAFETY_TOLERANCE: f64 = 0.1;
const LANDED_ALTITUDE: f64 = 0.05;
const STALE_PREDICTION: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule misconfiguration: {0}")]
    Schedule(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scenario has {} violation(s)", .0.len())]
    InvalidScenario(Vec<Violation>),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Bus payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Telemetry(Telemetry),
    Commands { uav: u32, commands: Vec<Command> },
    WorkerFix { worker: u32, position: Vec3, time: f64 },
    Prediction(NeighborPrediction),
}

/// Straight-line rest-to-rest leg with a trapezoidal speed profile.
#[derive(Debug, Clone)]
struct Leg {
    from: Vec3,
    to: Vec3,
    start: f64,
    v_max: f64,
    a_max: f64,
}

impl Leg {
    fn duration(&self) -> f64 {
        travel_time_distance(self.from.distance(self.to), self.v_max, self.a_max)
    }

    fn sample(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let d = self.from.distance(self.to);
        let Some(dir) = (self.to - self.from).normalized() else {
            return (self.to, Vec3::ZERO, Vec3::ZERO);
        };
        let total = self.duration();
        let tau = (t - self.start).clamp(0.0, total);
        let (a, v) = (self.a_max, self.v_max);
        let t_acc = if d <= v * v / a { (d / a).sqrt() } else { v / a };
        let v_peak = a * t_acc;
        let (s, sv, sa) = if tau < t_acc {
            (0.5 * a * tau * tau, a * tau, a)
        } else if tau <= total - t_acc {
            (0.5 * a * t_acc * t_acc + v_peak * (tau - t_acc), v_peak, 0.0)
        } else if tau < total {
            let r = total - tau;
            (d - 0.5 * a * r * r, a * r, -a)
        } else {
            (d, 0.0, 0.0)
        };
        (self.from + dir * s, dir * sv, dir * sa)
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Hover {
        position: Vec3,
        heading: f64,
    },
    Follow {
        start: f64,
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
        since: f64,
        solution: Option<(f64, Trajectory)>,
    },
    Transit {
        leg: Leg,
        heading: f64,
        station: Option<u32>,
    },
    Descend {
        x: f64,
        y: f64,
        z0: f64,
        start: f64,
        speed: f64,
        heading: f64,
        station: Option<u32>,
    },
    Landed {
        station: Option<u32>,
        since: f64,
    },
}

impl Mode {
    fn label(&self) -> String {
        match self {
            Mode::Hover { .. } => "hover".into(),
            Mode::Follow { regions, .. } => {
                format!("inspect[{}]", regions.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","))
            }
            Mode::Formation { task, slot, .. } => format!("safety{task}/slot{slot}"),
            Mode::Transit { station: Some(s), .. } | Mode::Descend { station: Some(s), .. } => format!("recharge{s}"),
            Mode::Transit { .. } | Mode::Descend { .. } => "land".into(),
            Mode::Landed { station: Some(s), .. } => format!("charging{s}"),
            Mode::Landed { .. } => "landed".into(),
        }
    }

    fn landing(&self) -> bool {
        matches!(self, Mode::Transit { station: None, .. } | Mode::Descend { station: None, .. } | Mode::Landed { station: None, .. })
    }
}

struct Vehicle {
    id: u32,
    state: UavState,
    estimate: UavState,
    plant: PlantParams,
    camera: CameraParams,
    mode: Mode,
    control: crate::mpc::Control,
    rng: ChaCha8Rng,
    mpc: SafetyController,
    workers: BTreeMap<u32, (WorkerFilter, f64)>,
    neighbors: BTreeMap<u32, NeighborPrediction>,
    dwell: BTreeMap<u32, u64>,
    completed: BTreeSet<u32>,
    initial_energy: f64,
}

impl Vehicle {
    fn reference(&self, t: f64) -> Reference {
        match &self.mode {
            Mode::Hover { position, heading } => Reference::hold(*position, *heading),
            Mode::Follow { start, trajectory, headings, .. } => {
                let (p, v, a) = trajectory.sample(t - start);
                Reference { position: p, velocity: v, acceleration: a, heading: headings.at(t - start), yaw_rate: 0.0 }
            }
            Mode::Formation { solution, .. } => match solution {
                Some((t0, traj)) => {
                    let (p, v, a) = traj.sample(t - t0);
                    let (heading, yaw_rate) = match &self.mpc.last {
                        Some(s) => (s.heading_at(t - t0), s.yaw_rate_at(t - t0)),
                        None => (self.estimate.heading, 0.0),
                    };
                    Reference { position: p, velocity: v, acceleration: a, heading, yaw_rate }
                }
                None => Reference::hold(self.estimate.position, self.estimate.heading),
            },
            Mode::Transit { leg, heading, .. } => {
                let (p, v, a) = leg.sample(t);
                Reference { position: p, velocity: v, acceleration: a, heading: *heading, yaw_rate: 0.0 }
            }
            Mode::Descend { x, y, z0, start, speed, heading, .. } => {
                let z = (z0 - speed * (t - start)).max(0.0);
                let vz = if z > 0.0 { -speed } else { 0.0 };
                Reference { position: Vec3::new(*x, *y, z), velocity: Vec3::new(0.0, 0.0, vz), acceleration: Vec3::ZERO, heading: *heading, yaw_rate: 0.0 }
            }
            Mode::Landed { .. } => Reference::hold(self.state.position, self.state.heading),
        }
    }

    fn worker_estimate(&self, id: u32, t: f64) -> Option<WorkerState> {
        let (f, last) = self.workers.get(&id)?;
        f.predict(t - last)
    }
}

struct PlanRecorder {
    plan: IssuedPlan,
    uav_index: Vec<usize>,
    stride: u64,
    start_step: u64,
    steps: usize,
    samples: Vec<Vec<(Vec3, Vec3)>>,
    superseded: bool,
}

/// Accumulators behind [`super::log::Metrics`].
#[derive(Default)]
struct Tracker {
    min_pair: Option<(f64, f64, u32, u32)>,
    min_clear: Option<(f64, f64, u32)>,
    fov_hits: BTreeMap<u32, (u64, u64)>,
    max_tracking: f64,
    pair_violation: BTreeSet<(u32, u32)>,
    clear_violation: BTreeSet<u32>,
    depleted: BTreeSet<u32>,
}

pub struct Engine {
    scenario: Scenario,
    dt: f64,
    stride: Stride,
    step: u64,
    vehicles: Vec<Vehicle>,
    worker_rng: ChaCha8Rng,
    bus: Bus<Message>,
    manager: TaskManager,
    manager_workers: BTreeMap<u32, WorkerState>,
    latest_telemetry: BTreeMap<u32, Telemetry>,
    operator: VecDeque<OperatorCommand>,
    next_event: usize,
    log: MissionLog,
    recorders: Vec<PlanRecorder>,
    recent: VecDeque<DecisionSummary>,
    tracker: Tracker,
    last_snapshot: Option<Snapshot>,
    index: BTreeMap<u32, usize>,
}

struct Stride {
    tracker: u64,
    controller: u64,
    manager: u64,
    telemetry: u64,
    worker: u64,
    snapshot: u64,
}

fn period_stride(name: &str, period: f64, dt: f64) -> Result<u64, SimError> {
    let ratio = period / dt;
    let n = ratio.round();
    if !(period > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-6 {
        return Err(SimError::Schedule(format!("{name} period {period} s is not a positive integer multiple of dt = {dt} s")));
    }
    Ok(n as u64)
}

impl Engine {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Engine, SimError> {
        let violations = validate_scenario(scenario);
        if !violations.is_empty() {
            return Err(SimError::InvalidScenario(violations));
        }
        let mut scenario = scenario.clone();
        scenario.seed = seed;
        let p = &scenario.sim;
        let dt = p.dt;
        let stride = Stride {
            tracker: period_stride("tracker", p.tracker_period, dt)?,
            controller: period_stride("controller", p.controller_period, dt)?,
            manager: period_stride("manager", p.manager_period, dt)?,
            telemetry: period_stride("telemetry", p.telemetry_period, dt)?,
            worker: period_stride("worker sensing", p.worker_sense_period, dt)?,
            snapshot: period_stride("snapshot", p.snapshot_period, dt)?,
        };
        let mpc_step = scenario.mpc.step();
        if (p.controller_period - mpc_step).abs() > 1e-9 {
            return Err(SimError::Schedule(format!(
                "controller period {} s must equal the controller interval {} s",
                p.controller_period, mpc_step
            )));
        }
        period_stride("planning grid", scenario.ts, dt)?;

        let mut bus = Bus::new(&scenario.bus, seed);
        for t in TOPICS {
            if !bus.has_topic(t) {
                return Err(SimError::Config(format!("bus topic '{t}' is not configured")));
            }
        }
        bus.subscribe("telemetry", MANAGER)?;
        bus.subscribe("worker", MANAGER)?;
        let mpc_params = scenario.mpc_params();
        let mut vehicles = Vec::new();
        for m in &scenario.fleet {
            let name = format!("uav{}", m.id);
            for t in ["commands", "worker", "predictions"] {
                bus.subscribe(t, &name)?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + m.id as u64);
            let plant = PlantParams { idle_power: m.discharge_rate, drain_factor: 1.0, ..scenario.plant.clone() };
            vehicles.push(Vehicle {
                id: m.id,
                state: m.initial.clone(),
                estimate: m.initial.clone(),
                plant,
                camera: m.camera,
                mode: Mode::Hover { position: m.initial.position, heading: m.initial.heading },
                control: crate::mpc::Control { acceleration: Vec3::ZERO, yaw_rate: 0.0 },
                rng,
                mpc: SafetyController::new(mpc_params.clone(), m.camera),
                workers: BTreeMap::new(),
                neighbors: BTreeMap::new(),
                dwell: BTreeMap::new(),
                completed: BTreeSet::new(),
                initial_energy: m.initial.battery_energy,
            });
        }
        vehicles.sort_by_key(|v| v.id);
        let index = vehicles.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
        let mut worker_rng = ChaCha8Rng::seed_from_u64(seed);
        worker_rng.set_stream(2000);
        let manager = TaskManager::new(&scenario);
        let mut events: Vec<_> = scenario.events.clone();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        scenario.events = events;
        Ok(Engine {
            dt,
            stride,
            step: 0,
            vehicles,
            worker_rng,
            bus,
            manager,
            manager_workers: BTreeMap::new(),
            latest_telemetry: BTreeMap::new(),
            operator: VecDeque::new(),
            next_event: 0,
            log: MissionLog::new(),
            recorders: Vec::new(),
            recent: VecDeque::new(),
            tracker: Tracker::default(),
            last_snapshot: None,
            index,
            scenario,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Master steps needed to cover `duration` seconds.
    pub fn step_count(&self, duration: f64) -> u64 {
        (duration / self.dt).round() as u64
    }

    /// Simulation time at the start of the next step.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn manager(&self) -> &TaskManager {
        &self.manager
    }

    /// True vehicle states, ordered by id.
    pub fn vehicle_states(&self) -> Vec<(u32, UavState)> {
        self.vehicles.iter().map(|v| (v.id, v.state.clone())).collect()
    }

    pub fn mission_complete(&self) -> bool {
        self.manager.mission_complete_at().is_some()
    }

    /// Queues an operator command for the next manager tick, where it is
    /// logged and applied.
    pub fn push_operator(&mut self, command: OperatorCommand) {
        self.operator.push_back(command);
    }

    /// The most recent snapshot written to the log.
    pub fn latest_snapshot(&self) -> Option<&Snapshot> {
        self.last_snapshot.as_ref()
    }

    fn workers_at(&self, t: f64) -> Vec<WorkerState> {
        self.scenario.workers.iter().map(|w| w.state_at(t)).collect()
    }

    pub fn step(&mut self) {
        let s = self.step;
        let t = s as f64 * self.dt;
        self.apply_events(t);

        // command delivery
        for i in 0..self.vehicles.len() {
            let name = format!("uav{}", self.vehicles[i].id);
            let deliveries = self.bus.poll(&name, t);
            for d in deliveries {
                self.receive(i, d.message, t);
            }
        }

        let workers = self.workers_at(t);
        if s.is_multiple_of(self.stride.worker) {
            let sigma = self.scenario.sensing.sigma_worker;
            for w in &workers {
                let fix = w.position + gaussian3(sigma, &mut self.worker_rng);
                let msg = Message::WorkerFix { worker: w.id, position: fix, time: t };
                self.bus.publish("worker", w.id, msg, t).expect("topic checked at startup");
            }
        }

        if s.is_multiple_of(self.stride.tracker) {
            for v in &mut self.vehicles {
                let sp = &self.scenario.sensing;
                v.estimate = sense(&v.state, sp.sigma_pos, sp.sigma_vel, &mut v.rng);
            }
        }

        if s.is_multiple_of(self.stride.controller) {
            self.controllers(t, &workers);
        }

        if s.is_multiple_of(self.stride.tracker) {
            let gains = self.scenario.tracker.clone();
            for v in &mut self.vehicles {
                let r = v.reference(t);
                v.control = track(&r, &v.estimate, &gains);
            }
        }

        if s.is_multiple_of(self.stride.telemetry) {
            for v in &self.vehicles {
                let mut reported = v.estimate.clone();
                reported.battery_energy = v.state.battery_energy;
                reported.status = v.state.status;
                let progress = match &v.mode {
                    Mode::Follow { start, trajectory, .. } => ((t - start) / trajectory.duration().max(1e-9)).clamp(0.0, 1.0),
                    _ => 0.0,
                };
                let tel = Telemetry { uav: v.id, time: t, state: reported, progress, completed_regions: v.completed.iter().copied().collect() };
                self.bus.publish("telemetry", v.id, Message::Telemetry(tel), t).expect("topic checked at startup");
            }
        }

        if s > 0 && s.is_multiple_of(self.stride.manager) {
            self.manager_tick(t);
        }

        self.record_plans(s);

        // plant integration
        let dt = self.dt;
        let t1 = (s + 1) as f64 * dt;
        for v in &mut self.vehicles {
            let before = v.state.battery_energy;
            let mut next = plant_step(&v.state, &v.control, &v.plant, dt);
            if next.position.z < 0.0 {
                next.position.z = 0.0;
                next.velocity.z = next.velocity.z.max(0.0);
                next.acceleration.z = next.acceleration.z.max(0.0);
            }
            v.state = next;
            if v.state.battery_energy > before {
                self.log.metrics.energy_anomalies.push((t1, v.id));
            }
        }
        self.after_step(t1);
        self.step += 1;
    }

    fn apply_events(&mut self, t: f64) {
        while let Some(e) = self.scenario.events.get(self.next_event) {
            if e.time > t + 1e-9 {
                break;
            }
            let e = e.clone();
            self.next_event += 1;
            match &e.event {
                EventKind::BatteryAnomaly { uav, factor } => {
                    if let Some(&i) = self.index.get(uav) {
                        self.vehicles[i].plant.drain_factor *= factor;
                    }
                    self.log.push_event(t, "battery_anomaly", serde_json::json!({ "uav": uav, "factor": factor }));
                }
                EventKind::UavFailure { uav } => {
                    self.fail(*uav, t);
                }
                EventKind::Operator { command } => {
                    self.push_operator(command.clone());
                }
            }
        }
    }

    fn fail(&mut self, uav: u32, t: f64) {
        if let Some(&i) = self.index.get(&uav) {
            let v = &mut self.vehicles[i];
            if v.state.status == UavStatus::Active {
                v.state.status = UavStatus::Failed;
                self.log.push_event(t, "uav_failure", serde_json::json!({ "uav": uav }));
            }
        }
    }

    fn receive(&mut self, i: usize, message: Message, t: f64) {
        let lim = self.scenario.limits.scalar();
        let v = &mut self.vehicles[i];
        match message {
            Message::Commands { uav, commands } if uav == v.id => {
                for c in commands {
                    apply_command(v, c, t, lim, &self.scenario);
                }
            }
            Message::WorkerFix { worker, position, time } => {
                let tau = self.scenario.mpc.worker_filter_tau;
                let entry = v.workers.entry(worker).or_insert_with(|| (WorkerFilter::new(tau), time));
                entry.0.update(worker, position, time);
                entry.1 = time;
            }
            Message::Prediction(p) if p.uav != v.id => {
                v.neighbors.insert(p.uav, p);
            }
            _ => {}
        }
    }

    fn controllers(&mut self, t: f64, workers: &[WorkerState]) {
        let h = self.scenario.mpc.step();
        let w = self.scenario.mpc.shooting_points.max(2);
        let fov_after = self.scenario.sim.fov_transient;
        for i in 0..self.vehicles.len() {
            let (towers, wires) = (&self.scenario.towers, &self.scenario.wires);
            let v = &mut self.vehicles[i];
            if matches!(v.mode, Mode::Landed { .. }) {
                continue;
            }
            v.neighbors.retain(|_, p| t - p.t0 <= STALE_PREDICTION);
            if let Mode::Formation { worker, geometry, slot, slots, since, .. } = v.mode {
                if let Some(west) = v.worker_estimate(worker, t) {
                    let pose = formation_slots(&west, &geometry, slots)[slot];
                    let neighbors: Vec<NeighborPrediction> = v.neighbors.values().cloned().collect();
                    let ctx = MpcContext { worker: &west, neighbors: &neighbors, towers, wires, camera: &v.camera, now: t };
                    let mut current = v.estimate.clone();
                    current.heading = v.state.heading;
                    let sol: MpcSolution = v.mpc.solve(&current, &pose, &ctx).clone();
                    let m = &mut self.log.metrics.mpc;
                    m.solves += 1;
                    match sol.status {
                        MpcStatus::Converged => {
                            m.converged += 1;
                            m.max_converged_equality = m.max_converged_equality.max(sol.residuals.equality);
                            m.max_converged_inequality = m.max_converged_inequality.max(sol.residuals.inequality);
                        }
                        MpcStatus::IterationLimit => m.iteration_limit += 1,
                        MpcStatus::Degraded => m.degraded += 1,
                    }
                    let status = match sol.status {
                        MpcStatus::Converged => "converged",
                        MpcStatus::IterationLimit => "iteration_limit",
                        MpcStatus::Degraded => "degraded",
                    };
                    use std::fmt::Write as _;
                    let _ = writeln!(
                        self.log.mpc_csv,
                        "{t},{},{status},{},{},{},{},{},{},{},{}",
                        v.id,
                        sol.iterations,
                        sol.qp_iterations,
                        sol.cost.action,
                        sol.cost.perception,
                        sol.residuals.equality,
                        sol.residuals.inequality,
                        sol.band_lower_active,
                        sol.band_upper_active
                    );
                    let traj = sol.to_trajectory();
                    if let Mode::Formation { solution, .. } = &mut v.mode {
                        *solution = Some((t, traj));
                    }
                }
                if t - since >= fov_after - 1e-9 {
                    if let Some(truth) = workers.iter().find(|x| x.id == worker) {
                        let hit = in_field_of_view(v.state.position, v.state.heading, truth.position, &v.camera);
                        let e = self.tracker.fov_hits.entry(v.id).or_default();
                        e.0 += hit as u64;
                        e.1 += 1;
                    }
                }
            }
            // every airborne vehicle shares its intended path
            let v = &self.vehicles[i];
            let positions: Vec<Vec3> = match (&v.mode, &v.mpc.last) {
                (Mode::Formation { solution: Some((t0, _)), .. }, Some(sol)) if (*t0 - t).abs() < 1e-9 => {
                    sol.predicted.iter().map(|p| p.position).collect()
                }
                _ => (0..=w).map(|k| v.reference(t + k as f64 * h).position).collect(),
            };
            let msg = Message::Prediction(NeighborPrediction { uav: v.id, t0: t, h, positions });
            self.bus.publish("predictions", v.id, msg, t).expect("topic checked at startup");
        }
    }

    fn manager_tick(&mut self, t: f64) {
        for d in self.bus.poll(MANAGER, t) {
            match d.message {
                Message::Telemetry(tel) => {
                    self.latest_telemetry.insert(tel.uav, tel);
                }
                Message::WorkerFix { worker, position, .. } => {
                    self.manager_workers.insert(worker, WorkerState { id: worker, position, velocity: Vec3::ZERO });
                }
                _ => {}
            }
        }
        let operator: Vec<OperatorCommand> = self.operator.drain(..).collect();
        for c in &operator {
            self.log.push_event(t, "operator_command", serde_json::to_value(c).expect("command serialises"));
            if let OperatorCommand::InjectFailure { uav } = c {
                self.fail(*uav, t);
            }
        }
        let before = self.manager.issued_plans().len();
        let out = self.manager.tick(TickInput {
            time: t,
            telemetry: self.latest_telemetry.values().cloned().collect(),
            workers: self.manager_workers.values().copied().collect(),
            operator,
        });
        for (uav, commands) in out.commands {
            for c in &commands {
                let line = serde_json::json!({ "time": t, "uav": uav, "command": c.summary() });
                self.log.commands.push(line.to_string());
            }
            self.bus.publish("commands", uav, Message::Commands { uav, commands }, t).expect("topic checked at startup");
        }
        let d = out.decision;
        self.recent.push_back(DecisionSummary { time: d.time, branch: d.branch.clone(), reason: d.reason.clone() });
        while self.recent.len() > 5 {
            self.recent.pop_front();
        }
        if d.mission_complete {
            self.log.push_event(t, "mission_complete", serde_json::json!({}));
        }
        if let Some(f) = &d.planner_failure {
            self.log.push_event(t, "planner_failure", serde_json::to_value(f).expect("failure serialises"));
        }
        self.log.decisions.push(serde_json::to_string(&d).expect("decision serialises"));

        let plans = self.manager.issued_plans();
        if plans.len() > before {
            for plan in &plans[before..] {
                for r in &mut self.recorders {
                    if r.plan.task.uav_ids.iter().any(|u| plan.task.uav_ids.contains(u)) {
                        r.superseded = true;
                    }
                }
                let Ok(spec) = build_inspection_spec(&plan.task, &self.scenario, self.scenario.ts) else { continue };
                let uav_index = plan.task.uav_ids.iter().map(|u| self.index[u]).collect();
                self.recorders.push(PlanRecorder {
                    plan: plan.clone(),
                    uav_index,
                    stride: (self.scenario.ts / self.dt).round() as u64,
                    start_step: self.step,
                    steps: spec.steps,
                    samples: vec![Vec::new(); plan.task.uav_ids.len()],
                    superseded: false,
                });
            }
        }
    }

    fn record_plans(&mut self, s: u64) {
        for r in &mut self.recorders {
            if s < r.start_step || !(s - r.start_step).is_multiple_of(r.stride) || r.samples[0].len() > r.steps {
                continue;
            }
            for (k, &i) in r.uav_index.iter().enumerate() {
                let st = &self.vehicles[i].state;
                r.samples[k].push((st.position, st.velocity));
            }
        }
    }

    fn after_step(&mut self, t: f64) {
        let dt = self.dt;
        for i in 0..self.vehicles.len() {
            let v = &mut self.vehicles[i];
            let id = v.id;
            let pos = v.state.position;
            log_state(&mut self.log, t, v);
            match &mut v.mode {
                Mode::Follow { start, trajectory, regions, .. } => {
                    let (p, _, _) = trajectory.sample(t - *start);
                    self.tracker.max_tracking = self.tracker.max_tracking.max(p.distance(pos));
                    for r in regions.clone() {
                        if v.completed.contains(&r) {
                            continue;
                        }
                        let Some(region) = self.scenario.region(r) else { continue };
                        let c = v.dwell.entry(r).or_insert(0);
                        if region.contains(pos) {
                            *c += 1;
                        } else {
                            *c = 0;
                        }
                        if (*c as f64 - 1.0) * dt >= region.dwell_time - 1e-9 {
                            v.completed.insert(r);
                            self.log.metrics.region_completion.entry(r).or_insert(t);
                            self.log.push_event(t, "region_complete", serde_json::json!({ "uav": id, "region": r }));
                        }
                    }
                }
                Mode::Transit { leg, heading, station } => {
                    if t - leg.start >= leg.duration() {
                        v.mode = Mode::Descend {
                            x: leg.to.x,
                            y: leg.to.y,
                            z0: leg.to.z,
                            start: t,
                            speed: self.scenario.sim.landing_speed,
                            heading: *heading,
                            station: *station,
                        };
                    }
                }
                Mode::Descend { station, .. } => {
                    if pos.z <= LANDED_ALTITUDE {
                        let station = *station;
                        v.state.position.z = 0.0;
                        v.state.velocity = Vec3::ZERO;
                        v.state.acceleration = Vec3::ZERO;
                        if v.state.battery_energy > 0.0 {
                            v.state.status = UavStatus::Landed;
                        }
                        v.mode = Mode::Landed { station, since: t };
                        self.log.push_event(t, "landed", serde_json::json!({ "uav": id, "station": station }));
                    }
                }
                Mode::Landed { station: Some(st), since }
                    if t - *since >= self.scenario.sim.recharge_time - 1e-9 => {
                        let st = *st;
                        v.state.battery_energy = v.initial_energy;
                        v.state.status = UavStatus::Active;
                        v.mode = Mode::Hover { position: v.state.position, heading: v.state.heading };
                        self.log.metrics.recharges += 1;
                        self.log.push_event(t, "recharged", serde_json::json!({ "uav": id, "station": st }));
                    }
                _ => {}
            }
            if v.state.battery_energy <= 0.0 && self.tracker.depleted.insert(id) {
                self.log.metrics.safety_violations.push(SafetyViolation { kind: "battery_depleted".into(), time: t, uavs: vec![id], value: 0.0 });
            }
        }
        self.safety_metrics(t);
        if self.step % self.stride.snapshot == self.stride.snapshot - 1 {
            let snap = self.snapshot_at(t);
            self.log.snapshots.push(serde_json::to_string(&snap).expect("snapshot serialises"));
            self.last_snapshot = Some(snap);
        }
    }

    fn safety_metrics(&mut self, t: f64) {
        let sep = self.scenario.separation_min - SAFETY_TOLERANCE;
        let margin = self.scenario.obstacle_margin - SAFETY_TOLERANCE;
        let airborne: Vec<&Vehicle> = self.vehicles.iter().filter(|v| v.state.status != UavStatus::Landed).collect();
        for (a, va) in airborne.iter().enumerate() {
            let c = distance_to_obstacles(va.state.position, &self.scenario.towers, &self.scenario.wires);
            if c.is_finite() && self.tracker.min_clear.is_none_or(|m| c < m.0) {
                self.tracker.min_clear = Some((c, t, va.id));
            }
            if c < margin {
                if self.tracker.clear_violation.insert(va.id) {
                    self.log.metrics.safety_violations.push(SafetyViolation { kind: "obstacle_clearance".into(), time: t, uavs: vec![va.id], value: c });
                }
            } else {
                self.tracker.clear_violation.remove(&va.id);
            }
            for vb in &airborne[a + 1..] {
                let d = va.state.position.distance(vb.state.position);
                if self.tracker.min_pair.is_none_or(|m| d < m.0) {
                    self.tracker.min_pair = Some((d, t, va.id, vb.id));
                }
                let key = (va.id, vb.id);
                if d < sep {
                    if self.tracker.pair_violation.insert(key) {
                        self.log.metrics.safety_violations.push(SafetyViolation { kind: "separation".into(), time: t, uavs: vec![va.id, vb.id], value: d });
                    }
                } else {
                    self.tracker.pair_violation.remove(&key);
                }
            }
        }
    }

    /// Public state at time `t`.
    fn snapshot_at(&self, t: f64) -> Snapshot {
        let plan = self.manager.plan();
        let completed = self.manager.completed_regions();
        let assignments = plan
            .assignment
            .iter()
            .map(|(u, ts)| (*u, ts.iter().map(|x| x.label()).collect()))
            .collect();
        let formations = self
            .manager
            .formations()
            .into_iter()
            .map(|(task, worker, geometry, n)| {
                let est = self.manager_workers.get(&worker).copied().unwrap_or_else(|| {
                    self.scenario.worker(worker).map(|w| w.state_at(t)).expect("validated worker")
                });
                FormationSnapshot { task, worker, geometry, slots: formation_slots(&est, &geometry, n) }
            })
            .collect();
        Snapshot {
            time: t,
            vehicles: self
                .vehicles
                .iter()
                .map(|v| VehicleSnapshot {
                    id: v.id,
                    position: v.state.position,
                    velocity: v.state.velocity,
                    heading: v.state.heading,
                    battery_fraction: if v.initial_energy > 0.0 { v.state.battery_energy / v.initial_energy } else { 0.0 },
                    status: v.state.status,
                    task: v.mode.label(),
                })
                .collect(),
            workers: self.workers_at(t),
            formations,
            plan: PlanSummary {
                assignments,
                pending: plan.pending.iter().map(|x| x.label()).collect(),
                completed_regions: completed.into_iter().collect(),
                mission_complete: self.mission_complete(),
            },
            decisions: self.recent.iter().cloned().collect(),
            scene: None,
        }
    }

    /// Current public state (not logged).
    pub fn snapshot(&self) -> Snapshot {
        self.snapshot_at(self.time())
    }

    /// Closes the run: evaluates executed plans and fills the metrics.
    pub fn finish(mut self) -> MissionLog {
        let t_end = self.time();
        let mut executed = Vec::new();
        for r in &self.recorders {
            let mut robustness = None;
            if r.samples[0].len() == r.steps + 1 {
                let trajs: Vec<Trajectory> = r
                    .samples
                    .iter()
                    .map(|s| Trajectory {
                        ts: self.scenario.ts,
                        positions: s.iter().map(|x| x.0).collect(),
                        velocities: s.iter().map(|x| x.1).collect(),
                        accelerations: vec![Vec3::ZERO; r.steps],
                    })
                    .collect();
                if let (Ok(spec), Ok(trace)) =
                    (build_inspection_spec(&r.plan.task, &self.scenario, self.scenario.ts), trajectories_to_trace(&trajs))
                {
                    robustness = CompiledFormula::new(&spec.formula)
                        .and_then(|c| c.evaluate(&trace, 0, Semantics::Exact))
                        .ok();
                }
            }
            executed.push(ExecutedPlan {
                plan_id: r.plan.id,
                start_time: r.plan.start_time,
                uavs: r.plan.task.uav_ids.clone(),
                regions: r.plan.task.region_visits.iter().flatten().map(|v| v.region).collect(),
                planned_robustness: r.plan.robustness,
                executed_robustness: robustness,
                superseded: r.superseded,
            });
        }
        let m = &mut self.log.metrics;
        m.duration = t_end;
        m.master_steps = self.step;
        m.executed_plans = executed;
        m.min_pairwise_distance = self.tracker.min_pair.map(|x| x.0);
        m.min_pairwise_at = self.tracker.min_pair.map(|x| (x.1, x.2, x.3));
        m.min_obstacle_clearance = self.tracker.min_clear.map(|x| x.0);
        m.min_obstacle_clearance_at = self.tracker.min_clear.map(|x| (x.1, x.2));
        let (hits, total) = self.tracker.fov_hits.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        m.fov_samples = total;
        m.fov_fraction = (total > 0).then(|| hits as f64 / total as f64);
        m.fov_per_uav = self.tracker.fov_hits.iter().map(|(u, (h, n))| (*u, *h as f64 / (*n).max(1) as f64)).collect();
        m.max_tracking_error = self.tracker.max_tracking;
        m.mission_complete = self.manager.mission_complete_at().is_some();
        m.mission_complete_time = self.manager.mission_complete_at();
        m.planner_failures = self.manager.planner_failures().to_vec();
        m.safety_task_completion = self.manager.safety_completion();
        self.log.bus_stats = self.bus.stats();
        self.log
    }
}

fn log_state(log: &mut MissionLog, t: f64, v: &Vehicle) {
    log.push_state(t, v.id, &v.state);
}

fn apply_command(v: &mut Vehicle, c: Command, t: f64, (vmax, amax): (f64, f64), scenario: &Scenario) {
    if v.mode.landing() && !matches!(c, Command::Land) {
        return;
    }
    if matches!(v.mode, Mode::Landed { .. }) {
        return;
    }
    let here = v.estimate.position;
    match c {
        Command::FollowTrajectory { start_time, trajectory, headings, regions, .. } => {
            v.mpc.reset();
            for r in &regions {
                v.dwell.insert(*r, 0);
            }
            v.mode = Mode::Follow { start: start_time, trajectory, headings, regions };
        }
        Command::Formation { task, worker, geometry, slot, slots } => {
            let since = match v.mode {
                Mode::Formation { task: t0, slot: s0, since, .. } if t0 == task && s0 == slot => since,
                _ => {
                    v.mpc.reset();
                    t
                }
            };
            let solution = match &v.mode {
                Mode::Formation { solution, .. } => solution.clone(),
                _ => None,
            };
            v.mode = Mode::Formation { task, worker, geometry, slot, slots, since, solution };
        }
        Command::Hover => {
            let r = v.reference(t);
            v.mpc.reset();
            v.mode = Mode::Hover { position: r.position, heading: r.heading };
        }
        Command::Recharge { station, position } => {
            v.mpc.reset();
            let to = Vec3::new(position.x, position.y, here.z.max(position.z));
            let leg = Leg { from: here, to, start: t, v_max: vmax, a_max: amax };
            v.mode = Mode::Transit { leg, heading: v.state.heading, station: Some(station) };
        }
        Command::Land => {
            if v.mode.landing() {
                return;
            }
            v.mpc.reset();
            let to = landing_spot(here, scenario);
            let heading = v.state.heading;
            v.mode = if to.distance(here) > 1e-6 {
                Mode::Transit { leg: Leg { from: here, to, start: t, v_max: vmax.min(1.5), a_max: amax }, heading, station: None }
            } else {
                let speed = scenario.sim.landing_speed;
                Mode::Descend { x: here.x, y: here.y, z0: here.z, start: t, speed, heading, station: None }
            };
        }
    }
}

/// Nearest point at the same altitude whose vertical drop clears every
/// tower and wire footprint.
fn landing_spot(p: Vec3, scenario: &Scenario) -> Vec3 {
    let extra = scenario.obstacle_margin + 1.5;
    let mut q = p;
    for _ in 0..8 {
        let mut moved = false;
        for tw in &scenario.towers {
            let d = Vec3::new(q.x - tw.center.x, q.y - tw.center.y, 0.0);
            let need = tw.radius + extra;
            let r = d.horizontal_norm();
            if r < need {
                let dir = d.normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
                q = Vec3::new(tw.center.x + dir.x * need, tw.center.y + dir.y * need, q.z);
                moved = true;
            }
        }
        for w in &scenario.wires {
            let a = Vec3::new(w.endpoint_a.x, w.endpoint_a.y, 0.0);
            let b = Vec3::new(w.endpoint_b.x, w.endpoint_b.y, 0.0);
            let qp = Vec3::new(q.x, q.y, 0.0);
            let ab = b - a;
            let s = if ab.norm_squared() > 0.0 { ((qp - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
            let closest = a + ab * s;
            let need = w.clearance_radius + extra;
            let off = qp - closest;
            let low = w.endpoint_a.z.min(w.endpoint_b.z) - w.clearance_radius;
            if off.norm() < need && q.z > low {
                let dir = off.normalized().or_else(|| Vec3::new(-ab.y, ab.x, 0.0).normalized()).unwrap_or(Vec3::new(1.0, 0.0, 0.0));
                q = Vec3::new(closest.x + dir.x * need, closest.y + dir.y * need, q.z);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    q
}

/// Runs `scenario` for `duration` seconds of simulated time.
pub fn run(scenario: &Scenario, duration: f64, seed: u64) -> Result<MissionLog, SimError> {
    if !(duration > 0.0) {
        return Err(SimError::Config(format!("duration must be positive, got {duration}")));
    }
    let mut engine = Engine::new(scenario, seed)?;
    for _ in 0..engine.step_count(duration) {
        engine.step();
    }
    Ok(engine.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leg_profile_ends_at_rest() {
        let leg = Leg { from: Vec3::ZERO, to: Vec3::new(9.0, 0.0, 0.0), start: 1.0, v_max: 3.0, a_max: 2.5 };
        assert!((leg.duration() - 4.2).abs() < 1e-12);
        let (p, v, _) = leg.sample(1.0 + 4.2);
        assert!((p.x - 9.0).abs() < 1e-12 && v.norm() < 1e-12);
        let (p, v, _) = leg.sample(1.0 + 2.1);
        assert!((p.x - 4.5).abs() < 1e-9 && (v.x - 3.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_must_divide() {
        let mut s = Scenario::minimal();
        s.sim.manager_period = 0.015;
        assert!(matches!(Engine::new(&s, 0), Err(SimError::Schedule(_))));
    }

    #[test]
    fn landing_spot_leaves_tower_footprint() {
        let mut s = Scenario::minimal();
        s.towers.push(crate::world::Tower { center: Vec3::ZERO, radius: 2.0, height: 10.0, insulators: vec![] });
        let q = landing_spot(Vec3::new(1.0, 0.0, 12.0), &s);
        assert!(q.horizontal_norm() >= 2.0 + s.obstacle_margin);
        assert_eq!(q.z, 12.0);
        let far = Vec3::new(20.0, 0.0, 5.0);
        assert_eq!(landing_spot(far, &s), far);
    }
}
