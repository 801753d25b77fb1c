//! Inspection trajectory planning by smoothed-robustness ascent.
//!
//! The mission for `q` vehicles is encoded as one STL conjunction over the
//! stacked per-step signal `[p_0, v_0, p_1, v_1, …]` (position and velocity of
//! each vehicle). Decision variables are the per-axis accelerations on the
//! grid; positions and velocities follow from exact discrete double-integrator
//! rollout, so dynamic consistency holds by construction. Acceleration and
//! velocity bounds are enforced by a sequential clamp on the acceleration
//! sequence after every ascent step.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmath;
use crate::scenario::{Limits, Scenario};
use crate::stl::{CompiledFormula, LinearPredicate, Semantics, StlError, StlFormula, Trace};
use crate::world::{Tower, Vec3, WireSegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionVisit {
    pub region: u32,
    /// Seconds from the start of the plan by which the dwell must be complete.
    pub deadline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartState {
    pub position: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
    #[serde(default)]
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionTask {
    pub uav_ids: Vec<u32>,
    pub starts: Vec<StartState>,
    pub region_visits: Vec<Vec<RegionVisit>>,
    pub horizon: f64,
    pub separation_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    pub iterations: usize,
    pub restarts: usize,
    pub kappa_initial: f64,
    pub kappa_max: f64,
    /// Cruise speed of the initial guess as a fraction of the speed bound.
    pub init_speed_fraction: f64,
    /// Number of faces of the polygon that circumscribes each inflated tower.
    pub tower_faces: usize,
    /// Extra stand-off used when routing the initial guess around towers.
    pub detour_clearance: f64,
    pub restart_noise: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            iterations: 400,
            restarts: 5,
            kappa_initial: 10.0,
            kappa_max: 80.0,
            init_speed_fraction: 0.8,
            tower_faces: 8,
            detour_clearance: 2.5,
            restart_noise: 0.05,
        }
    }
}

/// Uniformly sampled state and control sequence: `positions` and
/// `velocities` hold N+1 samples, `accelerations` the N controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ts: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub accelerations: Vec<Vec3>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.accelerations.len()
    }

    pub fn duration(&self) -> f64 {
        self.ts * self.steps() as f64
    }

    /// Reference (p, v, a) at time `t`, integrating the piecewise-constant
    /// acceleration exactly. Holds the final state past the end.
    pub fn sample(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let n = self.steps();
        if n == 0 || t >= self.duration() {
            let last = self.positions.len() - 1;
            return (self.positions[last], self.velocities[last], Vec3::ZERO);
        }
        let t = t.max(0.0);
        let k = ((t / self.ts) as usize).min(n - 1);
        let tau = t - k as f64 * self.ts;
        let a = self.accelerations[k];
        let v = self.velocities[k] + a * tau;
        let p = self.positions[k] + self.velocities[k] * tau + a * (0.5 * tau * tau);
        (p, v, a)
    }

    /// Largest violation of the discrete double-integrator update.
    pub fn dynamics_defect(&self) -> f64 {
        let ts = self.ts;
        let mut worst: f64 = 0.0;
        for k in 0..self.steps() {
            let a = self.accelerations[k];
            let p = self.positions[k] + self.velocities[k] * ts + a * (0.5 * ts * ts);
            let v = self.velocities[k] + a * ts;
            worst = worst.max((p - self.positions[k + 1]).norm_inf()).max((v - self.velocities[k + 1]).norm_inf());
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingSegment {
    pub start: f64,
    pub end: f64,
    pub heading: f64,
    pub region: Option<u32>,
}

/// Heading reference per grid step, plus the constant-heading visit segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingSchedule {
    pub ts: f64,
    pub values: Vec<f64>,
    pub segments: Vec<HeadingSegment>,
}

impl HeadingSchedule {
    pub fn at(&self, t: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let k = ((t.max(0.0) / self.ts) as usize).min(self.values.len() - 1);
        self.values[k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub iterations: usize,
    pub restarts: usize,
    pub evaluations: usize,
    pub final_smooth_objective: f64,
    pub final_kappa: f64,
    pub best_restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub uav_ids: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
    pub headings: Vec<HeadingSchedule>,
    pub robustness: f64,
    pub success: bool,
    pub diagnostics: PlanDiagnostics,
}

#[derive(Debug, Error, Clone)]
pub enum PlanError {
    #[error("invalid inspection task: {0}")]
    InvalidTask(String),
    #[error("uav {uav}: region {region} has dwell {dwell} s but deadline {deadline} s")]
    InfeasibleWindow { uav: u32, region: u32, deadline: f64, dwell: f64 },
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error("no satisfying trajectory found (robustness {robustness:.4}); most violated: {label} (node {node})")]
    Unsatisfied { best: Box<PlanResult>, node: usize, label: String, robustness: f64 },
}

/// The inspection conjunction together with a label per top-level conjunct.
#[derive(Debug, Clone)]
pub struct InspectionSpec {
    pub formula: StlFormula,
    pub labels: Vec<String>,
    pub steps: usize,
    pub ts: f64,
}

impl InspectionSpec {
    /// Pre-order node id of the `i`-th top-level conjunct.
    pub fn conjunct_node(&self, i: usize) -> usize {
        match &self.formula {
            StlFormula::And(c) => 1 + c[..i].iter().map(|f| f.node_count()).sum::<usize>(),
            _ => 0,
        }
    }

    pub fn conjuncts(&self) -> &[StlFormula] {
        match &self.formula {
            StlFormula::And(c) => c,
            _ => std::slice::from_ref(&self.formula),
        }
    }
}

fn steps_ceil(seconds: f64, ts: f64) -> usize {
    (seconds / ts - 1e-9).ceil().max(0.0) as usize
}

fn steps_floor(seconds: f64, ts: f64) -> usize {
    (seconds / ts + 1e-9).floor().max(0.0) as usize
}

fn pos_index(uav: usize, axis: usize) -> usize {
    6 * uav + axis
}

fn vel_index(uav: usize, axis: usize) -> usize {
    6 * uav + 3 + axis
}

/// In-box conjunction of six halfspaces for vehicle `uav`.
pub fn box_predicates(dim: usize, uav: usize, center: Vec3, half: Vec3) -> StlFormula {
    let mut preds = Vec::with_capacity(6);
    for j in 0..3 {
        let i = pos_index(uav, j);
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(i, 1.0)], center.axis(j) - half.axis(j))));
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(i, -1.0)], -(center.axis(j) + half.axis(j)))));
    }
    StlFormula::and(preds)
}

/// Outside-of-obstacle disjunction: an inflated tower is circumscribed by a
/// regular polygon plus a top cap, a wire by its inflated bounding box.
fn tower_avoidance(dim: usize, uav: usize, tower: &Tower, margin: f64, faces: usize) -> StlFormula {
    let inradius = tower.radius + margin;
    let mut preds = Vec::with_capacity(faces + 1);
    for f in 0..faces {
        let theta = 2.0 * std::f64::consts::PI * f as f64 / faces as f64;
        let (nx, ny) = (fmath::cos(theta), fmath::sin(theta));
        let offset = inradius + nx * tower.center.x + ny * tower.center.y;
        preds.push(StlFormula::predicate(LinearPredicate::sparse(
            dim,
            &[(pos_index(uav, 0), nx), (pos_index(uav, 1), ny)],
            offset,
        )));
    }
    preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(pos_index(uav, 2), 1.0)], tower.top() + margin)));
    StlFormula::or(preds)
}

fn wire_avoidance(dim: usize, uav: usize, wire: &WireSegment, margin: f64) -> StlFormula {
    let r = wire.clearance_radius + margin;
    let lo = wire.endpoint_a.zip_map(wire.endpoint_b, f64::min) - Vec3::new(r, r, r);
    let hi = wire.endpoint_a.zip_map(wire.endpoint_b, f64::max) + Vec3::new(r, r, r);
    let mut preds = Vec::with_capacity(6);
    for j in 0..3 {
        let i = pos_index(uav, j);
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(i, -1.0)], -lo.axis(j))));
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(i, 1.0)], hi.axis(j))));
    }
    StlFormula::or(preds)
}

fn separation(dim: usize, i: usize, j: usize, sep: f64) -> StlFormula {
    let mut preds = Vec::with_capacity(6);
    for ax in 0..3 {
        let (a, b) = (pos_index(i, ax), pos_index(j, ax));
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(a, 1.0), (b, -1.0)], sep)));
        preds.push(StlFormula::predicate(LinearPredicate::sparse(dim, &[(a, -1.0), (b, 1.0)], sep)));
    }
    StlFormula::or(preds)
}

fn validate_task(task: &InspectionTask, scenario: &Scenario) -> Result<(), PlanError> {
    let q = task.uav_ids.len();
    if q == 0 {
        return Err(PlanError::InvalidTask("no vehicles".into()));
    }
    if task.starts.len() != q || task.region_visits.len() != q {
        return Err(PlanError::InvalidTask("starts and region_visits must have one entry per vehicle".into()));
    }
    if !(task.horizon > 0.0) {
        return Err(PlanError::InvalidTask(format!("horizon must be positive, got {}", task.horizon)));
    }
    for (i, visits) in task.region_visits.iter().enumerate() {
        for v in visits {
            if scenario.region(v.region).is_none() {
                return Err(PlanError::InvalidTask(format!("unknown region {}", v.region)));
            }
            if v.deadline > task.horizon + 1e-9 {
                return Err(PlanError::InvalidTask(format!(
                    "uav {}: deadline {} exceeds horizon {}",
                    task.uav_ids[i], v.deadline, task.horizon
                )));
            }
        }
    }
    let mut ids = task.uav_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != q {
        return Err(PlanError::InvalidTask("duplicate vehicle id".into()));
    }
    Ok(())
}

/// Builds the conjunction of visit, obstacle-avoidance and separation
/// requirements for `task`, with labels for every top-level conjunct.
pub fn build_inspection_spec(task: &InspectionTask, scenario: &Scenario, ts: f64) -> Result<InspectionSpec, PlanError> {
    validate_task(task, scenario)?;
    let params = &scenario.planner;
    let q = task.uav_ids.len();
    let dim = 6 * q;
    let steps = steps_ceil(task.horizon, ts).max(1);
    let mut conjuncts = Vec::new();
    let mut labels = Vec::new();

    for (i, visits) in task.region_visits.iter().enumerate() {
        for v in visits {
            let region = scenario.region(v.region).expect("validated");
            let dwell = steps_ceil(region.dwell_time, ts);
            let deadline = steps_floor(v.deadline, ts).min(steps);
            if deadline < dwell {
                return Err(PlanError::InfeasibleWindow {
                    uav: task.uav_ids[i],
                    region: v.region,
                    deadline: v.deadline,
                    dwell: region.dwell_time,
                });
            }
            let inside = box_predicates(dim, i, region.center, region.half_extents);
            conjuncts.push(StlFormula::eventually(0, deadline - dwell, StlFormula::globally(0, dwell, inside)));
            labels.push(format!("visit uav {} region {}", task.uav_ids[i], v.region));
        }
    }

    let margin = scenario.obstacle_margin;
    for i in 0..q {
        let mut avoid: Vec<StlFormula> = scenario
            .towers
            .iter()
            .map(|t| tower_avoidance(dim, i, t, margin, params.tower_faces.max(3)))
            .collect();
        avoid.extend(scenario.wires.iter().map(|w| wire_avoidance(dim, i, w, margin)));
        if avoid.is_empty() {
            continue;
        }
        let body = if avoid.len() == 1 { avoid.pop().unwrap() } else { StlFormula::and(avoid) };
        conjuncts.push(StlFormula::globally(0, steps, body));
        labels.push(format!("obstacle clearance uav {}", task.uav_ids[i]));
    }

    for i in 0..q {
        for j in (i + 1)..q {
            conjuncts.push(StlFormula::globally(0, steps, separation(dim, i, j, task.separation_min)));
            labels.push(format!("separation uav {} / uav {}", task.uav_ids[i], task.uav_ids[j]));
        }
    }

    if conjuncts.is_empty() {
        return Err(PlanError::InvalidTask("task has no regions, obstacles or vehicle pairs to constrain".into()));
    }
    Ok(InspectionSpec { formula: StlFormula::and(conjuncts), labels, steps, ts })
}

/// The inspection STL formula for `task` on the scenario's planning grid.
pub fn build_inspection_formula(task: &InspectionTask, scenario: &Scenario) -> Result<StlFormula, PlanError> {
    Ok(build_inspection_spec(task, scenario, scenario.ts)?.formula)
}

/// Stacks vehicle trajectories into the planner's signal layout.
pub fn trajectories_to_trace(trajectories: &[Trajectory]) -> Result<Trace, StlError> {
    let q = trajectories.len();
    let dim = 6 * q;
    let samples = trajectories.first().map(|t| t.positions.len()).unwrap_or(0);
    let ts = trajectories.first().map(|t| t.ts).unwrap_or(1.0);
    let mut data = vec![0.0; dim * samples];
    for (i, tr) in trajectories.iter().enumerate() {
        for k in 0..samples {
            for j in 0..3 {
                data[k * dim + pos_index(i, j)] = tr.positions[k].axis(j);
                data[k * dim + vel_index(i, j)] = tr.velocities[k].axis(j);
            }
        }
    }
    Trace::from_flat(ts, dim, data)
}

struct Problem<'a> {
    compiled: CompiledFormula,
    q: usize,
    steps: usize,
    ts: f64,
    starts: &'a [StartState],
    v_max: Vec3,
    a_max: Vec3,
}

impl Problem<'_> {
    fn n_vars(&self) -> usize {
        self.q * self.steps * 3
    }

    fn var(&self, uav: usize, k: usize, axis: usize) -> usize {
        (uav * self.steps + k) * 3 + axis
    }

    fn start_velocity(&self, uav: usize) -> Vec3 {
        self.starts[uav].velocity.zip_map(self.v_max, |v, m| v.clamp(-m, m))
    }

    /// Sequential clamp: |a_k| ≤ a_max and |v_{k+1}| ≤ v_max on every axis.
    fn project(&self, acc: &mut [f64]) {
        for i in 0..self.q {
            let v0 = self.start_velocity(i);
            for j in 0..3 {
                let (vm, am) = (self.v_max.axis(j), self.a_max.axis(j));
                let mut v = v0.axis(j);
                for k in 0..self.steps {
                    let idx = self.var(i, k, j);
                    let lo = (-am).max((-vm - v) / self.ts);
                    let hi = am.min((vm - v) / self.ts);
                    let a = acc[idx].clamp(lo.min(hi), hi.max(lo));
                    acc[idx] = a;
                    v += a * self.ts;
                }
            }
        }
    }

    fn rollout(&self, acc: &[f64]) -> Trace {
        let dim = 6 * self.q;
        let n = self.steps + 1;
        let mut data = vec![0.0; dim * n];
        let ts = self.ts;
        for i in 0..self.q {
            let v0 = self.start_velocity(i);
            for j in 0..3 {
                let mut p = self.starts[i].position.axis(j);
                let mut v = v0.axis(j);
                data[pos_index(i, j)] = p;
                data[vel_index(i, j)] = v;
                for k in 0..self.steps {
                    let a = acc[self.var(i, k, j)];
                    p = p + v * ts + 0.5 * a * ts * ts;
                    v += a * ts;
                    data[(k + 1) * dim + pos_index(i, j)] = p;
                    data[(k + 1) * dim + vel_index(i, j)] = v;
                }
            }
        }
        Trace::from_flat(ts, dim, data).expect("non-empty rollout")
    }

    fn value(&self, acc: &[f64], sem: Semantics) -> f64 {
        self.compiled.evaluate(&self.rollout(acc), 0, sem).expect("formula fits the planning grid")
    }

    fn value_and_gradient(&self, acc: &[f64], kappa: f64) -> (f64, Vec<f64>) {
        let trace = self.rollout(acc);
        let eval = self
            .compiled
            .evaluate_with_gradient(&trace, 0, Semantics::Smooth { kappa })
            .expect("formula fits the planning grid");
        let dim = 6 * self.q;
        let g = &eval.gradient;
        let ts = self.ts;
        let mut grad = vec![0.0; self.n_vars()];
        for i in 0..self.q {
            for j in 0..3 {
                let n = self.steps;
                let mut lp = g[n * dim + pos_index(i, j)];
                let mut lv = g[n * dim + vel_index(i, j)];
                for k in (0..n).rev() {
                    grad[self.var(i, k, j)] = lp * 0.5 * ts * ts + lv * ts;
                    let gp = g[k * dim + pos_index(i, j)];
                    let gv = g[k * dim + vel_index(i, j)];
                    lv = gv + lv + lp * ts;
                    lp += gp;
                }
            }
        }
        (eval.value, grad)
    }

    fn trajectories(&self, acc: &[f64]) -> Vec<Trajectory> {
        let trace = self.rollout(acc);
        let dim = 6 * self.q;
        (0..self.q)
            .map(|i| {
                let mut positions = Vec::with_capacity(self.steps + 1);
                let mut velocities = Vec::with_capacity(self.steps + 1);
                for k in 0..=self.steps {
                    let s = &trace.data()[k * dim..(k + 1) * dim];
                    positions.push(Vec3::new(s[pos_index(i, 0)], s[pos_index(i, 1)], s[pos_index(i, 2)]));
                    velocities.push(Vec3::new(s[vel_index(i, 0)], s[vel_index(i, 1)], s[vel_index(i, 2)]));
                }
                let accelerations = (0..self.steps)
                    .map(|k| Vec3::new(acc[self.var(i, k, 0)], acc[self.var(i, k, 1)], acc[self.var(i, k, 2)]))
                    .collect();
                Trajectory { ts: self.ts, positions, velocities, accelerations }
            })
            .collect()
    }
}

/// Straight segment from `a` to `b`, bent along an arc around any tower it
/// would cut through.
fn route_segment(a: Vec3, b: Vec3, towers: &[Tower], clearance: f64) -> Vec<Vec3> {
    for t in towers {
        let c = Vec3::new(t.center.x, t.center.y, 0.0);
        let (ah, bh) = (Vec3::new(a.x, a.y, 0.0) - c, Vec3::new(b.x, b.y, 0.0) - c);
        let d = bh - ah;
        let s = if d.norm_squared() > 1e-12 { (-ah.dot(d) / d.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
        let closest = (ah + d * s).norm();
        let z_at = a.z + (b.z - a.z) * s;
        let radius = t.radius + clearance;
        if closest >= radius || z_at > t.top() + clearance {
            continue;
        }
        let (ta, tb) = (ah.azimuth(), bh.azimuth());
        let delta = fmath::wrap_angle(tb - ta);
        let (ra, rb) = (ah.norm().max(radius), bh.norm().max(radius));
        let pieces = ((delta.abs() / (std::f64::consts::PI / 8.0)).ceil() as usize).max(2);
        let mut out = Vec::with_capacity(pieces + 1);
        for i in 0..=pieces {
            let f = i as f64 / pieces as f64;
            let th = ta + delta * f;
            let r = ra + (rb - ra) * f;
            let z = a.z + (b.z - a.z) * f;
            out.push(Vec3::new(c.x + r * fmath::cos(th), c.y + r * fmath::sin(th), z));
        }
        out[0] = if ah.norm() >= radius { a } else { out[0] };
        if bh.norm() >= radius {
            out[pieces] = b;
        }
        let mut full = vec![a];
        full.extend(out.into_iter().filter(|p| *p != a));
        if *full.last().unwrap() != b {
            full.push(b);
        }
        return full;
    }
    vec![a, b]
}

/// Piecewise-linear keyframed reference: times and positions.
struct Keyframes {
    times: Vec<f64>,
    points: Vec<Vec3>,
}

impl Keyframes {
    fn at(&self, t: f64) -> (Vec3, Vec3) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (self.points[0], Vec3::ZERO);
        }
        for i in 1..n {
            if t <= self.times[i] {
                let dt = self.times[i] - self.times[i - 1];
                if dt <= 0.0 {
                    return (self.points[i], Vec3::ZERO);
                }
                let vel = (self.points[i] - self.points[i - 1]) / dt;
                let f = (t - self.times[i - 1]) / dt;
                return (self.points[i - 1].lerp(self.points[i], f), vel);
            }
        }
        (self.points[n - 1], Vec3::ZERO)
    }
}

fn initial_guess(problem: &Problem, task: &InspectionTask, scenario: &Scenario, params: &PlannerParams) -> Vec<f64> {
    let mut acc = vec![0.0; problem.n_vars()];
    let v_cap = problem.v_max.x.min(problem.v_max.y).min(problem.v_max.z);
    let cruise = params.init_speed_fraction * v_cap;
    let ts = problem.ts;
    let hold_extra = 2.0 * ts + 0.5;
    for (i, visits) in task.region_visits.iter().enumerate() {
        let mut times = vec![0.0];
        let mut points = vec![task.starts[i].position];
        let mut t = 0.0;
        let mut here = task.starts[i].position;
        for v in visits {
            let region = scenario.region(v.region).expect("validated");
            let path = route_segment(here, region.viewpoint, &scenario.towers, scenario.obstacle_margin + params.detour_clearance);
            let length: f64 = path.windows(2).map(|w| w[0].distance(w[1])).sum();
            let available = v.deadline - region.dwell_time - hold_extra / 2.0 - t;
            let speed = if available > 0.0 { (length / available).clamp(cruise, v_cap) } else { v_cap };
            for w in path.windows(2) {
                t += w[0].distance(w[1]) / speed.max(1e-6);
                times.push(t);
                points.push(w[1]);
            }
            t += region.dwell_time + hold_extra;
            times.push(t);
            points.push(region.viewpoint);
            here = region.viewpoint;
        }
        let keys = Keyframes { times, points };
        // critically damped tracking of the keyframed reference
        let (kp, kd) = (4.0, 4.0);
        let mut p = task.starts[i].position;
        let mut vel = problem.start_velocity(i);
        for k in 0..problem.steps {
            let tk = k as f64 * ts;
            let (r, rd) = keys.at(tk + ts);
            let a_cmd = (r - p) * kp + (rd - vel) * kd;
            for j in 0..3 {
                let (vm, am) = (problem.v_max.axis(j), problem.a_max.axis(j));
                let v = vel.axis(j);
                let lo = (-am).max((-vm - v) / ts);
                let hi = am.min((vm - v) / ts);
                acc[problem.var(i, k, j)] = a_cmd.axis(j).clamp(lo.min(hi), hi.max(lo));
            }
            let a = Vec3::new(acc[problem.var(i, k, 0)], acc[problem.var(i, k, 1)], acc[problem.var(i, k, 2)]);
            p = p + vel * ts + a * (0.5 * ts * ts);
            vel += a * ts;
        }
    }
    problem.project(&mut acc);
    acc
}

/// Per-vehicle restart noise, keyed by vehicle id so that the draw does not
/// depend on the vehicle's position in the task.
fn perturb(problem: &Problem, base: &[f64], ids: &[u32], seed: u64, restart: usize, scale: f64) -> Vec<f64> {
    let mut out = base.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_B1A5);
        rng.set_stream(((id as u64) << 16) | restart as u64);
        for j in 0..3 {
            let normal = Normal::new(0.0, scale * problem.a_max.axis(j)).expect("finite scale");
            for k in 0..problem.steps {
                out[problem.var(i, k, j)] += normal.sample(&mut rng);
            }
        }
    }
    problem.project(&mut out);
    out
}

struct AscentOutcome {
    iterations: usize,
    evaluations: usize,
    smooth: f64,
}

fn ascend(
    problem: &Problem,
    acc: &mut Vec<f64>,
    kappa: f64,
    iterations: usize,
    best: &mut (f64, Vec<f64>),
) -> AscentOutcome {
    let a_scale = problem.a_max.x.min(problem.a_max.y).min(problem.a_max.z);
    let mut step = 0.5 * a_scale;
    let (mut f, mut g) = problem.value_and_gradient(acc, kappa);
    let mut evaluations = 1;
    let mut done = 0;
    let mut cand = vec![0.0; acc.len()];
    for it in 0..iterations {
        done = it + 1;
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        let mut accepted = false;
        while step > 1e-7 * a_scale {
            for ((c, a), gi) in cand.iter_mut().zip(acc.iter()).zip(&g) {
                *c = a + step * gi / gmax;
            }
            problem.project(&mut cand);
            let fc = problem.value(&cand, Semantics::Smooth { kappa });
            evaluations += 1;
            if fc > f {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(acc, &mut cand);
        let (nf, ng) = problem.value_and_gradient(acc, kappa);
        evaluations += 1;
        f = nf;
        g = ng;
        step = (step * 1.5).min(2.0 * a_scale);
        let exact = problem.value(acc, Semantics::Exact);
        if exact > best.0 {
            best.0 = exact;
            best.1.clone_from(acc);
        }
    }
    AscentOutcome { iterations: done, evaluations, smooth: f }
}

/// Heading references: constant towards the region centre while dwelling,
/// along the planned velocity in between (held below 0.1 m/s).
pub fn heading_reference(task: &InspectionTask, plan: &PlanResult, scenario: &Scenario) -> Vec<HeadingSchedule> {
    plan.uav_ids
        .iter()
        .zip(&plan.trajectories)
        .map(|(id, traj)| {
            let i = task.uav_ids.iter().position(|u| u == id).expect("plan vehicle belongs to task");
            let ts = traj.ts;
            let n = traj.positions.len();
            let mut values = vec![f64::NAN; n];
            let mut segments = Vec::new();
            for v in &task.region_visits[i] {
                let Some(region) = scenario.region(v.region) else { continue };
                let dwell = steps_ceil(region.dwell_time, ts);
                let latest = steps_floor(v.deadline, ts).min(n - 1).saturating_sub(dwell);
                // window start maximising the in-box margin over the dwell
                let mut best = (f64::NEG_INFINITY, 0usize);
                for k in 0..=latest {
                    let m = (k..=(k + dwell).min(n - 1))
                        .map(|s| region.margin(traj.positions[s]))
                        .fold(f64::INFINITY, f64::min);
                    if m > best.0 {
                        best = (m, k);
                    }
                }
                let look = region.center - region.viewpoint;
                let heading = if look.horizontal_norm() > 1e-9 { look.azimuth() } else { continue };
                let (s, e) = (best.1, (best.1 + dwell).min(n - 1));
                for val in &mut values[s..=e] {
                    *val = heading;
                }
                segments.push(HeadingSegment { start: s as f64 * ts, end: e as f64 * ts, heading, region: Some(v.region) });
            }
            let mut held = task.starts[i].heading;
            for k in 0..n {
                if values[k].is_nan() {
                    let v = traj.velocities[k];
                    if v.horizontal_norm() >= 0.1 {
                        held = v.azimuth();
                    }
                    values[k] = held;
                } else {
                    held = values[k];
                }
            }
            HeadingSchedule { ts, values, segments }
        })
        .collect()
}

/// Solves the inspection problem: maximise smoothed robustness of the
/// inspection formula over bounded accelerations, returning dynamically
/// consistent trajectories and heading references.
pub fn plan_inspection(task: &InspectionTask, scenario: &Scenario, limits: &Limits, ts: f64) -> Result<PlanResult, PlanError> {
    if !(ts > 0.0) {
        return Err(PlanError::InvalidTask(format!("sampling period must be positive, got {ts}")));
    }
    if !(limits.v_max.x > 0.0 && limits.v_max.y > 0.0 && limits.v_max.z > 0.0)
        || !(limits.a_max.x > 0.0 && limits.a_max.y > 0.0 && limits.a_max.z > 0.0)
    {
        return Err(PlanError::InvalidTask("velocity and acceleration bounds must be positive".into()));
    }
    validate_task(task, scenario)?;
    // canonical vehicle order so results do not depend on the task's ordering
    let mut order: Vec<usize> = (0..task.uav_ids.len()).collect();
    order.sort_by_key(|&i| task.uav_ids[i]);
    let canon = InspectionTask {
        uav_ids: order.iter().map(|&i| task.uav_ids[i]).collect(),
        starts: order.iter().map(|&i| task.starts[i]).collect(),
        region_visits: order.iter().map(|&i| task.region_visits[i].clone()).collect(),
        horizon: task.horizon,
        separation_min: task.separation_min,
    };
    let spec = build_inspection_spec(&canon, scenario, ts)?;
    let params = &scenario.planner;
    let problem = Problem {
        compiled: CompiledFormula::new(&spec.formula)?,
        q: canon.uav_ids.len(),
        steps: spec.steps,
        ts,
        starts: &canon.starts,
        v_max: limits.v_max,
        a_max: limits.a_max,
    };

    let init = initial_guess(&problem, &canon, scenario, params);
    let mut best = (problem.value(&init, Semantics::Exact), init.clone());
    let mut best_restart = 0;
    let mut iterations = 0;
    let mut evaluations = 1;
    let mut last_smooth = f64::NAN;
    let mut kappa = params.kappa_initial;
    let restarts = params.restarts.max(1);
    for r in 0..restarts {
        kappa = (params.kappa_initial * 2f64.powi(r as i32)).min(params.kappa_max);
        let mut acc = if r == 0 {
            init.clone()
        } else {
            perturb(&problem, &best.1, &canon.uav_ids, scenario.seed, r, params.restart_noise)
        };
        let before = best.0;
        let out = ascend(&problem, &mut acc, kappa, params.iterations, &mut best);
        iterations += out.iterations;
        evaluations += out.evaluations;
        last_smooth = out.smooth;
        if best.0 > before {
            best_restart = r;
        }
    }

    let trajectories = problem.trajectories(&best.1);
    let trace = trajectories_to_trace(&trajectories)?;
    let robustness = CompiledFormula::new(&spec.formula)?.evaluate(&trace, 0, Semantics::Exact)?;
    let mut result = PlanResult {
        uav_ids: canon.uav_ids.clone(),
        trajectories,
        headings: Vec::new(),
        robustness,
        success: robustness > 0.0,
        diagnostics: PlanDiagnostics {
            iterations,
            restarts,
            evaluations,
            final_smooth_objective: last_smooth,
            final_kappa: kappa,
            best_restart,
        },
    };
    result.headings = heading_reference(&canon, &result, scenario);

    // restore the caller's vehicle order
    let mut inverse = vec![0; order.len()];
    for (canon_pos, &orig) in order.iter().enumerate() {
        inverse[orig] = canon_pos;
    }
    result.uav_ids = inverse.iter().map(|&c| result.uav_ids[c]).collect();
    result.trajectories = inverse.iter().map(|&c| result.trajectories[c].clone()).collect();
    result.headings = inverse.iter().map(|&c| result.headings[c].clone()).collect();

    if result.success {
        return Ok(result);
    }
    let mut worst = (f64::INFINITY, 0usize);
    for (i, c) in spec.conjuncts().iter().enumerate() {
        let v = CompiledFormula::new(c)?.evaluate(&trace, 0, Semantics::Exact)?;
        if v < worst.0 {
            worst = (v, i);
        }
    }
    Err(PlanError::Unsatisfied {
        node: spec.conjunct_node(worst.1),
        label: spec.labels[worst.1].clone(),
        robustness: result.robustness,
        best: Box::new(result),
    })
}

/// CSV dump of one vehicle's plan: `t,px,py,pz,vx,vy,vz,ax,ay,az,psi`.
pub fn plan_csv(traj: &Trajectory, headings: &HeadingSchedule) -> String {
    let mut out = String::from("t,px,py,pz,vx,vy,vz,ax,ay,az,psi\n");
    for k in 0..traj.positions.len() {
        let (p, v) = (traj.positions[k], traj.velocities[k]);
        let a = traj.accelerations.get(k).copied().unwrap_or(Vec3::ZERO);
        let psi = headings.values.get(k).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            k as f64 * traj.ts,
            p.x,
            p.y,
            p.z,
            v.x,
            v.y,
            v.z,
            a.x,
            a.y,
            a.z,
            psi
        );
    }
    out
}

/// JSON diagnostics record accompanying the CSV dumps.
pub fn plan_diagnostics_json(plan: &PlanResult) -> serde_json::Value {
    let defects: BTreeMap<String, f64> =
        plan.uav_ids.iter().zip(&plan.trajectories).map(|(id, t)| (id.to_string(), t.dynamics_defect())).collect();
    serde_json::json!({
        "uav_ids": plan.uav_ids,
        "robustness": plan.robustness,
        "success": plan.success,
        "diagnostics": plan.diagnostics,
        "dynamics_defect": defects,
    })
}
