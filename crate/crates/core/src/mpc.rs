//! Perception-aware receding-horizon control for the worker-safety formation.
//!
//! Each vehicle is modelled as a per-axis double integrator driven by
//! piecewise-constant accelerations plus a single-integrator heading. Over W
//! shooting points the controller trades slot tracking (error, its rate and
//! its second derivative), jerk and yaw effort against keeping the worker on
//! the camera axis, subject to kinematic boxes, a worker distance band,
//! neighbour separation and obstacle clearance.
//!
//! The nonconvex parts are handled by sequential linearisation: the bearing
//! errors by Gauss-Newton, distance constraints by first-order expansion around
//! the previous iterate. Each subproblem is a dense QP solved by [`crate::qp`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmath;
use crate::planner::Trajectory;
use crate::qp::{solve_qp, QpError};
use crate::world::{CameraParams, FormationGeometry, Tower, UavState, Vec3, WireSegment, WorkerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub jerk: f64,
    pub yaw_rate: f64,
    pub visibility_horizontal: f64,
    pub visibility_vertical: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights {
            position: 4.0,
            velocity: 1.0,
            acceleration: 0.3,
            jerk: 0.02,
            yaw_rate: 0.2,
            visibility_horizontal: 8.0,
            visibility_vertical: 2.0,
        }
    }
}

impl MpcWeights {
    pub fn all_nonnegative(&self) -> bool {
        [
            self.position,
            self.velocity,
            self.acceleration,
            self.jerk,
            self.yaw_rate,
            self.visibility_horizontal,
            self.visibility_vertical,
        ]
        .iter()
        .all(|w| *w >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcParams {
    pub horizon: f64,
    pub shooting_points: usize,
    pub weights: MpcWeights,
    pub d_min: f64,
    pub d_max: f64,
    pub yaw_rate_max: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub replan_period: f64,
    /// Time constant of the worker position low-pass.
    pub worker_filter_tau: f64,
    #[serde(skip)]
    pub separation_min: f64,
    #[serde(skip)]
    pub obstacle_margin: f64,
    #[serde(skip)]
    pub v_max: Vec3,
    #[serde(skip)]
    pub a_max: Vec3,
}

impl Default for MpcParams {
    fn default() -> Self {
        MpcParams {
            horizon: 2.0,
            shooting_points: 20,
            weights: MpcWeights::default(),
            d_min: 2.0,
            d_max: 8.0,
            yaw_rate_max: 1.2,
            max_iterations: 5,
            tolerance: 1e-4,
            replan_period: 0.1,
            worker_filter_tau: 0.5,
            separation_min: 1.0,
            obstacle_margin: 1.0,
            v_max: Vec3::new(3.0, 3.0, 3.0),
            a_max: Vec3::new(2.5, 2.5, 2.5),
        }
    }
}

impl MpcParams {
    pub fn step(&self) -> f64 {
        self.horizon / self.shooting_points as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("worker coincides with the camera centre")]
    DegenerateBearing,
}

/// Bearing of the worker relative to the camera axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionState {
    pub azimuth_error: f64,
    pub elevation_error: f64,
    pub distance: f64,
}

pub fn perception_state(position: Vec3, heading: f64, worker: Vec3, camera: &CameraParams) -> Result<PerceptionState, MpcError> {
    let d = worker - position;
    let distance = d.norm();
    if distance < 1e-9 {
        return Err(MpcError::DegenerateBearing);
    }
    let azimuth = fmath::atan2(d.y, d.x);
    let elevation = fmath::atan2(d.z, d.horizontal_norm());
    Ok(PerceptionState {
        azimuth_error: fmath::wrap_angle(azimuth - heading),
        elevation_error: fmath::wrap_angle(elevation + camera.mount_pitch),
        distance,
    })
}

/// `w_h·e_az² + w_v·e_el²` for the current pose.
pub fn visibility_cost(state: &UavState, worker: &WorkerState, camera: &CameraParams, weights: &MpcWeights) -> Result<f64, MpcError> {
    let z = perception_state(state.position, state.heading, worker.position, camera)?;
    Ok(weights.visibility_horizontal * z.azimuth_error * z.azimuth_error
        + weights.visibility_vertical * z.elevation_error * z.elevation_error)
}

/// Whether the worker lies inside both half-angles of the field of view.
pub fn in_field_of_view(position: Vec3, heading: f64, worker: Vec3, camera: &CameraParams) -> bool {
    match perception_state(position, heading, worker, camera) {
        Ok(z) => z.azimuth_error.abs() <= 0.5 * camera.fov_horizontal && z.elevation_error.abs() <= 0.5 * camera.fov_vertical,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotPose {
    pub position: Vec3,
    pub heading: f64,
}

/// Formation slots on a circle around the worker, each facing the worker.
pub fn formation_slots(worker: &WorkerState, geometry: &FormationGeometry, g: usize) -> Vec<SlotPose> {
    let radius = geometry.distance * fmath::cos(geometry.elevation);
    let height = worker.position.z + geometry.distance * fmath::sin(geometry.elevation);
    (0..g)
        .map(|i| {
            let az = geometry.azimuth_center + (i as f64 - (g as f64 - 1.0) / 2.0) * geometry.inter_uav_angle;
            SlotPose {
                position: Vec3::new(
                    worker.position.x + radius * fmath::cos(az),
                    worker.position.y + radius * fmath::sin(az),
                    height,
                ),
                heading: fmath::wrap_angle(az + std::f64::consts::PI),
            }
        })
        .collect()
}

/// Worker position estimate: first-order low-pass over noisy fixes with a
/// filtered finite-difference velocity for constant-velocity extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerFilter {
    pub tau: f64,
    pub estimate: Option<WorkerState>,
    last_time: f64,
}

impl WorkerFilter {
    pub fn new(tau: f64) -> Self {
        WorkerFilter { tau, estimate: None, last_time: 0.0 }
    }

    pub fn update(&mut self, id: u32, measurement: Vec3, time: f64) -> WorkerState {
        let next = match self.estimate {
            None => WorkerState { id, position: measurement, velocity: Vec3::ZERO },
            Some(prev) => {
                let dt = time - self.last_time;
                if dt <= 0.0 {
                    return prev;
                }
                let alpha = 1.0 - fmath::exp(-dt / self.tau.max(1e-9));
                let position = prev.position + (measurement - prev.position) * alpha;
                let raw_v = (position - prev.position) / dt;
                let velocity = prev.velocity + (raw_v - prev.velocity) * alpha;
                WorkerState { id, position, velocity }
            }
        };
        self.estimate = Some(next);
        self.last_time = time;
        next
    }

    /// Constant-velocity extrapolation `dt` seconds past the last update.
    pub fn predict(&self, dt: f64) -> Option<WorkerState> {
        self.estimate.map(|w| WorkerState { position: w.position + w.velocity * dt, ..w })
    }
}

/// Another vehicle's last published predicted positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborPrediction {
    pub uav: u32,
    pub t0: f64,
    pub h: f64,
    pub positions: Vec<Vec3>,
}

impl NeighborPrediction {
    /// Position at absolute time `t`, held constant outside the horizon.
    pub fn at(&self, t: f64) -> Vec3 {
        if self.positions.len() < 2 || t <= self.t0 {
            return self.positions[0];
        }
        let s = (t - self.t0) / self.h;
        let k = s.floor() as usize;
        if k + 1 >= self.positions.len() {
            return *self.positions.last().unwrap();
        }
        self.positions[k].lerp(self.positions[k + 1], s - k as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub acceleration: Vec3,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Converged,
    IterationLimit,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub action: f64,
    pub perception: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest dynamics defect of the predicted states.
    pub equality: f64,
    /// Largest positive inequality value; zero when all hold.
    pub inequality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub status: MpcStatus,
    pub h: f64,
    pub controls: Vec<Control>,
    /// W+1 states, the first being the initial state.
    pub predicted: Vec<PredictedState>,
    pub perception: Vec<PerceptionState>,
    pub cost: CostBreakdown,
    pub residuals: Residuals,
    pub iterations: usize,
    pub qp_iterations: usize,
    /// Whether the upper distance band was enforced (off while approaching).
    pub band_upper_active: bool,
    pub band_lower_active: bool,
}

impl MpcSolution {
    pub fn first_control(&self) -> Control {
        self.controls[0]
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            ts: self.h,
            positions: self.predicted.iter().map(|s| s.position).collect(),
            velocities: self.predicted.iter().map(|s| s.velocity).collect(),
            accelerations: self.controls.iter().map(|c| c.acceleration).collect(),
        }
    }

    /// Heading reference `t` seconds into the prediction.
    pub fn heading_at(&self, t: f64) -> f64 {
        let k = ((t.max(0.0) / self.h) as usize).min(self.controls.len() - 1);
        let tau = t - k as f64 * self.h;
        fmath::wrap_angle(self.predicted[k].heading + self.controls[k].yaw_rate * tau.min(self.h))
    }

    pub fn yaw_rate_at(&self, t: f64) -> f64 {
        self.controls[((t.max(0.0) / self.h) as usize).min(self.controls.len() - 1)].yaw_rate
    }
}

/// Shifts controls by one interval and repeats the last one; zeros when
/// there is no previous solution.
pub fn advance(previous: Option<&MpcSolution>, w: usize) -> Vec<Control> {
    match previous {
        Some(prev) if !prev.controls.is_empty() => {
            let mut c: Vec<Control> = prev.controls.iter().skip(1).copied().collect();
            c.push(*prev.controls.last().unwrap());
            c.resize(w, *prev.controls.last().unwrap());
            c
        }
        _ => vec![Control { acceleration: Vec3::ZERO, yaw_rate: 0.0 }; w],
    }
}

/// Forward simulation of the flat model under `controls`.
pub fn rollout(current: &UavState, controls: &[Control], h: f64) -> Vec<PredictedState> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    let (mut p, mut v, mut psi) = (current.position, current.velocity, current.heading);
    out.push(PredictedState { position: p, velocity: v, heading: psi });
    for c in controls {
        p = p + v * h + c.acceleration * (0.5 * h * h);
        v += c.acceleration * h;
        psi += c.yaw_rate * h;
        out.push(PredictedState { position: p, velocity: v, heading: psi });
    }
    out
}

/// Environment of one solve.
#[derive(Debug, Clone, Copy)]
pub struct MpcContext<'a> {
    pub worker: &'a WorkerState,
    pub neighbors: &'a [NeighborPrediction],
    pub towers: &'a [Tower],
    pub wires: &'a [WireSegment],
    pub camera: &'a CameraParams,
    pub now: f64,
}

fn obstacle_distance(p: Vec3, towers: &[Tower], wires: &[WireSegment]) -> (f64, Vec3) {
    let mut best = (f64::INFINITY, Vec3::new(0.0, 0.0, 1.0));
    for t in towers {
        let d = t.signed_distance(p);
        if d < best.0 {
            best = (d, t.distance_gradient(p));
        }
    }
    for w in wires {
        let d = w.signed_distance(p);
        if d < best.0 {
            best = (d, w.distance_gradient(p));
        }
    }
    best
}

/// Independent residual check of a control sequence against the nonlinear
/// constraints: re-simulates the model and evaluates every `h ≤ 0` directly.
pub fn check_residuals(
    current: &UavState,
    solution: &MpcSolution,
    ctx: &MpcContext,
    params: &MpcParams,
) -> Residuals {
    let h = solution.h;
    let states = rollout(current, &solution.controls, h);
    let mut eq: f64 = 0.0;
    for (a, b) in states.iter().zip(&solution.predicted) {
        eq = eq.max((a.position - b.position).norm_inf()).max((a.velocity - b.velocity).norm_inf());
        eq = eq.max((a.heading - b.heading).abs());
    }
    let mut ineq: f64 = 0.0;
    for c in &solution.controls {
        for j in 0..3 {
            ineq = ineq.max(c.acceleration.axis(j).abs() - params.a_max.axis(j));
        }
        ineq = ineq.max(c.yaw_rate.abs() - params.yaw_rate_max);
    }
    for (s, st) in states.iter().enumerate().skip(1) {
        let t = ctx.now + s as f64 * h;
        for j in 0..3 {
            ineq = ineq.max(st.velocity.axis(j).abs() - params.v_max.axis(j));
        }
        let w = ctx.worker.position + ctx.worker.velocity * (s as f64 * h);
        let d = st.position.distance(w);
        if solution.band_lower_active {
            ineq = ineq.max(params.d_min - d);
        }
        if solution.band_upper_active {
            ineq = ineq.max(d - params.d_max);
        }
        for n in ctx.neighbors {
            ineq = ineq.max(params.separation_min - st.position.distance(n.at(t)));
        }
        if !ctx.towers.is_empty() || !ctx.wires.is_empty() {
            ineq = ineq.max(params.obstacle_margin - obstacle_distance(st.position, ctx.towers, ctx.wires).0);
        }
    }
    Residuals { equality: eq, inequality: ineq.max(0.0) }
}

/// Affine function of the decision vector.
#[derive(Debug, Clone, Default)]
struct Lin {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Lin {
    fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    fn scaled(&self, s: f64) -> Lin {
        Lin { terms: self.terms.iter().map(|&(i, c)| (i, c * s)).collect(), constant: self.constant * s }
    }

    fn add(mut self, o: &Lin) -> Lin {
        self.terms.extend_from_slice(&o.terms);
        self.constant += o.constant;
        self
    }

    fn offset(mut self, c: f64) -> Lin {
        self.constant += c;
        self
    }
}

struct Layout {
    w: usize,
    h: f64,
}

impl Layout {
    fn n(&self) -> usize {
        4 * self.w
    }

    fn acc(&self, j: usize, i: usize) -> usize {
        j * self.w + i
    }

    fn yaw(&self, i: usize) -> usize {
        3 * self.w + i
    }

    /// Position component `j` at shooting point `s` (1..=W).
    fn position(&self, st: &UavState, j: usize, s: usize) -> Lin {
        let h = self.h;
        let terms = (0..s).map(|i| (self.acc(j, i), h * h * ((s - i) as f64 - 0.5))).collect();
        Lin { terms, constant: st.position.axis(j) + s as f64 * h * st.velocity.axis(j) }
    }

    fn velocity(&self, st: &UavState, j: usize, s: usize) -> Lin {
        Lin { terms: (0..s).map(|i| (self.acc(j, i), self.h)).collect(), constant: st.velocity.axis(j) }
    }

    fn heading(&self, st: &UavState, s: usize) -> Lin {
        Lin { terms: (0..s).map(|i| (self.yaw(i), self.h)).collect(), constant: st.heading }
    }
}

/// ½xᵀGx + aᵀx accumulator.
struct Quadratic {
    g: DMatrix<f64>,
    a: DVector<f64>,
    constant: f64,
}

impl Quadratic {
    fn new(n: usize) -> Self {
        Quadratic { g: DMatrix::zeros(n, n), a: DVector::zeros(n), constant: 0.0 }
    }

    /// Adds `w·(lin)²`.
    fn add_square(&mut self, lin: &Lin, w: f64) {
        if w == 0.0 {
            return;
        }
        for &(i, ci) in &lin.terms {
            for &(k, ck) in &lin.terms {
                self.g[(i, k)] += 2.0 * w * ci * ck;
            }
            self.a[i] += 2.0 * w * lin.constant * ci;
        }
        self.constant += w * lin.constant * lin.constant;
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.g * x)) + self.a.dot(x) + self.constant
    }
}

fn controls_from(x: &[f64], lay: &Layout) -> Vec<Control> {
    (0..lay.w)
        .map(|i| Control {
            acceleration: Vec3::new(x[lay.acc(0, i)], x[lay.acc(1, i)], x[lay.acc(2, i)]),
            yaw_rate: x[lay.yaw(i)],
        })
        .collect()
}

fn vector_from(controls: &[Control], lay: &Layout) -> Vec<f64> {
    let mut x = vec![0.0; lay.n()];
    for (i, c) in controls.iter().enumerate().take(lay.w) {
        for j in 0..3 {
            x[lay.acc(j, i)] = c.acceleration.axis(j);
        }
        x[lay.yaw(i)] = c.yaw_rate;
    }
    x
}

/// Quadratic slot-tracking and effort terms (independent of the iterate).
fn action_cost(current: &UavState, slot: &SlotPose, worker_velocity: Vec3, lay: &Layout, wts: &MpcWeights) -> Quadratic {
    let mut q = Quadratic::new(lay.n());
    for s in 1..=lay.w {
        let target = slot.position + worker_velocity * (s as f64 * lay.h);
        for j in 0..3 {
            q.add_square(&lay.position(current, j, s).offset(-target.axis(j)), wts.position);
            q.add_square(&lay.velocity(current, j, s).offset(-worker_velocity.axis(j)), wts.velocity);
        }
    }
    for i in 0..lay.w {
        for j in 0..3 {
            q.add_square(&Lin { terms: vec![(lay.acc(j, i), 1.0)], constant: 0.0 }, wts.acceleration);
            let prev = if i == 0 {
                Lin { terms: vec![], constant: current.acceleration.axis(j) }
            } else {
                Lin { terms: vec![(lay.acc(j, i - 1), 1.0)], constant: 0.0 }
            };
            let jerk = Lin { terms: vec![(lay.acc(j, i), 1.0)], constant: 0.0 }.add(&prev.scaled(-1.0)).scaled(1.0 / lay.h);
            q.add_square(&jerk, wts.jerk);
        }
        q.add_square(&Lin { terms: vec![(lay.yaw(i), 1.0)], constant: 0.0 }, wts.yaw_rate);
    }
    q
}

fn perception_cost(states: &[PredictedState], ctx: &MpcContext, h: f64, wts: &MpcWeights) -> (f64, Vec<PerceptionState>) {
    let mut total = 0.0;
    let mut out = Vec::with_capacity(states.len().saturating_sub(1));
    for (s, st) in states.iter().enumerate().skip(1) {
        let w = ctx.worker.position + ctx.worker.velocity * (s as f64 * h);
        match perception_state(st.position, st.heading, w, ctx.camera) {
            Ok(z) => {
                total += wts.visibility_horizontal * z.azimuth_error * z.azimuth_error
                    + wts.visibility_vertical * z.elevation_error * z.elevation_error;
                out.push(z);
            }
            Err(_) => out.push(PerceptionState { azimuth_error: 0.0, elevation_error: 0.0, distance: 0.0 }),
        }
    }
    (total, out)
}

/// Braking sequence: decelerate to hover as fast as the bounds allow.
fn braking(current: &UavState, params: &MpcParams, lay: &Layout) -> Vec<Control> {
    let mut v = current.velocity;
    (0..lay.w)
        .map(|_| {
            let a = v.zip_map(params.a_max, |vj, am| (-vj / lay.h).clamp(-am, am));
            v += a * lay.h;
            Control { acceleration: a, yaw_rate: 0.0 }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    current: &UavState,
    controls: Vec<Control>,
    status: MpcStatus,
    iterations: usize,
    qp_iterations: usize,
    band: (bool, bool),
    ctx: &MpcContext,
    slot: &SlotPose,
    params: &MpcParams,
    lay: &Layout,
) -> MpcSolution {
    let predicted = rollout(current, &controls, lay.h);
    let quad = action_cost(current, slot, ctx.worker.velocity, lay, &params.weights);
    let x = DVector::from_vec(vector_from(&controls, lay));
    let (perception, zs) = perception_cost(&predicted, ctx, lay.h, &params.weights);
    let mut sol = MpcSolution {
        status,
        h: lay.h,
        controls,
        predicted,
        perception: zs,
        cost: CostBreakdown { action: quad.value(&x), perception },
        residuals: Residuals { equality: 0.0, inequality: 0.0 },
        iterations,
        qp_iterations,
        band_lower_active: band.0,
        band_upper_active: band.1,
    };
    sol.residuals = check_residuals(current, &sol, ctx, params);
    sol
}

/// One receding-horizon solve. `warm` is the previous solution (advanced by
/// one interval internally).
pub fn solve_step(
    current: &UavState,
    slot: &SlotPose,
    ctx: &MpcContext,
    params: &MpcParams,
    warm: Option<&MpcSolution>,
) -> MpcSolution {
    let w = params.shooting_points.max(2);
    let lay = Layout { w, h: params.step() };
    let n = lay.n();
    let wts = &params.weights;
    let worker0 = ctx.worker.position;
    let d0 = current.position.distance(worker0);
    // approach mode: a band side that is already violated is not enforced
    let band = (d0 >= params.d_min, d0 <= params.d_max);

    let base = action_cost(current, slot, ctx.worker.velocity, &lay, wts);
    let mut x_bar = vector_from(&advance(warm, w), &lay);
    let mut qp_iterations = 0;
    let obstacle_reach = params.obstacle_margin + 2.0 * params.v_max.norm_inf() * params.horizon + 2.0;
    let relevant_obstacle = obstacle_distance(current.position, ctx.towers, ctx.wires).0 < obstacle_reach;

    for iter in 1..=params.max_iterations.max(1) {
        let states = rollout(current, &controls_from(&x_bar, &lay), lay.h);
        let mut q = Quadratic { g: base.g.clone(), a: base.a.clone(), constant: base.constant };
        let mut cons: Vec<Lin> = Vec::new();

        for s in 1..=w {
            let st = &states[s];
            let wk = worker0 + ctx.worker.velocity * (s as f64 * lay.h);
            let pos: Vec<Lin> = (0..3).map(|j| lay.position(current, j, s)).collect();
            let d = st.position - wk;
            let dist = d.norm();
            let rho2 = d.x * d.x + d.y * d.y;

            // Gauss-Newton bearing errors; gradients are w.r.t. the vehicle position
            if rho2 > 1e-6 && dist > 1e-6 {
                let rel = wk - st.position;
                let rho = rho2.sqrt();
                let e_az = fmath::wrap_angle(fmath::atan2(rel.y, rel.x) - st.heading);
                let g_az = [rel.y / rho2, -rel.x / rho2, 0.0];
                let mut lin = lay.heading(current, s).scaled(-1.0);
                for j in 0..3 {
                    lin = lin.add(&pos[j].scaled(g_az[j]));
                }
                let at = lin.eval(&x_bar);
                q.add_square(&lin.offset(e_az - at), wts.visibility_horizontal);

                let r2 = rel.norm_squared();
                let e_el = fmath::wrap_angle(fmath::atan2(rel.z, rho) + ctx.camera.mount_pitch);
                let g_el = [rel.z * rel.x / (rho * r2), rel.z * rel.y / (rho * r2), -rho / r2];
                let mut lin = Lin::default();
                for j in 0..3 {
                    lin = lin.add(&pos[j].scaled(g_el[j]));
                }
                let at = lin.eval(&x_bar);
                q.add_square(&lin.offset(e_el - at), wts.visibility_vertical);
            }

            // distance band, linearised about the iterate
            let nrm = if dist > 1e-9 { d / dist } else { (current.position - worker0).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0)) };
            let mut dl = Lin::default();
            for j in 0..3 {
                dl = dl.add(&pos[j].scaled(nrm.axis(j)));
            }
            let dl = dl.offset(-nrm.dot(wk));
            if band.0 {
                cons.push(dl.clone().offset(-params.d_min));
            }
            if band.1 {
                cons.push(dl.scaled(-1.0).offset(params.d_max));
            }

            let t = ctx.now + s as f64 * lay.h;
            for nb in ctx.neighbors {
                let qn = nb.at(t);
                let dn = st.position - qn;
                let un = dn.normalized().or_else(|| (current.position - nb.at(ctx.now)).normalized()).unwrap_or(Vec3::new(0.0, 0.0, 1.0));
                let mut l = Lin::default();
                for j in 0..3 {
                    l = l.add(&pos[j].scaled(un.axis(j)));
                }
                cons.push(l.offset(-un.dot(qn) - params.separation_min));
            }

            if relevant_obstacle {
                let (sd, grad) = obstacle_distance(st.position, ctx.towers, ctx.wires);
                let mut l = Lin::default();
                for j in 0..3 {
                    l = l.add(&pos[j].scaled(grad.axis(j)));
                }
                let l = l.offset(sd - grad.dot(st.position) - params.obstacle_margin);
                cons.push(l);
            }

            for j in 0..3 {
                let v = lay.velocity(current, j, s);
                cons.push(v.clone().offset(params.v_max.axis(j)));
                cons.push(v.scaled(-1.0).offset(params.v_max.axis(j)));
            }
        }
        for i in 0..w {
            for j in 0..3 {
                let a = Lin { terms: vec![(lay.acc(j, i), 1.0)], constant: 0.0 };
                cons.push(a.clone().offset(params.a_max.axis(j)));
                cons.push(a.scaled(-1.0).offset(params.a_max.axis(j)));
            }
            let r = Lin { terms: vec![(lay.yaw(i), 1.0)], constant: 0.0 };
            cons.push(r.clone().offset(params.yaw_rate_max));
            cons.push(r.scaled(-1.0).offset(params.yaw_rate_max));
        }

        let mut cmat = DMatrix::zeros(n, cons.len());
        let mut bvec = DVector::zeros(cons.len());
        for (k, l) in cons.iter().enumerate() {
            for &(i, c) in &l.terms {
                cmat[(i, k)] += c;
            }
            bvec[k] = -l.constant;
        }
        let sol = match solve_qp(&q.g, &q.a, &cmat, &bvec) {
            Ok(s) => s,
            Err(QpError::Infeasible | QpError::IterationLimit | QpError::NotPositiveDefinite | QpError::Dimension) => {
                let brake = braking(current, params, &lay);
                return finish(current, brake, MpcStatus::Degraded, iter, qp_iterations, band, ctx, slot, params, &lay);
            }
        };
        qp_iterations += sol.iterations;
        let x_new: Vec<f64> = sol.x.iter().copied().collect();
        let step = x_new.iter().zip(&x_bar).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x_bar = x_new;
        let candidate = finish(current, controls_from(&x_bar, &lay), MpcStatus::Converged, iter, qp_iterations, band, ctx, slot, params, &lay);
        if step <= params.tolerance && candidate.residuals.inequality <= params.tolerance {
            return candidate;
        }
        if iter == params.max_iterations.max(1) {
            if candidate.residuals.inequality <= params.tolerance {
                return MpcSolution { status: MpcStatus::IterationLimit, ..candidate };
            }
            let brake = braking(current, params, &lay);
            return finish(current, brake, MpcStatus::Degraded, iter, qp_iterations, band, ctx, slot, params, &lay);
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Per-vehicle controller keeping its own warm start.
#[derive(Debug, Clone)]
pub struct SafetyController {
    pub params: MpcParams,
    pub camera: CameraParams,
    pub last: Option<MpcSolution>,
}

impl SafetyController {
    pub fn new(params: MpcParams, camera: CameraParams) -> Self {
        SafetyController { params, camera, last: None }
    }

    pub fn solve(&mut self, current: &UavState, slot: &SlotPose, ctx: &MpcContext) -> &MpcSolution {
        let sol = solve_step(current, slot, ctx, &self.params, self.last.as_ref());
        self.last = Some(sol);
        self.last.as_ref().unwrap()
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn worker_at(p: Vec3) -> WorkerState {
        WorkerState { id: 0, position: p, velocity: Vec3::ZERO }
    }

    #[test]
    fn three_slot_formation() {
        let g = FormationGeometry { distance: 5.0, azimuth_center: 0.0, elevation: 0.0, inter_uav_angle: 40f64.to_radians() };
        let slots = formation_slots(&worker_at(Vec3::ZERO), &g, 3);
        let expect = [-40.0f64, 0.0, 40.0];
        for (s, az) in slots.iter().zip(expect) {
            let az = az.to_radians();
            assert!((s.position.x - 5.0 * az.cos()).abs() < 1e-12);
            assert!((s.position.y - 5.0 * az.sin()).abs() < 1e-12);
            assert!((s.position.horizontal_norm() - 5.0).abs() < 1e-12);
            assert!((fmath::wrap_angle(s.heading - (az + PI))).abs() < 1e-12);
        }
        let one = formation_slots(&worker_at(Vec3::ZERO), &g, 1);
        assert!((one[0].position - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn slots_translate_with_worker() {
        let g = FormationGeometry { distance: 6.0, azimuth_center: 0.3, elevation: 0.2, inter_uav_angle: 0.5 };
        let delta = Vec3::new(1.5, -2.0, 0.7);
        let a = formation_slots(&worker_at(Vec3::new(1.0, 2.0, 3.0)), &g, 3);
        let b = formation_slots(&worker_at(Vec3::new(1.0, 2.0, 3.0) + delta), &g, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!(((y.position - x.position) - delta).norm_inf() < 1e-12);
            assert_eq!(x.heading, y.heading);
        }
    }

    #[test]
    fn visibility_cost_cases() {
        let cam = CameraParams::default();
        let wts = MpcWeights { visibility_horizontal: 1.0, visibility_vertical: 3.0, ..MpcWeights::default() };
        let st = UavState::at_rest(Vec3::ZERO, 1.0);
        assert_eq!(visibility_cost(&st, &worker_at(Vec3::new(4.0, 0.0, 0.0)), &cam, &wts).unwrap(), 0.0);
        let half = cam.fov_horizontal / 2.0;
        let w = worker_at(Vec3::new(half.cos(), half.sin(), 0.0) * 5.0);
        let c = visibility_cost(&st, &w, &cam, &wts).unwrap();
        assert!((c - half * half).abs() < 1e-12);
        let w2 = worker_at(Vec3::new(half.cos(), -half.sin(), 0.0) * 5.0);
        assert!((visibility_cost(&st, &w2, &cam, &wts).unwrap() - c).abs() < 1e-15);
        assert_eq!(visibility_cost(&st, &worker_at(Vec3::ZERO), &cam, &wts), Err(MpcError::DegenerateBearing));
    }

    #[test]
    fn advance_shifts() {
        let mk = |v: f64| Control { acceleration: Vec3::new(v, 0.0, 0.0), yaw_rate: v };
        let prev = MpcSolution {
            status: MpcStatus::Converged,
            h: 0.1,
            controls: vec![mk(0.0), mk(1.0), mk(2.0)],
            predicted: vec![],
            perception: vec![],
            cost: CostBreakdown { action: 0.0, perception: 0.0 },
            residuals: Residuals { equality: 0.0, inequality: 0.0 },
            iterations: 1,
            qp_iterations: 0,
            band_upper_active: true,
            band_lower_active: true,
        };
        assert_eq!(advance(Some(&prev), 3), vec![mk(1.0), mk(2.0), mk(2.0)]);
        assert_eq!(advance(None, 2), vec![mk(0.0), mk(0.0)]);
        let constant = MpcSolution { controls: vec![mk(1.0); 3], ..prev };
        assert_eq!(advance(Some(&constant), 3), constant.controls);
    }

    #[test]
    fn equilibrium_at_slot() {
        let params = MpcParams::default();
        let cam = CameraParams::default();
        let worker = worker_at(Vec3::new(0.0, 0.0, 5.0));
        let g = FormationGeometry { distance: 5.0, azimuth_center: 0.0, elevation: 0.0, inter_uav_angle: 0.5 };
        let slot = formation_slots(&worker, &g, 1)[0];
        let mut st = UavState::at_rest(slot.position, 1000.0);
        st.heading = slot.heading;
        let ctx = MpcContext { worker: &worker, neighbors: &[], towers: &[], wires: &[], camera: &cam, now: 0.0 };
        let sol = solve_step(&st, &slot, &ctx, &params, None);
        assert_eq!(sol.status, MpcStatus::Converged);
        assert!(sol.controls.iter().all(|c| c.acceleration.norm() <= 1e-3), "{:?}", sol.controls[0]);
        assert!(sol.cost.perception < 1e-9);
        assert!(sol.residuals.inequality <= 1e-4 && sol.residuals.equality <= 1e-6);
    }

    #[test]
    fn worker_filter_converges() {
        let mut f = WorkerFilter::new(0.5);
        let mut est = f.update(0, Vec3::ZERO, 0.0);
        for k in 1..=100 {
            let t = k as f64 * 0.1;
            est = f.update(0, Vec3::new(0.3 * t, 0.0, 0.0), t);
        }
        assert!((est.velocity.x - 0.3).abs() < 0.01);
        assert!((est.position.x - 3.0).abs() < 0.2);
    }

    #[test]
    fn neighbor_prediction_interpolates() {
        let n = NeighborPrediction { uav: 1, t0: 1.0, h: 0.5, positions: vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)] };
        assert_eq!(n.at(0.0), Vec3::ZERO);
        assert_eq!(n.at(1.25).x, 0.5);
        assert_eq!(n.at(9.0).x, 1.0);
    }
}
