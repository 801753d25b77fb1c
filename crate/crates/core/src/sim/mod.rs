//! Deterministic fixed-step simulation: vehicle plant with actuation lag and
//! battery, trajectory tracking, noisy sensing, the message bus and the
//! mission loop tying the components together.

pub mod bus;
pub mod engine;
pub mod log;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::mpc::Control;
use crate::world::{UavState, UavStatus, Vec3};

pub use bus::{Bus, BusConfig, BusError, BusStats, Delivery, TopicConfig};
pub use engine::{run, Engine, Message, SimError};
pub use log::{Metrics, MissionLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Time constant of the first-order lag from commanded to actual acceleration.
    pub lag: f64,
    /// Hardware acceleration clamp per axis.
    pub a_max_clamp: f64,
    pub yaw_rate_limit: f64,
    /// Battery power per m/s² of actual acceleration, in W.
    pub accel_power_coeff: f64,
    /// Hover power in W; filled from the fleet member's discharge rate.
    #[serde(skip)]
    pub idle_power: f64,
    /// Multiplier on the whole drain; raised by battery anomalies.
    #[serde(skip, default = "one")]
    pub drain_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams { lag: 0.15, a_max_clamp: 6.0, yaw_rate_limit: 2.0, accel_power_coeff: 2.0, idle_power: 0.0, drain_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerGains {
    pub kp: f64,
    pub kv: f64,
    pub k_yaw: f64,
    pub a_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for TrackerGains {
    fn default() -> Self {
        TrackerGains { kp: 6.0, kv: 4.5, k_yaw: 3.0, a_max: 6.0, yaw_rate_max: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingParams {
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub sigma_worker: f64,
}

impl Default for SensingParams {
    fn default() -> Self {
        SensingParams { sigma_pos: 0.03, sigma_vel: 0.03, sigma_worker: 0.1 }
    }
}

/// Master step and component periods, all in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub dt: f64,
    pub tracker_period: f64,
    pub controller_period: f64,
    pub manager_period: f64,
    pub telemetry_period: f64,
    pub worker_sense_period: f64,
    pub snapshot_period: f64,
    pub duration: f64,
    /// Formation time excluded from the field-of-view statistic.
    pub fov_transient: f64,
    pub recharge_time: f64,
    pub landing_speed: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 0.01,
            tracker_period: 0.01,
            controller_period: 0.1,
            manager_period: 1.0,
            telemetry_period: 0.1,
            worker_sense_period: 0.1,
            snapshot_period: 0.1,
            duration: 300.0,
            fov_transient: 5.0,
            recharge_time: 20.0,
            landing_speed: 1.0,
        }
    }
}

/// Tracking reference at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub heading: f64,
    /// Feed-forward heading rate.
    #[serde(default)]
    pub yaw_rate: f64,
}

impl Reference {
    pub fn hold(position: Vec3, heading: f64) -> Self {
        Reference { position, velocity: Vec3::ZERO, acceleration: Vec3::ZERO, heading, yaw_rate: 0.0 }
    }
}

fn clamp_axes(v: Vec3, limit: f64) -> Vec3 {
    v.map(|x| x.clamp(-limit, limit))
}

/// Advances the vehicle by `dt`. Actual acceleration follows the clamped
/// command through a first-order lag, integrated in closed form; heading
/// follows the clamped yaw rate. Depleted or landed vehicles do not move.
pub fn plant_step(state: &UavState, command: &Control, params: &PlantParams, dt: f64) -> UavState {
    let mut next = state.clone();
    if state.status == UavStatus::Landed || state.battery_energy <= 0.0 {
        return next;
    }
    let u = clamp_axes(command.acceleration, params.a_max_clamp);
    let tau = params.lag;
    let e = fmath::exp(-dt / tau);
    let da = state.acceleration - u;
    next.acceleration = u + da * e;
    next.velocity = state.velocity + u * dt + da * (tau * (1.0 - e));
    next.position = state.position + state.velocity * dt + u * (0.5 * dt * dt) + da * (tau * (dt - tau * (1.0 - e)));
    let r = command.yaw_rate.clamp(-params.yaw_rate_limit, params.yaw_rate_limit);
    next.heading = fmath::wrap_angle(state.heading + r * dt);
    next.heading_rate = r;
    let power = params.idle_power + params.accel_power_coeff * next.acceleration.norm();
    next.battery_energy = (state.battery_energy - params.drain_factor * power * dt).max(0.0);
    if next.battery_energy == 0.0 {
        next.status = UavStatus::Failed;
    }
    next
}

/// Flat-output tracking law with per-axis acceleration and yaw-rate clamps.
pub fn track(reference: &Reference, state: &UavState, gains: &TrackerGains) -> Control {
    let a = reference.acceleration
        + (reference.velocity - state.velocity) * gains.kv
        + (reference.position - state.position) * gains.kp;
    let yaw = reference.yaw_rate + gains.k_yaw * fmath::wrap_angle(reference.heading - state.heading);
    Control { acceleration: clamp_axes(a, gains.a_max), yaw_rate: yaw.clamp(-gains.yaw_rate_max, gains.yaw_rate_max) }
}

/// Gaussian perturbation of position and velocity; heading and battery are exact.
pub fn sense<R: Rng + ?Sized>(state: &UavState, sigma_pos: f64, sigma_vel: f64, rng: &mut R) -> UavState {
    let mut est = state.clone();
    est.position = state.position + gaussian3(sigma_pos, rng);
    est.velocity = state.velocity + gaussian3(sigma_vel, rng);
    est
}

pub(crate) fn gaussian3<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Vec3 {
    if sigma <= 0.0 {
        return Vec3::ZERO;
    }
    let n = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}
