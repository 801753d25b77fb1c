//! Shared domain types and geometric queries over the inspection site.
//!
//! World frame is z-up, metres, radians, seconds. Towers are ground-anchored
//! vertical cylinders (the ground plane is not an escape face), wires are
//! capsules, target regions are closed axis-aligned boxes.

use std::collections::BTreeSet;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Component by axis index (0 = x, 1 = y, 2 = z).
    pub fn axis(self, j: usize) -> f64 {
        match j {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {j} out of range"),
        }
    }

    pub fn set_axis(&mut self, j: usize, value: f64) {
        match j {
            0 => self.x = value,
            1 => self.y = value,
            2 => self.z = value,
            _ => panic!("axis index {j} out of range"),
        }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_inf(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn horizontal_norm(self) -> f64 {
        fmath::hypot(self.x, self.y)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-12).then(|| self / n)
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn zip_map(self, o: Vec3, f: impl Fn(f64, f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x, o.x), f(self.y, o.y), f(self.z, o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Vec3, s: f64) -> Vec3 {
        self + (o - self) * s
    }

    /// Azimuth of the horizontal projection, measured from +x towards +y.
    pub fn azimuth(self) -> f64 {
        fmath::atan2(self.y, self.x)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UavStatus {
    Active,
    Failed,
    Landed,
}

/// Per-vehicle truth record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
    #[serde(default)]
    pub acceleration: Vec3,
    #[serde(default)]
    pub heading: f64,
    #[serde(default)]
    pub heading_rate: f64,
    pub battery_energy: f64,
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
    #[serde(default = "default_status")]
    pub status: UavStatus,
}

fn default_status() -> UavStatus {
    UavStatus::Active
}

impl UavState {
    pub fn at_rest(position: Vec3, battery_energy: f64) -> Self {
        UavState {
            position,
            velocity: Vec3::ZERO,
            acceleration: Vec3::ZERO,
            heading: 0.0,
            heading_rate: 0.0,
            battery_energy,
            capabilities: BTreeSet::new(),
            status: UavStatus::Active,
        }
    }

    pub fn with_capabilities<I, S>(mut self, caps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.capabilities = caps.into_iter().map(Into::into).collect();
        self
    }

    pub fn is_active(&self) -> bool {
        self.status == UavStatus::Active
    }
}

pub const CAP_INSPECTION: &str = "inspection-camera";
pub const CAP_SAFETY: &str = "safety-camera";

/// Eye-in-hand pinhole camera. `mount_pitch` is the fixed downward tilt of
/// the optical axis below the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub fov_horizontal: f64,
    pub fov_vertical: f64,
    #[serde(default)]
    pub mount_pitch: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            fov_horizontal: 90f64.to_radians(),
            fov_vertical: 70f64.to_radians(),
            mount_pitch: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    /// Ground point on the tower axis.
    pub center: Vec3,
    pub radius: f64,
    pub height: f64,
    #[serde(default)]
    pub insulators: Vec<Vec3>,
}

impl Tower {
    pub fn top(&self) -> f64 {
        self.center.z + self.height
    }

    /// Exact signed distance to the ground-anchored solid cylinder.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let radial = fmath::hypot(p.x - self.center.x, p.y - self.center.y) - self.radius;
        let vertical = p.z - self.top();
        if radial <= 0.0 && vertical <= 0.0 {
            radial.max(vertical)
        } else {
            fmath::hypot(radial.max(0.0), vertical.max(0.0))
        }
    }

    /// Gradient of [`Tower::signed_distance`] (unit length almost everywhere).
    pub fn distance_gradient(&self, p: Vec3) -> Vec3 {
        let d = Vec3::new(p.x - self.center.x, p.y - self.center.y, 0.0);
        let rho = d.horizontal_norm();
        let radial_dir = if rho > 1e-12 { d / rho } else { Vec3::new(1.0, 0.0, 0.0) };
        let radial = rho - self.radius;
        let vertical = p.z - self.top();
        if radial <= 0.0 && vertical <= 0.0 {
            if radial >= vertical {
                radial_dir
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            }
        } else {
            let r = radial.max(0.0);
            let v = vertical.max(0.0);
            let n = fmath::hypot(r, v);
            radial_dir * (r / n) + Vec3::new(0.0, 0.0, v / n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSegment {
    pub endpoint_a: Vec3,
    pub endpoint_b: Vec3,
    pub clearance_radius: f64,
}

impl WireSegment {
    fn closest_point(&self, p: Vec3) -> Vec3 {
        let ab = self.endpoint_b - self.endpoint_a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 { ((p - self.endpoint_a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        self.endpoint_a + ab * s
    }

    /// Signed distance to the capsule of radius `clearance_radius`.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        p.distance(self.closest_point(p)) - self.clearance_radius
    }

    pub fn distance_gradient(&self, p: Vec3) -> Vec3 {
        (p - self.closest_point(p)).normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub id: u32,
    pub center: Vec3,
    pub half_extents: Vec3,
    #[serde(default)]
    pub dwell_time: f64,
    /// Nominal stand-off point inside the box from which the camera looks
    /// towards `center`.
    pub viewpoint: Vec3,
}

impl TargetRegion {
    pub fn contains(&self, p: Vec3) -> bool {
        in_region(p, self)
    }

    /// Signed box margin: positive inside (distance to the nearest face along
    /// an axis), negative outside.
    pub fn margin(&self, p: Vec3) -> f64 {
        let d = p - self.center;
        let mx = self.half_extents.x - d.x.abs();
        let my = self.half_extents.y - d.y.abs();
        let mz = self.half_extents.z - d.z.abs();
        mx.min(my).min(mz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub id: u32,
    pub position: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
}

/// Scripted worker walk: constant-speed interpolation through waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerScript {
    pub id: u32,
    pub waypoints: Vec<Vec3>,
    #[serde(default = "default_worker_speed")]
    pub speed: f64,
    /// Walk back and forth along the waypoint list instead of stopping at the end.
    #[serde(default)]
    pub patrol: bool,
}

fn default_worker_speed() -> f64 {
    0.3
}

impl WorkerScript {
    fn path_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    fn point_at_arc(&self, mut s: f64) -> (Vec3, Vec3) {
        for w in self.waypoints.windows(2) {
            let len = w[0].distance(w[1]);
            if s <= len && len > 0.0 {
                let dir = (w[1] - w[0]) / len;
                return (w[0] + dir * s, dir * self.speed);
            }
            s -= len;
        }
        (*self.waypoints.last().expect("worker script has waypoints"), Vec3::ZERO)
    }

    /// True worker state at simulation time `t`.
    pub fn state_at(&self, t: f64) -> WorkerState {
        let total = self.path_length();
        if self.waypoints.len() < 2 || total <= 0.0 || self.speed <= 0.0 {
            return WorkerState { id: self.id, position: self.waypoints[0], velocity: Vec3::ZERO };
        }
        let travelled = self.speed * t.max(0.0);
        let (position, velocity) = if self.patrol {
            let period = 2.0 * total;
            let phase = libm::fmod(travelled, period);
            if phase <= total {
                self.point_at_arc(phase)
            } else {
                let (p, v) = self.point_at_arc(period - phase);
                (p, -v)
            }
        } else if travelled >= total {
            (*self.waypoints.last().unwrap(), Vec3::ZERO)
        } else {
            self.point_at_arc(travelled)
        };
        WorkerState { id: self.id, position, velocity }
    }
}

/// Formation around a worker: stand-off distance, viewing azimuth of the
/// formation centre, elevation above the worker and angular spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationGeometry {
    pub distance: f64,
    pub azimuth_center: f64,
    pub elevation: f64,
    pub inter_uav_angle: f64,
}

/// Signed clearance of `p` from the closest tower or wire. Empty obstacle
/// sets yield `f64::INFINITY`.
pub fn distance_to_obstacles(p: Vec3, towers: &[Tower], wires: &[WireSegment]) -> f64 {
    let t = towers.iter().map(|t| t.signed_distance(p));
    let w = wires.iter().map(|w| w.signed_distance(p));
    t.chain(w).fold(f64::INFINITY, f64::min)
}

/// Closed-box membership test.
pub fn in_region(p: Vec3, region: &TargetRegion) -> bool {
    let d = p - region.center;
    d.x.abs() <= region.half_extents.x
        && d.y.abs() <= region.half_extents.y
        && d.z.abs() <= region.half_extents.z
}
