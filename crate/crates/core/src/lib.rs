//! Multi-UAV power-line inspection and worker-safety mission stack.
//!
//! Signal temporal logic planning for inspection, perception-aware MPC for
//! worker safety formations, a cognitive task manager and a deterministic
//! simulator with a lossy message bus.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops
// mirror the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod fmath;
pub mod gateway;
pub mod manager;
pub mod mpc;
pub mod planner;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod stl;
pub mod world;

pub use scenario::{load_scenario, parse_scenario, validate_scenario, Scenario, ScenarioError, Violation};
pub use world::{UavState, UavStatus, Vec3};
