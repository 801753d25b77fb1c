//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists built from the core types' JSON form.

use std::collections::BTreeSet;

use lineguard_core::manager::{self, estimate_endurance, Task, VehicleView};
use lineguard_core::mpc;
use lineguard_core::planner::{self, InspectionTask, PlanError, RegionVisit, StartState};
use lineguard_core::sim;
use lineguard_core::stl::{self, LinearPredicate, StlFormula, Trace};
use lineguard_core::world::{FormationGeometry, WorkerState};
use lineguard_core::Vec3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn vec3(p: (f64, f64, f64)) -> Vec3 {
    Vec3::new(p.0, p.1, p.2)
}

/// A validated-on-demand mission scenario.
#[pyclass(name = "Scenario", module = "lineguard", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: lineguard_core::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        lineguard_core::load_scenario(path).map(|inner| PyScenario { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lineguard_core::parse_scenario(text).map(|inner| PyScenario { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn minimal() -> Self {
        PyScenario { inner: lineguard_core::Scenario::minimal() }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Violated invariants as human-readable strings; empty when valid.
    fn validate(&self) -> Vec<String> {
        lineguard_core::validate_scenario(&self.inner).iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn uav_ids(&self) -> Vec<u32> {
        self.inner.fleet.iter().map(|m| m.id).collect()
    }

    #[getter]
    fn region_ids(&self) -> Vec<u32> {
        self.inner.regions.iter().map(|r| r.id).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, {} uavs, {} regions)", self.inner.name, self.inner.fleet.len(), self.inner.regions.len())
    }
}

/// Signal temporal logic formula over linear predicates.
#[pyclass(name = "Formula", module = "lineguard", from_py_object)]
#[derive(Clone)]
struct PyFormula {
    inner: StlFormula,
}

fn trace(samples: Vec<Vec<f64>>, ts: f64) -> PyResult<Trace> {
    Trace::new(ts, &samples).map_err(value_err)
}

#[pymethods]
impl PyFormula {
    /// `coefficients . x - offset >= 0`
    #[staticmethod]
    fn predicate(coefficients: Vec<f64>, offset: f64) -> Self {
        PyFormula { inner: StlFormula::predicate(LinearPredicate::new(coefficients, offset)) }
    }

    #[staticmethod]
    fn all(children: Vec<PyFormula>) -> Self {
        PyFormula { inner: StlFormula::and(children.into_iter().map(|c| c.inner).collect()) }
    }

    #[staticmethod]
    fn any(children: Vec<PyFormula>) -> Self {
        PyFormula { inner: StlFormula::or(children.into_iter().map(|c| c.inner).collect()) }
    }

    #[staticmethod]
    fn globally(a: usize, b: usize, child: PyFormula) -> Self {
        PyFormula { inner: StlFormula::globally(a, b, child.inner) }
    }

    #[staticmethod]
    fn eventually(a: usize, b: usize, child: PyFormula) -> Self {
        PyFormula { inner: StlFormula::eventually(a, b, child.inner) }
    }

    #[pyo3(signature = (samples, ts = 0.1, k = 0))]
    fn robustness(&self, samples: Vec<Vec<f64>>, ts: f64, k: usize) -> PyResult<f64> {
        stl::robustness(&self.inner, &trace(samples, ts)?, k).map_err(value_err)
    }

    #[pyo3(signature = (samples, kappa, ts = 0.1, k = 0))]
    fn smooth_robustness(&self, samples: Vec<Vec<f64>>, kappa: f64, ts: f64, k: usize) -> PyResult<f64> {
        stl::smooth_robustness(&self.inner, &trace(samples, ts)?, k, kappa).map_err(value_err)
    }

    /// Smooth robustness and its gradient, one row per sample.
    #[pyo3(signature = (samples, kappa, ts = 0.1, k = 0))]
    fn gradient(&self, samples: Vec<Vec<f64>>, kappa: f64, ts: f64, k: usize) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let tr = trace(samples, ts)?;
        let g = stl::smooth_robustness_gradient(&self.inner, &tr, k, kappa).map_err(value_err)?;
        Ok((g.value, g.gradient.chunks(tr.dim()).map(<[f64]>::to_vec).collect()))
    }

    fn __repr__(&self) -> String {
        self.inner.to_string()
    }
}

/// Plans trajectories visiting `assignments[uav]` regions by `deadline`
/// seconds, starting from the scenario's initial states. Returns the plan as a
/// dict; an unsatisfiable task returns the best attempt with `success` false.
#[pyfunction]
#[pyo3(signature = (scenario, assignments, deadline, horizon = None))]
fn plan_inspection(
    py: Python<'_>,
    scenario: &PyScenario,
    assignments: Vec<(u32, Vec<u32>)>,
    deadline: f64,
    horizon: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let sc = &scenario.inner;
    let mut starts = Vec::new();
    for (id, _) in &assignments {
        let m = sc.member(*id).ok_or_else(|| PyValueError::new_err(format!("unknown vehicle {id}")))?;
        starts.push(StartState { position: m.initial.position, velocity: m.initial.velocity, heading: m.initial.heading });
    }
    let task = InspectionTask {
        uav_ids: assignments.iter().map(|(id, _)| *id).collect(),
        starts,
        region_visits: assignments.iter().map(|(_, rs)| rs.iter().map(|&region| RegionVisit { region, deadline }).collect()).collect(),
        horizon: horizon.unwrap_or(deadline),
        separation_min: sc.separation_min,
    };
    let result = py.detach(|| planner::plan_inspection(&task, sc, &sc.limits, sc.ts));
    match result {
        Ok(plan) => to_py(py, &plan),
        Err(PlanError::Unsatisfied { best, .. }) => to_py(py, &*best),
        Err(e) => Err(value_err(e)),
    }
}

/// Assigns `tasks` (dicts in the task JSON form) to the scenario fleet at its
/// initial state.
#[pyfunction]
#[pyo3(signature = (scenario, tasks, time = 0.0))]
fn allocate(py: Python<'_>, scenario: &PyScenario, tasks: &Bound<'_, PyAny>, time: f64) -> PyResult<Py<PyAny>> {
    let tasks: Vec<Task> = from_py(py, tasks)?;
    let sc = &scenario.inner;
    let fleet: Vec<VehicleView> = sc
        .fleet
        .iter()
        .map(|m| VehicleView { id: m.id, state: m.initial.clone(), endurance: estimate_endurance(&m.initial, m.discharge_rate) })
        .collect();
    let plan = manager::allocate(&tasks, &fleet, sc, time).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &plan)
}

/// Inspection task covering `regions` in one dwell sequence.
#[pyfunction]
#[pyo3(signature = (scenario, regions, required = Vec::new()))]
fn inspection_task(py: Python<'_>, scenario: &PyScenario, regions: Vec<u32>, required: Vec<String>) -> PyResult<Py<PyAny>> {
    if regions.is_empty() {
        return Err(PyValueError::new_err("at least one region is required"));
    }
    let sc = &scenario.inner;
    let found: Vec<_> = regions
        .iter()
        .map(|r| sc.region(*r).ok_or_else(|| PyValueError::new_err(format!("unknown region {r}"))))
        .collect::<PyResult<_>>()?;
    let task = Task {
        kind: manager::TaskKind::Inspect { regions: regions.clone(), deadlines: vec![] },
        required: required.into_iter().collect::<BTreeSet<_>>(),
        duration: found.iter().map(|r| r.dwell_time).sum(),
        start: found[0].viewpoint,
        end: found[found.len() - 1].viewpoint,
    };
    to_py(py, &task)
}

/// Minimum rest-to-rest time over a straight segment.
#[pyfunction]
fn travel_time(a: (f64, f64, f64), b: (f64, f64, f64), v_max: f64, a_max: f64) -> f64 {
    manager::travel_time(vec3(a), vec3(b), v_max, a_max)
}

/// Formation slot poses `(position, heading)` around a worker.
#[pyfunction]
#[pyo3(signature = (worker, distance, azimuth_center, elevation, inter_uav_angle, count, worker_velocity = (0.0, 0.0, 0.0)))]
fn formation_slots(
    worker: (f64, f64, f64),
    distance: f64,
    azimuth_center: f64,
    elevation: f64,
    inter_uav_angle: f64,
    count: usize,
    worker_velocity: (f64, f64, f64),
) -> Vec<((f64, f64, f64), f64)> {
    let w = WorkerState { id: 0, position: vec3(worker), velocity: vec3(worker_velocity) };
    let g = FormationGeometry { distance, azimuth_center, elevation, inter_uav_angle };
    mpc::formation_slots(&w, &g, count).into_iter().map(|s| ((s.position.x, s.position.y, s.position.z), s.heading)).collect()
}

/// Runs the closed-loop simulation and returns its metrics; log files are
/// written to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (scenario, duration = None, seed = None, out_dir = None))]
fn run(py: Python<'_>, scenario: &PyScenario, duration: Option<f64>, seed: Option<u64>, out_dir: Option<String>) -> PyResult<Py<PyAny>> {
    let sc = &scenario.inner;
    let log = py
        .detach(|| sim::run(sc, duration.unwrap_or(sc.sim.duration), seed.unwrap_or(sc.seed)))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(dir) = out_dir {
        log.write_to(&dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    to_py(py, &log.metrics)
}

#[pymodule]
fn lineguard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyFormula>()?;
    m.add_function(wrap_pyfunction!(plan_inspection, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(inspection_task, m)?)?;
    m.add_function(wrap_pyfunction!(travel_time, m)?)?;
    m.add_function(wrap_pyfunction!(formation_slots, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
