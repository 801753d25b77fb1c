//! Oracles shared by the integration tests. Nothing here calls into the
//! evaluators or solvers under test; each oracle recomputes its answer from
//! first principles.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lineguard_core::manager::{Task, TaskKind, VehicleView};
use lineguard_core::planner::{plan_inspection, InspectionTask, PlanError, RegionVisit, StartState};
use lineguard_core::scenario::Limits;
use lineguard_core::stl::{LinearPredicate, StlFormula, Trace};
use lineguard_core::world::TargetRegion;
use lineguard_core::{load_scenario, Scenario, UavState, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn scenario(name: &str) -> Scenario {
    load_scenario(scenario_path(name)).expect("shipped scenario loads")
}

// ---------------------------------------------------------------- STL

/// Random formula in negation normal form with at most `depth` operator levels.
pub fn random_formula(rng: &mut ChaCha8Rng, dim: usize, depth: usize) -> StlFormula {
    if depth == 0 || rng.random_bool(0.25) {
        let coefficients = loop {
            let c: Vec<f64> = (0..dim).map(|_| if rng.random_bool(0.7) { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
            if c.iter().any(|x| *x != 0.0) {
                break c;
            }
        };
        return StlFormula::predicate(LinearPredicate::new(coefficients, rng.random_range(-1.5..1.5)));
    }
    match rng.random_range(0..4) {
        0 | 1 => {
            let n = rng.random_range(1..=3);
            let children = (0..n).map(|_| random_formula(rng, dim, depth - 1)).collect();
            if rng.random_bool(0.5) {
                StlFormula::and(children)
            } else {
                StlFormula::or(children)
            }
        }
        op => {
            let a = rng.random_range(0..=3);
            let b = a + rng.random_range(0..=12);
            let child = random_formula(rng, dim, depth - 1);
            if op == 2 {
                StlFormula::globally(a, b, child)
            } else {
                StlFormula::eventually(a, b, child)
            }
        }
    }
}

pub fn horizon(f: &StlFormula) -> usize {
    match f {
        StlFormula::Predicate(_) => 0,
        StlFormula::And(c) | StlFormula::Or(c) => c.iter().map(horizon).max().unwrap_or(0),
        StlFormula::Globally { b, child, .. } | StlFormula::Eventually { b, child, .. } => b + horizon(child),
    }
}

pub fn random_trace(rng: &mut ChaCha8Rng, f: &StlFormula, dim: usize) -> Trace {
    let n = horizon(f) + 1 + rng.random_range(0..4);
    let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    Trace::new(0.1, &samples).unwrap()
}

fn affine(p: &LinearPredicate, s: &[f64]) -> f64 {
    p.coefficients.iter().zip(s).map(|(c, x)| c * x).sum::<f64>() - p.offset
}

/// Boolean satisfaction, written without any quantitative semantics.
pub fn holds(f: &StlFormula, trace: &Trace, k: usize) -> bool {
    match f {
        StlFormula::Predicate(p) => affine(p, trace.sample(k)) > 0.0,
        StlFormula::And(c) => c.iter().all(|g| holds(g, trace, k)),
        StlFormula::Or(c) => c.iter().any(|g| holds(g, trace, k)),
        StlFormula::Globally { a, b, child } => (k + a..=k + b).all(|j| holds(child, trace, j)),
        StlFormula::Eventually { a, b, child } => (k + a..=k + b).any(|j| holds(child, trace, j)),
    }
}

/// Quantitative semantics by direct recursion over every window.
pub fn rho(f: &StlFormula, trace: &Trace, k: usize) -> f64 {
    match f {
        StlFormula::Predicate(p) => affine(p, trace.sample(k)),
        StlFormula::And(c) => c.iter().map(|g| rho(g, trace, k)).fold(f64::INFINITY, f64::min),
        StlFormula::Or(c) => c.iter().map(|g| rho(g, trace, k)).fold(f64::NEG_INFINITY, f64::max),
        StlFormula::Globally { a, b, child } => (k + a..=k + b).map(|j| rho(child, trace, j)).fold(f64::INFINITY, f64::min),
        StlFormula::Eventually { a, b, child } => (k + a..=k + b).map(|j| rho(child, trace, j)).fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn operator_depth(f: &StlFormula) -> usize {
    match f {
        StlFormula::Predicate(_) => 0,
        StlFormula::And(c) | StlFormula::Or(c) => 1 + c.iter().map(operator_depth).max().unwrap_or(0),
        StlFormula::Globally { child, .. } | StlFormula::Eventually { child, .. } => 1 + operator_depth(child),
    }
}

/// Largest operand count over operator nodes, window widths included.
pub fn max_operands(f: &StlFormula) -> usize {
    match f {
        StlFormula::Predicate(_) => 1,
        StlFormula::And(c) | StlFormula::Or(c) => c.iter().map(max_operands).fold(c.len(), usize::max),
        StlFormula::Globally { a, b, child } | StlFormula::Eventually { a, b, child } => (b - a + 1).max(max_operands(child)),
    }
}

/// A random (formula, trace) instance whose robustness is clear of zero, so
/// the Boolean verdict is unambiguous.
pub fn stl_instance(rng: &mut ChaCha8Rng) -> (StlFormula, Trace) {
    loop {
        let dim = rng.random_range(1..=3);
        let depth = rng.random_range(1..=3);
        let f = random_formula(rng, dim, depth);
        let t = random_trace(rng, &f, dim);
        if rho(&f, &t, 0).abs() > 1e-6 {
            return (f, t);
        }
    }
}

// ---------------------------------------------------------------- allocation

/// Rest-to-rest minimum time over distance `d`.
pub fn min_time(d: f64, v: f64, a: f64) -> f64 {
    // accelerate until v or until halfway, whichever comes first
    let ramp = v * v / (2.0 * a);
    if 2.0 * ramp >= d {
        2.0 * (d / a).sqrt()
    } else {
        2.0 * v / a + (d - 2.0 * ramp) / v
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Cheapest feasible route for one vehicle over a task subset, if any.
fn best_route(v: &VehicleView, tasks: &[Task], subset: &[usize], vmax: f64, amax: f64, reserve: f64) -> Option<f64> {
    if subset.is_empty() {
        return Some(0.0);
    }
    if subset.iter().any(|&i| !tasks[i].required.is_subset(&v.state.capabilities)) {
        return None;
    }
    if subset.len() > 1 && subset.iter().any(|&i| matches!(tasks[i].kind, TaskKind::Safety { .. })) {
        return None;
    }
    let work: f64 = subset.iter().map(|&i| tasks[i].duration).sum();
    permutations(subset)
        .into_iter()
        .map(|order| {
            let mut here = v.state.position;
            let mut travel = 0.0;
            for i in order {
                travel += min_time(here.distance(tasks[i].start), vmax, amax);
                here = tasks[i].end;
            }
            travel
        })
        .filter(|travel| v.endurance >= reserve * (travel + work))
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
}

/// Exhaustive optimum over every task-to-vehicle map and visiting order:
/// most tasks assigned, then least total travel time.
pub fn brute_allocation(tasks: &[Task], fleet: &[VehicleView], vmax: f64, amax: f64, reserve: f64) -> (usize, f64) {
    let m = fleet.len();
    let n = tasks.len();
    let mut best = (0usize, 0.0f64);
    let mut found = false;
    let combos = (m + 1).pow(n as u32);
    for code in 0..combos {
        let mut c = code;
        let mut subsets = vec![Vec::new(); m];
        let mut count = 0;
        for i in 0..n {
            let k = c % (m + 1);
            c /= m + 1;
            if k < m {
                subsets[k].push(i);
                count += 1;
            }
        }
        let mut total = 0.0;
        let mut ok = true;
        for (k, s) in subsets.iter().enumerate() {
            match best_route(&fleet[k], tasks, s, vmax, amax, reserve) {
                Some(t) => total += t,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && (!found || count > best.0 || (count == best.0 && total < best.1)) {
            best = (count, total);
            found = true;
        }
    }
    best
}

pub struct AllocationInstance {
    pub tasks: Vec<Task>,
    pub fleet: Vec<VehicleView>,
}

/// Random instance with up to four vehicles and four tasks, mixed
/// capabilities and endurance tight enough to make some routes infeasible.
pub fn allocation_instance(rng: &mut ChaCha8Rng) -> AllocationInstance {
    let caps = ["inspection-camera", "safety-camera"];
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=4);
    let point = |rng: &mut ChaCha8Rng| Vec3::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(2.0..20.0));
    let fleet = (0..m)
        .map(|id| {
            let tags: BTreeSet<String> = caps.iter().filter(|_| rng.random_bool(0.7)).map(|s| s.to_string()).collect();
            let state = UavState::at_rest(point(rng), 1.0).with_capabilities(tags);
            VehicleView { id: id as u32, state, endurance: rng.random_range(20.0..200.0) }
        })
        .collect();
    let tasks = (0..n)
        .map(|i| {
            let start = point(rng);
            let required: BTreeSet<String> = if rng.random_bool(0.3) { BTreeSet::from([caps[rng.random_range(0..2)].to_string()]) } else { BTreeSet::new() };
            Task {
                kind: TaskKind::Inspect { regions: vec![i as u32], deadlines: vec![] },
                required,
                duration: rng.random_range(0.0..20.0),
                start,
                end: start,
            }
        })
        .collect();
    AllocationInstance { tasks, fleet }
}

// ---------------------------------------------------------------- 1-D planning

/// Straight-line toy: one vehicle from rest at x = 0 must be inside
/// x ∈ [lo, hi] (and within ±side of the start in y and z) for `dwell`
/// seconds, finishing by `deadline`.
#[derive(Debug, Clone, Copy)]
pub struct LineFixture {
    pub lo: f64,
    pub hi: f64,
    pub side: f64,
    pub dwell: f64,
    pub deadline: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub ts: f64,
}

pub fn line_fixtures() -> Vec<LineFixture> {
    let base = LineFixture { lo: 9.0, hi: 10.0, side: 1.0, dwell: 0.0, deadline: 3.6, v_max: 3.0, a_max: 2.5, ts: 0.1 };
    vec![
        // the earliest possible entry time: optimum sits exactly on the boundary
        base,
        LineFixture { deadline: 3.8, ..base },
        // rest-to-rest minimum time to the far face
        LineFixture { deadline: 4.2, ..base },
        LineFixture { dwell: 1.0, deadline: 5.4, ..base },
        LineFixture { dwell: 0.5, deadline: 4.5, ..base },
    ]
}

/// Window bounds on the planning grid for the visit clause: dwell rounded
/// up, deadline rounded down.
pub fn visit_steps(f: &LineFixture) -> (usize, usize) {
    let dwell = (f.dwell / f.ts - 1e-9).ceil().max(0.0) as usize;
    let deadline = (f.deadline / f.ts + 1e-9).floor() as usize;
    (dwell, deadline)
}

fn line_robustness(xs: &[f64], f: &LineFixture) -> f64 {
    let (dwell, deadline) = visit_steps(f);
    let margin = |x: f64| (x - f.lo).min(f.hi - x).min(f.side);
    (0..=deadline - dwell)
        .map(|k| (k..=k + dwell).map(|j| margin(xs[j])).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Best robustness over accelerate / coast / brake profiles on the grid.
pub fn bang_bang_optimum(f: &LineFixture) -> f64 {
    let n = visit_steps(f).1;
    let mut best = f64::NEG_INFINITY;
    for level in [1.0, 0.75, 0.5, 0.25] {
        let a_up = level * f.a_max;
        for n1 in 0..=n {
            for n2 in 0..=(n - n1) {
                for n3 in 0..=(n - n1 - n2) {
                    let (mut x, mut v) = (0.0f64, 0.0f64);
                    let mut xs = Vec::with_capacity(n + 1);
                    xs.push(x);
                    let mut ok = true;
                    for k in 0..n {
                        let a = if k < n1 {
                            a_up
                        } else if k < n1 + n2 {
                            0.0
                        } else if k < n1 + n2 + n3 {
                            -f.a_max
                        } else {
                            0.0
                        };
                        x += v * f.ts + 0.5 * a * f.ts * f.ts;
                        v += a * f.ts;
                        if v.abs() > f.v_max + 1e-9 {
                            ok = false;
                            break;
                        }
                        xs.push(x);
                    }
                    if ok {
                        best = best.max(line_robustness(&xs, f));
                    }
                }
            }
        }
    }
    best
}

/// The fixture as a planning problem: scenario, task and limits.
pub fn line_problem(f: &LineFixture) -> (Scenario, InspectionTask, Limits) {
    let start = Vec3::new(0.0, 0.0, 5.0);
    let center = Vec3::new(0.5 * (f.lo + f.hi), 0.0, 5.0);
    let mut sc = Scenario::minimal();
    sc.fleet[0].initial.position = start;
    sc.regions = vec![TargetRegion {
        id: 0,
        center,
        half_extents: Vec3::new(0.5 * (f.hi - f.lo), f.side, f.side),
        dwell_time: f.dwell,
        viewpoint: center,
    }];
    sc.ts = f.ts;
    let task = InspectionTask {
        uav_ids: vec![0],
        starts: vec![StartState { position: start, velocity: Vec3::ZERO, heading: 0.0 }],
        region_visits: vec![vec![RegionVisit { region: 0, deadline: f.deadline }]],
        horizon: f.deadline,
        separation_min: sc.separation_min,
    };
    let limits = Limits { v_max: Vec3::new(f.v_max, f.v_max, f.v_max), a_max: Vec3::new(f.a_max, f.a_max, f.a_max) };
    (sc, task, limits)
}

/// Achieved exact robustness whether or not the planner declared success.
pub fn planned_robustness(sc: &Scenario, task: &InspectionTask, limits: &Limits) -> f64 {
    match plan_inspection(task, sc, limits, sc.ts) {
        Ok(p) => p.robustness,
        Err(PlanError::Unsatisfied { robustness, .. }) => robustness,
        Err(e) => panic!("planner error: {e}"),
    }
}
