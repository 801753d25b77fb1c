//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any of them fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use lineguard_core::manager::allocate;
use lineguard_core::sim::{Bus, BusConfig, Engine, MissionLog, TopicConfig};
use lineguard_core::stl::{robustness, smooth_robustness, smooth_robustness_gradient};
use lineguard_core::Scenario;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Full-length run of a scenario with its own seed, timing the first plan.
struct Run {
    log: MissionLog,
    first_plan: Option<(f64, Duration)>,
    wall: Duration,
}

fn run_scenario(sc: &Scenario) -> Run {
    let started = Instant::now();
    let mut engine = Engine::new(sc, sc.seed).expect("scenario starts");
    let mut first_plan = None;
    for _ in 0..engine.step_count(sc.sim.duration) {
        engine.step();
        if first_plan.is_none() {
            if let Some(p) = engine.manager().issued_plans().first() {
                first_plan = Some((p.robustness, started.elapsed()));
            }
        }
    }
    let log = engine.finish();
    Run { log, first_plan, wall: started.elapsed() }
}

fn inspection(run: &Run) -> Outcome {
    let m = &run.log.metrics;
    let (rob, plan_wall) = run.first_plan.ok_or("no plan issued")?;
    ensure(rob > 0.0, || format!("planned robustness {rob}"))?;
    ensure(plan_wall.as_secs_f64() <= 60.0, || format!("planning took {plan_wall:?}"))?;
    ensure(run.wall.as_secs_f64() <= 120.0, || format!("mission took {:?}", run.wall))?;
    ensure(m.region_completion.len() == 6, || format!("regions completed: {:?}", m.region_completion))?;
    let pair = m.min_pairwise_distance.unwrap_or(f64::INFINITY);
    let clear = m.min_obstacle_clearance.unwrap_or(f64::INFINITY);
    ensure(pair >= 0.9, || format!("min pairwise distance {pair}"))?;
    ensure(clear >= 0.9, || format!("min obstacle clearance {clear}"))?;
    Ok(format!(
        "robustness {rob:.3}, plan {:.1} s, mission {:.1} s wall, 6/6 regions, pairwise {pair:.2} m, clearance {clear:.2} m",
        plan_wall.as_secs_f64(),
        run.wall.as_secs_f64()
    ))
}

fn safety(run: &Run) -> Outcome {
    let m = &run.log.metrics;
    let fov = m.fov_fraction.ok_or("no field-of-view samples")?;
    ensure(fov >= 0.95, || format!("worker in view {fov}"))?;
    let mut lines = run.log.mpc_csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).expect("mpc.csv column");
    let (status, eq, ineq) = (col("status"), col("equality_residual"), col("inequality_residual"));
    let mut converged = 0;
    let mut worst: f64 = 0.0;
    for row in lines {
        let f: Vec<&str> = row.split(',').collect();
        if f[status] == "converged" {
            converged += 1;
            worst = worst.max(f[eq].parse::<f64>().unwrap()).max(f[ineq].parse::<f64>().unwrap());
        }
    }
    ensure(converged > 0, || "no converged solves".into())?;
    ensure(worst <= 1e-4, || format!("worst converged residual {worst:e}"))?;
    let pair = m.min_pairwise_distance.unwrap_or(f64::INFINITY);
    let clear = m.min_obstacle_clearance.unwrap_or(f64::INFINITY);
    ensure(pair >= 0.9 && clear >= 0.9, || format!("pairwise {pair}, clearance {clear}"))?;
    ensure(m.safety_violations.is_empty(), || format!("{} safety violations", m.safety_violations.len()))?;
    Ok(format!(
        "in view {:.1}%, {converged}/{} converged, worst residual {worst:.1e}, pairwise {pair:.2} m, clearance {clear:.2} m",
        100.0 * fov,
        m.mpc.solves
    ))
}

fn label_region(label: &str) -> Option<u32> {
    label.strip_prefix("region")?.parse().ok()
}

fn cognition(run: &Run) -> Outcome {
    let decisions: Vec<Value> = run.log.decisions.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let endurance = |d: &Value| d["endurance"]["0"].as_f64();
    let idx = decisions.iter().position(|d| endurance(d).is_some_and(|e| e < 60.0)).ok_or("endurance never fell below 60 s")?;
    let crossing = &decisions[idx];
    let t = crossing["time"].as_f64().unwrap();
    ensure(idx > 0 && endurance(&decisions[idx - 1]).is_some_and(|e| e >= 60.0), || "no tick before the crossing".into())?;
    let lands = |d: &Value| d["commands"].as_array().unwrap().iter().any(|c| c["uav"] == 0 && c["command"]["kind"] == "land");
    ensure(crossing["branch"] == "emergency" && lands(crossing), || format!("tick at {t} s: {crossing}"))?;
    ensure(!decisions[..idx].iter().any(lands), || "land issued before the crossing".into())?;

    let done_before: BTreeSet<u32> = run.log.metrics.region_completion.iter().filter(|(_, c)| **c < t).map(|(r, _)| *r).collect();
    let released: BTreeSet<u32> = decisions[idx - 1]["assignments"]["0"]
        .as_array()
        .map(|a| a.iter().filter_map(|l| label_region(l.as_str()?)).filter(|r| !done_before.contains(r)).collect())
        .unwrap_or_default();
    ensure(!released.is_empty(), || "vehicle 0 held no open regions".into())?;
    let reassigned = decisions[idx..]
        .iter()
        .find(|d| {
            let held: BTreeSet<u32> = d["assignments"]["1"]
                .as_array()
                .map(|a| a.iter().filter_map(|l| label_region(l.as_str()?)).collect())
                .unwrap_or_default();
            d["branch"] == "feasibility" && released.is_subset(&held)
        })
        .ok_or_else(|| format!("regions {released:?} never reassigned"))?;
    let m = &run.log.metrics;
    ensure(m.mission_complete && m.region_completion.len() == 6, || format!("mission incomplete: {:?}", m.region_completion))?;
    Ok(format!(
        "land at {t} s (endurance {:.1} s), regions {released:?} reassigned at {} s, complete at {} s",
        endurance(crossing).unwrap(),
        reassigned["time"],
        m.mission_complete_time.unwrap_or(f64::NAN)
    ))
}

fn stl_suite() -> Outcome {
    let mut r = rng(101);
    for i in 0..1000 {
        let (f, t) = stl_instance(&mut r);
        let q = robustness(&f, &t, 0).map_err(|e| e.to_string())?;
        ensure((q > 0.0) == holds(&f, &t, 0), || format!("sign mismatch on instance {i}"))?;
        let bound = operator_depth(&f) as f64 * (max_operands(&f) as f64).ln();
        for kappa in [1.0, 10.0, 100.0, 1000.0] {
            let s = smooth_robustness(&f, &t, 0, kappa).map_err(|e| e.to_string())?;
            ensure((s - q).abs() <= bound / kappa + 1e-12, || format!("smoothing bound broken on instance {i}, kappa {kappa}"))?;
        }
    }
    let (h, kappa) = (1e-5, 10.0);
    let mut worst: f64 = 0.0;
    for i in 0..120 {
        let (f, t) = stl_instance(&mut r);
        let g = smooth_robustness_gradient(&f, &t, 0, kappa).map_err(|e| e.to_string())?;
        let (mut diff, mut scale) = (0.0, 0.0);
        for (j, gj) in g.gradient.iter().enumerate() {
            let mut p = t.clone();
            p.data_mut()[j] += h;
            let mut m = t.clone();
            m.data_mut()[j] -= h;
            let fd = (smooth_robustness(&f, &p, 0, kappa).unwrap() - smooth_robustness(&f, &m, 0, kappa).unwrap()) / (2.0 * h);
            diff += (gj - fd) * (gj - fd);
            scale += fd * fd;
        }
        let rel = diff.sqrt() / scale.sqrt().max(1e-12);
        ensure(rel <= 1e-4, || format!("gradient relative error {rel:e} on instance {i}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("1000 sign and smoothing instances, 120 gradients (worst relative error {worst:.1e})"))
}

fn allocation_oracle() -> Outcome {
    let sc = Scenario::minimal();
    let (v, a) = sc.limits.scalar();
    let reserve = 1.0 + sc.manager.reserve_margin;
    let mut r = rng(102);
    let n = 60;
    for i in 0..n {
        let inst = allocation_instance(&mut r);
        let plan = allocate(&inst.tasks, &inst.fleet, &sc, 0.0).map_err(|e| e.to_string())?;
        let (count, travel) = brute_allocation(&inst.tasks, &inst.fleet, v, a, reserve);
        let assigned: usize = plan.assignment.values().map(Vec::len).sum();
        ensure(assigned == count && (plan.total_travel - travel).abs() <= 1e-9, || {
            format!("instance {i}: {assigned} tasks / {} s vs optimum {count} / {travel} s", plan.total_travel)
        })?;
    }
    Ok(format!("{n} instances up to 4x4 match exhaustive enumeration"))
}

fn line_oracle() -> Outcome {
    let mut gaps = Vec::new();
    for f in line_fixtures() {
        let oracle = bang_bang_optimum(&f);
        let (sc, task, limits) = line_problem(&f);
        let got = planned_robustness(&sc, &task, &limits);
        ensure((got - oracle).abs() <= 0.05, || format!("{f:?}: planner {got}, optimum {oracle}"))?;
        gaps.push(format!("{:.3}", (got - oracle).abs()));
    }
    Ok(format!("gaps to the optimum: [{}]", gaps.join(", ")))
}

fn determinism(first: &BTreeMap<&str, MissionLog>) -> Outcome {
    for (name, log) in first {
        let sc = scenario(name);
        let again = run_scenario(&sc).log;
        for ((fa, a), (fb, b)) in log.files().iter().zip(again.files().iter()) {
            ensure(fa == fb && a == b, || format!("{name}: {fa} differs"))?;
        }
    }
    Ok(format!("{} scenarios reproduced byte for byte", first.len()))
}

fn bus_statistics() -> Outcome {
    let latency = 0.05;
    let config = BusConfig {
        topics: BTreeMap::from([("t".to_string(), TopicConfig { rate_hz: 100.0, latency, drop_probability: 0.1, stream: 9 })]),
    };
    let mut bus: Bus<u32> = Bus::new(&config, 2024);
    bus.subscribe("t", "s").map_err(|e| e.to_string())?;
    let mut delivered = 0;
    let mut early = 0;
    for k in 0..10_000u32 {
        let now = f64::from(k) * 0.01;
        bus.publish("t", 0, k, now).map_err(|e| e.to_string())?;
        for d in bus.poll("s", now) {
            delivered += 1;
            early += usize::from(d.delivered < d.published + latency - 1e-9);
        }
    }
    delivered += bus.poll("s", 1e9).len();
    ensure((8800..=9200).contains(&delivered), || format!("{delivered} delivered"))?;
    ensure(early == 0 && bus.stats()["t"].early_deliveries == 0, || format!("{early} early deliveries"))?;
    Ok(format!("{delivered} of 10000 delivered, none early"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };

    let mut logs = BTreeMap::new();
    let mut scenario_check = |file: &'static str, check: fn(&Run) -> Outcome| {
        let run = run_scenario(&scenario(file));
        let out = check(&run);
        logs.insert(file, run.log);
        out
    };
    let inspection_out = scenario_check("inspection_ref.json", inspection);
    let safety_out = scenario_check("safety_ref.json", safety);
    let cognition_out = scenario_check("inspection_anomaly.json", cognition);
    report("inspection scenario", &mut || inspection_out.clone());
    report("safety scenario", &mut || safety_out.clone());
    report("cognition under battery anomaly", &mut || cognition_out.clone());
    report("stl suite", &mut stl_suite);
    report("allocation oracle", &mut allocation_oracle);
    report("1-d planner oracle", &mut line_oracle);
    report("determinism", &mut || determinism(&logs));
    report("bus statistics", &mut bus_statistics);

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
