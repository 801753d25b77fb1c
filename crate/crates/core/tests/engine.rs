mod common;

use std::fs;

use common::{scenario, scenario_path};
use lineguard_core::manager::OperatorCommand;
use lineguard_core::sim::{Engine, SimError};
use lineguard_core::{load_scenario, validate_scenario};
use serde_json::Value;

#[test]
fn shipped_scenarios_validate() {
    let dir = scenario_path("");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let sc = load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(validate_scenario(&sc), vec![], "{}", path.display());
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn idle_fleet_only_pays_hover_power() {
    let sc = scenario("empty.json");
    let mut engine = Engine::new(&sc, sc.seed).unwrap();
    let start = engine.vehicle_states();
    let mut last: Vec<f64> = start.iter().map(|(_, s)| s.battery_energy).collect();
    for _ in 0..engine.step_count(10.0) {
        engine.step();
        let now: Vec<f64> = engine.vehicle_states().iter().map(|(_, s)| s.battery_energy).collect();
        assert!(now.iter().zip(&last).all(|(a, b)| a <= b), "battery rose at t={}", engine.time());
        last = now;
    }
    assert!((engine.time() - 10.0).abs() < 1e-9);
    for ((id, s0), (_, s)) in start.iter().zip(engine.vehicle_states()) {
        let rate = sc.member(*id).unwrap().discharge_rate;
        let expected = s0.battery_energy - rate * 10.0;
        assert!((s.battery_energy - expected).abs() < 1e-6, "vehicle {id}: {} vs {expected}", s.battery_energy);
        assert_eq!(s.position, s0.position);
    }
    let log = engine.finish();
    assert!(log.metrics.energy_anomalies.is_empty());
    assert!(log.metrics.safety_violations.is_empty());
}

#[test]
fn misaligned_periods_are_rejected() {
    let mut sc = scenario("empty.json");
    sc.sim.controller_period = 0.015;
    assert!(matches!(Engine::new(&sc, 1), Err(SimError::Schedule(_))));
    let mut sc = scenario("empty.json");
    sc.sim.telemetry_period = 0.0;
    assert!(Engine::new(&sc, 1).is_err());
}

#[test]
fn invalid_scenarios_do_not_start() {
    let mut sc = scenario("empty.json");
    sc.fleet[1].id = 0;
    assert!(matches!(Engine::new(&sc, 1), Err(SimError::InvalidScenario(_))));
}

fn short_run(seed: u64) -> Vec<(&'static str, String)> {
    let mut sc = scenario("safety_ref.json");
    sc.sim.duration = 4.0;
    lineguard_core::sim::run(&sc, 4.0, seed).unwrap().files()
}

#[test]
fn same_seed_gives_identical_logs() {
    let a = short_run(3);
    assert_eq!(a, short_run(3));
    assert!(a.iter().any(|(name, body)| name.ends_with(".csv") && body.lines().count() > 10));
}

#[test]
fn formation_update_reaches_the_vehicles() {
    let sc = scenario("safety_ref.json");
    let mut engine = Engine::new(&sc, sc.seed).unwrap();
    for _ in 0..engine.step_count(5.0) {
        engine.step();
    }
    engine.push_operator(OperatorCommand::SetFormation { worker: None, distance: Some(6.0), azimuth_center: None, elevation: None, inter_uav_angle: None });
    for _ in 0..engine.step_count(2.0) {
        engine.step();
    }
    let log = engine.finish();
    let decisions: Vec<Value> = log.decisions.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let after: Vec<&Value> = decisions.iter().filter(|d| d["time"].as_f64().unwrap() >= 5.0).collect();
    let distances: Vec<f64> = after
        .iter()
        .flat_map(|d| d["commands"].as_array().unwrap())
        .filter(|c| c["command"]["kind"] == "formation")
        .map(|c| c["command"]["geometry"]["distance"].as_f64().unwrap())
        .collect();
    assert_eq!(distances.len(), 3, "{after:?}");
    assert!(distances.iter().all(|d| *d == 6.0));
}
