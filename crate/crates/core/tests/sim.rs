mod common;

use std::collections::BTreeMap;

use common::rng;
use lineguard_core::mpc::Control;
use lineguard_core::sim::{plant_step, sense, Bus, BusConfig, PlantParams, TopicConfig};
use lineguard_core::sim::bus::PublishOutcome;
use lineguard_core::{UavState, Vec3};

fn push(a: Vec3) -> Control {
    Control { acceleration: a, yaw_rate: 0.0 }
}

#[test]
fn lagged_response_follows_the_analytic_solution() {
    let tau = 0.15;
    let params = PlantParams { lag: tau, ..PlantParams::default() };
    let a = Vec3::new(1.5, -0.8, 0.3);
    let dt = 0.01;
    let mut s = UavState::at_rest(Vec3::ZERO, 1e6);
    for k in 1..=300 {
        s = plant_step(&s, &push(a), &params, dt);
        let t = k as f64 * dt;
        let e = (-t / tau).exp();
        let v = a * (t - tau * (1.0 - e));
        let p = a * (0.5 * t * t - tau * t + tau * tau * (1.0 - e));
        assert!((s.velocity - v).norm_inf() <= 1e-6, "t={t}: {:?} vs {v:?}", s.velocity);
        assert!((s.position - p).norm_inf() <= 1e-6, "t={t}");
        assert!((s.acceleration - a * (1.0 - e)).norm_inf() <= 1e-9);
    }
}

#[test]
fn vanishing_lag_is_a_double_integrator() {
    let params = PlantParams { lag: 1e-6, ..PlantParams::default() };
    let a = Vec3::new(2.0, 0.0, -1.0);
    let mut s = UavState::at_rest(Vec3::new(1.0, 2.0, 3.0), 1e6);
    s.velocity = Vec3::new(0.5, 0.0, 0.0);
    let (p0, v0) = (s.position, s.velocity);
    for _ in 0..100 {
        s = plant_step(&s, &push(a), &params, 0.01);
    }
    assert!((s.velocity - (v0 + a)).norm_inf() <= 1e-5);
    assert!((s.position - (p0 + v0 + a * 0.5)).norm_inf() <= 1e-5);
}

#[test]
fn acceleration_is_clamped_per_axis() {
    let params = PlantParams { lag: 1e-6, a_max_clamp: 2.0, ..PlantParams::default() };
    let s = plant_step(&UavState::at_rest(Vec3::ZERO, 1e6), &push(Vec3::new(9.0, -9.0, 1.0)), &params, 0.1);
    assert!((s.acceleration - Vec3::new(2.0, -2.0, 1.0)).norm_inf() <= 1e-9);
}

#[test]
fn sensing_noise_has_the_configured_spread() {
    let s = UavState::at_rest(Vec3::new(4.0, -2.0, 7.0), 1.0);
    let sigma = 0.5;
    let n = 10_000;
    let mut r = rng(41);
    let xs: Vec<f64> = (0..n).map(|_| sense(&s, sigma, 0.0, &mut r).position.x - s.position.x).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    assert!((0.45..=0.55).contains(&std), "sample std {std}");
    assert!(mean.abs() < 0.03, "sample mean {mean}");

    let mut a = rng(42);
    let mut b = rng(42);
    for _ in 0..100 {
        assert_eq!(sense(&s, sigma, sigma, &mut a), sense(&s, sigma, sigma, &mut b));
    }
}

fn one_topic(drop: f64, latency: f64) -> BusConfig {
    BusConfig { topics: BTreeMap::from([("state".to_string(), TopicConfig { rate_hz: 100.0, latency, drop_probability: drop, stream: 1 })]) }
}

#[test]
fn bus_drops_at_the_configured_rate_and_keeps_order() {
    let mut bus: Bus<u32> = Bus::new(&one_topic(0.1, 0.05), 7);
    bus.subscribe("state", "ctl").unwrap();
    let mut got = Vec::new();
    for k in 0..10_000u32 {
        let t = k as f64 * 0.01;
        bus.publish("state", 0, k, t).unwrap();
        for d in bus.poll("ctl", t) {
            assert!(d.delivered - d.published >= 0.05 - 1e-9);
            got.push(d.message);
        }
    }
    got.extend(bus.poll("ctl", 1e6).into_iter().map(|d| d.message));
    assert!((8800..=9200).contains(&got.len()), "{} delivered", got.len());
    assert!(got.windows(2).all(|w| w[0] < w[1]), "out of order");
    let st = &bus.stats()["state"];
    assert_eq!(st.published, 10_000);
    assert_eq!(st.dropped + st.delivered, 10_000);
    assert_eq!(st.early_deliveries, 0);
    assert_eq!(st.rate_violations, 0);
}

#[test]
fn bus_refuses_publishing_above_the_rate() {
    let mut bus: Bus<()> = Bus::new(&one_topic(0.0, 0.0), 1);
    assert_eq!(bus.publish("state", 3, (), 0.0).unwrap(), PublishOutcome::Queued);
    assert_eq!(bus.publish("state", 3, (), 0.004).unwrap(), PublishOutcome::RateViolation);
    assert_eq!(bus.publish("state", 4, (), 0.004).unwrap(), PublishOutcome::Queued);
    assert_eq!(bus.publish("state", 3, (), 0.01).unwrap(), PublishOutcome::Queued);
    assert_eq!(bus.stats()["state"].rate_violations, 1);
    assert!(bus.publish("nope", 0, (), 0.0).is_err());
}

#[test]
fn bus_runs_are_reproducible_per_seed() {
    let trace = |seed| {
        let mut bus: Bus<u32> = Bus::new(&one_topic(0.3, 0.0), seed);
        (0..500).map(|k| bus.publish("state", 0, k, k as f64 * 0.01).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(trace(5), trace(5));
    assert_ne!(trace(5), trace(6));
}
