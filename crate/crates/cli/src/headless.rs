use lineguard_core::sim::{self, MissionLog};
use lineguard_core::{load_scenario, Scenario};

use crate::config::RunConfig;
use crate::outcome::{judge, CliError, Outcome};

/// Scenario, seed and duration after applying the command-line overrides.
pub fn resolve(cfg: &RunConfig) -> Result<(Scenario, u64, f64), CliError> {
    let scenario = load_scenario(&cfg.scenario)?;
    let seed = cfg.seed.unwrap_or(scenario.seed);
    let duration = cfg.duration.unwrap_or(scenario.sim.duration);
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(CliError::Config(format!("duration must be positive, got {duration}")));
    }
    Ok((scenario, seed, duration))
}

pub fn write_outcome(cfg: &RunConfig, log: &MissionLog) -> Result<Outcome, CliError> {
    log.write_to(&cfg.out)?;
    let mut outcome = judge(&log.metrics);
    outcome.out = Some(cfg.out.clone());
    std::fs::write(cfg.out.join("outcome.json"), serde_json::to_string_pretty(&outcome).expect("outcome serialises") + "\n")?;
    Ok(outcome)
}

/// Runs the whole mission without pacing and writes the log directory.
pub fn run_headless(cfg: &RunConfig) -> Result<(Outcome, MissionLog), CliError> {
    let (scenario, seed, duration) = resolve(cfg)?;
    log::info!("running {} for {duration} s with seed {seed}", cfg.scenario.display());
    let log = sim::run(&scenario, duration, seed)?;
    let outcome = write_outcome(cfg, &log)?;
    Ok((outcome, log))
}
