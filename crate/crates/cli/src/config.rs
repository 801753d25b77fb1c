//! Command-line flags and the validated run configuration.

use std::path::PathBuf;

use clap::Parser;

pub const DEFAULT_PORT: u16 = 8765;

#[derive(Debug, Clone, Parser)]
#[command(name = "lineguard", version, about = "Power-line inspection and worker-safety mission simulator")]
pub struct Cli {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,

    /// RNG seed; defaults to the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Simulated seconds; defaults to the scenario's `sim.duration`.
    #[arg(long)]
    pub duration: Option<f64>,

    /// Serve the operator gateway on this port (0 picks a free one).
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "8765", value_name = "PORT")]
    pub serve: Option<u16>,

    /// Wall-clock pacing multiplier in serve mode.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,

    /// Mission log directory.
    #[arg(long, default_value = "mission_log")]
    pub out: PathBuf,

    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Headless,
    Serve { port: u16 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    pub mode: Mode,
    pub speed: f64,
    pub out: PathBuf,
    pub verbose: bool,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<RunConfig, String> {
        if let Some(d) = cli.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(format!("duration must be positive, got {d}"));
            }
        }
        if !(cli.speed > 0.0 && cli.speed.is_finite()) {
            return Err(format!("speed must be positive, got {}", cli.speed));
        }
        Ok(RunConfig {
            scenario: cli.scenario,
            seed: cli.seed,
            duration: cli.duration,
            mode: cli.serve.map_or(Mode::Headless, |port| Mode::Serve { port }),
            speed: cli.speed,
            out: cli.out,
            verbose: cli.verbose,
        })
    }

    pub fn headless(scenario: impl Into<PathBuf>, out: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            scenario: scenario.into(),
            seed: None,
            duration: None,
            mode: Mode::Headless,
            speed: 1.0,
            out: out.into(),
            verbose: false,
        }
    }
}
