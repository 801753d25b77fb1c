//! Command-line front end: headless mission runs and the live operator
//! gateway.

pub mod config;
pub mod headless;
pub mod outcome;
pub mod serve;

pub use config::{Cli, Mode, RunConfig};
pub use headless::run_headless;
pub use outcome::{judge, CliError, ExitStatus, Outcome};
pub use serve::{serve, GatewayStats};
