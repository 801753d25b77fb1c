use std::io::Write;

use clap::Parser;
use lineguard_cli::{run_headless, serve, Cli, CliError, Mode, Outcome, RunConfig};

fn print_outcome(o: &Outcome) {
    println!("{}", serde_json::to_string(o).expect("outcome serialises"));
}

fn execute(cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cfg.mode {
        Mode::Headless => run_headless(cfg).map(|(o, _)| o),
        Mode::Serve { .. } => serve(cfg, |addr| {
            println!("{}", serde_json::json!({ "listening": addr.to_string() }));
            let _ = std::io::stdout().flush();
        })
        .map(|r| r.outcome),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match RunConfig::from_cli(cli) {
        Ok(cfg) => execute(&cfg).unwrap_or_else(|e| {
            eprintln!("error: {e}");
            e.outcome()
        }),
        Err(msg) => {
            eprintln!("error: {msg}");
            CliError::Config(msg).outcome()
        }
    };
    print_outcome(&outcome);
    std::process::exit(outcome.exit_code);
}
