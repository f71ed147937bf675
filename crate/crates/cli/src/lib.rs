//! Batch front end for the EQST solver: scenario loading, subcommand
//! orchestration and run artifacts. The binary in `main.rs` is a thin
//! argument-parsing shell over this library, which the integration tests
//! drive directly.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;
pub mod units;

pub use config::{load_scenario, LoadedScenario, Overrides};
pub use error::CliError;
pub use runner::{run, Command, ConvergenceAxis, RunOutcome};
