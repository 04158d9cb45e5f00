//! Scenario files, mesh IO and the `softdiff` command-line tool built on
//! [`softdiff_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{run, Command, Report, RunOptions};
pub use config::{Scenario, ScenarioConfig};
pub use error::{exit, CliError};
