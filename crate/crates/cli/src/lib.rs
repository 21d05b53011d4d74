//! Orchestration for the measurement stack: runs seeded scenarios through
//! nodes, broker, gateway graph and cloud sink, and reports on them.

pub mod admin;
pub mod commands;
pub mod config;
pub mod error;
pub mod machine;
pub mod report;
pub mod run;
pub mod train;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
pub use report::{build_report, render, RunReport};
pub use run::{run_session, RunOptions, RunOutcome, SinkMode};
