//! Library side of the `ucfed` command: subcommand implementations,
//! evaluation reports and the cross-site experiment.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod report;
