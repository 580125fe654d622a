//! Pipeline stages behind the `gridloc` command line.

pub mod config;
pub mod context;
pub mod reporting;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use reporting::{cmd_report, ReportSummary};
pub use stages::{cmd_prepare, cmd_run, cmd_score, cmd_simulate};
