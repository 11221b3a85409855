//! Library behind the `poseforge` binary: measurement ingestion and the
//! `simulate`, `calibrate`, `label` and `report` subcommands.

pub mod app;
pub mod calibrate;
pub mod error;
pub mod ingest;
pub mod io;
pub mod label;
pub mod report;
pub mod simulate;

pub use error::{CliError, Result};
