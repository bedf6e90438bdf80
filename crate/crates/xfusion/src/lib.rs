//! Files, run directories, ablation grids and the `xfusion` command line around
//! `xfusion-core`.

pub mod cli;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod plan;
pub mod ppm;
pub mod run;
pub mod session;
pub mod store;
pub mod svg;

pub use error::{CliError, CliResult};
pub use plan::{Preset, RunPlan};
