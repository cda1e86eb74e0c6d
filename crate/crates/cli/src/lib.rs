//! Library side of the `fusehar` command: config loading, run artifacts,
//! plots and comparison tables.

pub mod artifacts;
pub mod commands;
pub mod compare;
pub mod options;
pub mod plots;

pub use options::{exit_code, RunArgs, EXIT_CONFIG, EXIT_RUNTIME};
