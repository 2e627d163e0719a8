//! Command-line front end: layered run configuration, run directories and
//! the subcommands built on them.

mod commands;
mod config;
mod rundir;
pub mod workflow;

pub use commands::{main_with_args, run, split_overrides, Cli, Command};
pub use config::{ablation_row, apply_override, canonical_json, hash_value, load_config, AblationConfig, EvalConfig, RunConfig, PRESETS};
pub use rundir::{RunDir, CONFIG_FILE, METRICS_FILE};
