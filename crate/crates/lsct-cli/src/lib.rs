//! Library backing the `lsct` command-line binary: run configuration,
//! command implementations, and plot emission. Kept as a library so
//! integration tests can drive the same code paths the binary uses.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{
    ablation_csv, cmd_ablate, cmd_eval, cmd_synth, cmd_train, mode_label, parse_mode,
    split_sizes, AblationRow, AblationRun, CliError, CONFIG_ECHO, EVAL_SEED,
    TABLE_ORDER,
};
pub use config::{
    effective_config_json, load_run_config, resolve_config_path, DataConfig, EvalConfig,
    RunConfig, CONFIG_ENV,
};
pub use plot::overlay_svg;
