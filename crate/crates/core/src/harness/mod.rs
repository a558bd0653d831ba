//! Configuration, run directories and the staged pipeline commands.

pub mod commands;
pub mod config;
pub mod run;
pub mod train;

pub use commands::{
    cmd_decontam, cmd_eval, cmd_merge, cmd_probe, cmd_report, cmd_rl_train, cmd_sft_train, run_pipeline,
    DecontamArgs, EvalTarget, Experiment,
};
pub use config::ExperimentConfig;
