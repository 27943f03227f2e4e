//! Command-line driver: run configs, experiment commands and pinned
//! multi-seed reproductions.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod reproduce;

use cli::{Cli, Command};
pub use config::RunConfig;
pub use error::CliError;

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a).map(drop),
        Command::Interpolate(a) => commands::cmd_interpolate(a).map(drop),
        Command::Merge(a) => commands::cmd_merge(a).map(drop),
        Command::Prune(a) => commands::cmd_prune(a).map(drop),
        Command::Shapley(a) => commands::cmd_shapley(a).map(drop),
        Command::VerifyBound(a) => commands::cmd_verify_bound(a).map(drop),
        Command::Distances(a) => commands::cmd_distances(a).map(drop),
        Command::Reproduce(a) => reproduce::cmd_reproduce(a).map(drop),
    }
}

/// Sizes the global thread pool from `COTO_LAB_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("COTO_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config {
        path: "COTO_LAB_THREADS".into(),
        msg: format!("expected a positive integer, got {v:?}"),
    })?;
    if n == 0 {
        return Err(CliError::Config {
            path: "COTO_LAB_THREADS".into(),
            msg: "must be at least 1".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}
