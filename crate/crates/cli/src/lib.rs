//! The `dgae` command line: dataset export, staged training, attribute
//! manipulation, interpolation, and evaluation.

pub mod args;
pub mod commands;
pub mod images;

use dgae_core::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit status for a failed command, from the first library error in the chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::MissingPrerequisite(_) => EXIT_MISSING,
                Error::NonFinite(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

/// Worker threads allowed by `DGAE_THREADS` (default: all cores).
pub fn worker_threads() -> usize {
    std::env::var("DGAE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
