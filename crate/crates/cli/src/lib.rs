//! Reproducible runs of the dlsa pipeline: dataset generation, cascade
//! training, evaluation and the oracle separation probe.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{cmd_eval, cmd_gen, cmd_probe, cmd_train, ProbeRow};
pub use config::{DatasetSource, ExperimentConfig, Overrides};

use dlsa::DlsaError;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for a failure.
pub fn exit_code(e: &DlsaError) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

/// Caps the global rayon pool from `DLSA_THREADS` when set.
pub fn init_threads() -> Result<(), DlsaError> {
    let Ok(v) = std::env::var("DLSA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DlsaError::Config(format!("DLSA_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DlsaError::Config(format!("cannot size thread pool: {e}")))
}
