//! Command-line surface for score-decomposed sampling: translation runs,
//! the low-pass baseline, ablation sweeps and verification suites.

pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;
pub mod suites;

pub use error::{CliError, ExitKind};
