//! File formats, configuration, and pipeline orchestration around
//! `urbanseg-core`: PLY reading/writing, the PCB1 array-bundle and PCSK
//! checkpoint formats, JSON configs, run manifests, and the subcommand
//! implementations behind the `urbanseg` binary.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod par;
pub mod pipeline;
pub mod ply;

pub use error::{CliError, Result};
