//! Command-line front end: configuration loading, model checkpoints, and the
//! run orchestration behind the `geolevels` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod runner;
pub mod table;

pub use config::RunConfig;
pub use error::CliError;
pub use runner::{run, Command, Invocation};

/// Hex SHA-256 of a byte string; the checksum used by checkpoints and run
/// manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
