//! Commands behind the `vpass` binary: issuer key generation, offline
//! credential verification, DID pinning, the two services and a headless
//! end-to-end demo driven by the software authenticator.

pub mod commands;
pub mod demo;

use thiserror::Error;

use vpass_core::did::DidError;
use vpass_service::config::ConfigError;
use vpass_service::keys::KeyFileError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("network error: {0}")]
    Network(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Network(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Invalid(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<KeyFileError> for CliError {
    fn from(e: KeyFileError) -> Self {
        match e {
            KeyFileError::Io { .. } => CliError::Io(e.to_string()),
            KeyFileError::Format { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<DidError> for CliError {
    fn from(e: DidError) -> Self {
        match e {
            DidError::FetchFailed { .. } => CliError::Network(e.to_string()),
            DidError::Store(_) => CliError::Io(e.to_string()),
            DidError::NotDidWeb(_) | DidError::MalformedDid { .. } => CliError::Config(e.to_string()),
            _ => CliError::Verification(e.to_string()),
        }
    }
}
