//! Service configuration: TOML file, then `VPASS_*` environment variables,
//! then whatever the caller sets explicitly.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use vpass_core::did::did_web_to_url;
use vpass_core::vcred::validate_pagex_url;
use vpass_core::CachePolicy;

pub const ENV_PREFIX: &str = "VPASS_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad configuration: {0}")]
    Invalid(String),
}

fn default_ttl() -> u64 {
    120
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_true() -> bool {
    true
}

fn default_session_lifetime() -> u64 {
    30 * 60
}

fn default_cache_policy() -> CachePolicy {
    CachePolicy::PinnedOnly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssuerConfig {
    pub issuer_did: String,
    pub signing_key_path: PathBuf,
    pub pagex_url: String,
    pub rp_id: String,
    #[serde(default = "default_ttl")]
    pub challenge_ttl_seconds: u64,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    /// Externally visible base URL; defaults to `http://<listen_address>`.
    #[serde(default)]
    pub public_url: Option<String>,
    #[serde(default)]
    pub require_user_verification: bool,
}

impl IssuerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        did_web_to_url(&self.issuer_did).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let pagex = validate_pagex_url(&self.pagex_url)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let host = pagex.host_str().unwrap_or_default();
        if !is_registrable_suffix(&self.rp_id, host) {
            return Err(ConfigError::Invalid(format!(
                "rp_id {:?} is not the PageX host {host:?} or a parent domain of it",
                self.rp_id
            )));
        }
        if self.challenge_ttl_seconds == 0 {
            return Err(ConfigError::Invalid("challenge_ttl_seconds must be positive".into()));
        }
        public_url(self.public_url.as_deref(), &self.listen_address)?;
        Ok(())
    }

    pub fn public_url(&self) -> Result<Url, ConfigError> {
        public_url(self.public_url.as_deref(), &self.listen_address)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub trusted_issuer_dids: Vec<String>,
    #[serde(default = "default_cache_policy")]
    pub did_cache_policy: CachePolicy,
    /// JSON file holding pinned DID documents.
    #[serde(default)]
    pub did_cache_path: Option<PathBuf>,
    #[serde(default = "default_ttl")]
    pub challenge_ttl_seconds: u64,
    #[serde(default = "default_session_lifetime")]
    pub session_lifetime_seconds: u64,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default)]
    pub public_url: Option<String>,
    #[serde(default = "default_true")]
    pub enforce_pagex_origin: bool,
    /// Serves `GET /debug/storage`. Off outside tests.
    #[serde(default)]
    pub expose_debug_storage: bool,
    /// Fetch DID documents of loopback hosts over plain http.
    #[serde(default)]
    pub allow_loopback_http: bool,
}

impl VerifierConfig {
    pub fn new(trusted_issuer_dids: Vec<String>) -> Self {
        Self {
            trusted_issuer_dids,
            did_cache_policy: default_cache_policy(),
            did_cache_path: None,
            challenge_ttl_seconds: default_ttl(),
            session_lifetime_seconds: default_session_lifetime(),
            listen_address: default_listen(),
            public_url: None,
            enforce_pagex_origin: true,
            expose_debug_storage: false,
            allow_loopback_http: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trusted_issuer_dids.is_empty() {
            return Err(ConfigError::Invalid("trusted_issuer_dids is empty".into()));
        }
        for did in &self.trusted_issuer_dids {
            did_web_to_url(did).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.challenge_ttl_seconds == 0 || self.session_lifetime_seconds == 0 {
            return Err(ConfigError::Invalid("lifetimes must be positive".into()));
        }
        public_url(self.public_url.as_deref(), &self.listen_address)?;
        Ok(())
    }

    pub fn public_url(&self) -> Result<Url, ConfigError> {
        public_url(self.public_url.as_deref(), &self.listen_address)
    }
}

fn public_url(explicit: Option<&str>, listen: &str) -> Result<Url, ConfigError> {
    let raw = match explicit {
        Some(url) => url.to_string(),
        None => format!("http://{listen}/"),
    };
    Url::parse(&raw).map_err(|e| ConfigError::Invalid(format!("public url {raw:?}: {e}")))
}

/// True when `rp_id` equals `host` or is a dot-separated suffix of it.
pub fn is_registrable_suffix(rp_id: &str, host: &str) -> bool {
    let rp_id = rp_id.to_ascii_lowercase();
    let host = host.to_ascii_lowercase();
    !rp_id.is_empty()
        && !rp_id.starts_with('.')
        && (host == rp_id || host.ends_with(&format!(".{rp_id}")))
}

/// Reads a TOML file (if given), overlays `VPASS_<FIELD>` variables from
/// `env`, and deserializes. List fields take comma-separated values.
pub fn load<T: DeserializeOwned>(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    list_fields: &[&str],
) -> Result<T, ConfigError> {
    let mut table = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in env {
        let Some(field) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let field = field.to_ascii_lowercase();
        let value = if list_fields.contains(&field.as_str()) {
            toml::Value::Array(
                value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| toml::Value::String(s.to_string()))
                    .collect(),
            )
        } else if let Ok(n) = value.parse::<i64>() {
            toml::Value::Integer(n)
        } else if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(value)
        };
        table.insert(field, value);
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))
}

pub fn load_issuer(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<IssuerConfig, ConfigError> {
    load(path, issuer_env(env), &[])
}

pub fn load_verifier(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<VerifierConfig, ConfigError> {
    load(path, verifier_env(env), &["trusted_issuer_dids"])
}

const ISSUER_FIELDS: &[&str] = &[
    "issuer_did",
    "signing_key_path",
    "pagex_url",
    "rp_id",
    "challenge_ttl_seconds",
    "listen_address",
    "public_url",
    "require_user_verification",
];

const VERIFIER_FIELDS: &[&str] = &[
    "trusted_issuer_dids",
    "did_cache_policy",
    "did_cache_path",
    "challenge_ttl_seconds",
    "session_lifetime_seconds",
    "listen_address",
    "public_url",
    "enforce_pagex_origin",
    "expose_debug_storage",
    "allow_loopback_http",
];

fn only_fields(
    env: impl IntoIterator<Item = (String, String)>,
    fields: &'static [&'static str],
) -> impl Iterator<Item = (String, String)> {
    env.into_iter().filter(move |(k, _)| {
        k.strip_prefix(ENV_PREFIX)
            .is_some_and(|f| fields.contains(&f.to_ascii_lowercase().as_str()))
    })
}

fn issuer_env(env: impl IntoIterator<Item = (String, String)>) -> impl Iterator<Item = (String, String)> {
    only_fields(env, ISSUER_FIELDS)
}

fn verifier_env(env: impl IntoIterator<Item = (String, String)>) -> impl Iterator<Item = (String, String)> {
    only_fields(env, VERIFIER_FIELDS)
}
