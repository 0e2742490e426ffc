//! Key generation, offline verification, DID pinning and service hosting.

use std::fmt::Write as _;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use p256::ecdsa::SigningKey;
use rand::rngs::OsRng;
use serde_json::Value;
use tokio::net::TcpListener;
use url::Url;

use vpass_core::did::{did_web_to_url, HttpTransport};
use vpass_core::vcred::{
    credential_from_upload, parse_unverified, verification_method_id, verify_proof, TYPE_CREDENTIAL, TYPE_PASSKEY,
};
use vpass_core::{CachePolicy, DidDocument, DidResolver, UserInfo};
use vpass_service::clock::SystemClock;
use vpass_service::config::{IssuerConfig, VerifierConfig};
use vpass_service::keys::{read_signing_key, write_signing_key};
use vpass_service::{serve, Issuer, Verifier};

use crate::CliError;

pub const KEY_FILE: &str = "issuer-key.pem";
pub const DID_FILE: &str = "did.json";

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone)]
pub struct KeygenOutput {
    pub key_path: PathBuf,
    pub did_document_path: PathBuf,
    /// Where the DID document has to be published for did:web resolution.
    pub hosting_url: Url,
    pub document: DidDocument,
}

/// Creates a fresh issuer key and the matching DID document in `out_dir`.
/// An existing key file is only replaced when `force` is set.
pub fn keygen(out_dir: &Path, did: &str, force: bool) -> Result<KeygenOutput, CliError> {
    let hosting_url = did_web_to_url(did).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let key_path = out_dir.join(KEY_FILE);
    if key_path.exists() && !force {
        return Err(CliError::Io(format!(
            "{} already exists; pass --force to replace it",
            key_path.display()
        )));
    }
    let key = SigningKey::random(&mut OsRng);
    write_signing_key(&key_path, &key)?;
    let document = DidDocument::for_key(did, key.verifying_key());
    let did_document_path = out_dir.join(DID_FILE);
    std::fs::write(&did_document_path, document.to_json_pretty()).map_err(|e| io_error(&did_document_path, e))?;
    Ok(KeygenOutput {
        key_path,
        did_document_path,
        hosting_url,
        document,
    })
}

/// Where `verify-vc` gets the issuer's key from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IssuerSource {
    DocumentFile(PathBuf),
    /// Resolve over the network.
    Did(String),
}

impl IssuerSource {
    /// A DID when the argument starts with `did:`, a file path otherwise.
    pub fn parse(arg: &str) -> Self {
        if arg.starts_with("did:") {
            IssuerSource::Did(arg.to_string())
        } else {
            IssuerSource::DocumentFile(PathBuf::from(arg))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VcReport {
    pub issuer: Option<String>,
    pub user: Option<UserInfo>,
    pub pagex_url: Option<String>,
    pub credential_id: Option<String>,
    pub types: Vec<String>,
    pub checks: Vec<Check>,
}

impl VcReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(detail) => (true, detail),
            Err(detail) => (false, detail),
        };
        self.checks.push(Check { name, passed, detail });
    }

    pub fn render(&self) -> String {
        let unknown = || "-".to_string();
        let mut out = String::new();
        let _ = writeln!(out, "issuer:        {}", self.issuer.clone().unwrap_or_else(unknown));
        if let Some(user) = &self.user {
            let _ = writeln!(out, "user.name:     {}", user.name);
            let _ = writeln!(out, "user.email:    {}", user.email);
            let _ = writeln!(out, "user.phone:    {}", user.phone);
        }
        let _ = writeln!(out, "pagex:         {}", self.pagex_url.clone().unwrap_or_else(unknown));
        let _ = writeln!(out, "credential_id: {}", self.credential_id.clone().unwrap_or_else(unknown));
        let _ = writeln!(out, "types:         {}", self.types.join(", "));
        for check in &self.checks {
            let verdict = if check.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict} {}: {}", check.name, check.detail);
        }
        out
    }
}

/// Inspects a credential file and checks its structure, types and proof.
/// Only I/O and network problems are errors; failed checks are in the report.
pub async fn verify_vc(vc_path: &Path, source: &IssuerSource, allow_loopback_http: bool) -> Result<VcReport, CliError> {
    let bytes = read_file(vc_path)?;
    let mut report = VcReport::default();
    let document = match credential_from_upload(&bytes) {
        Ok(document) => document,
        Err(e) => {
            report.push("structure", Err(e.to_string()));
            report.push("types", Err("not checked".into()));
            report.push("proof", Err("not checked".into()));
            return Ok(report);
        }
    };
    report.issuer = document.get("issuer").and_then(Value::as_str).map(str::to_string);
    report.types = document
        .get("type")
        .and_then(Value::as_array)
        .map(|types| types.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default();

    let structure = parse_unverified(&document).map(|parsed| {
        report.user = Some(parsed.user.clone());
        report.pagex_url = Some(parsed.pagex_url.clone());
        report.credential_id = Some(parsed.credential.subject.cred.credential_id.clone());
        "well-formed".to_string()
    });
    report.push("structure", structure.map_err(|e| e.to_string()));

    let missing: Vec<&str> = [TYPE_CREDENTIAL, TYPE_PASSKEY]
        .into_iter()
        .filter(|t| !report.types.iter().any(|have| have == t))
        .collect();
    let types = if missing.is_empty() {
        Ok(format!("includes {TYPE_CREDENTIAL} and {TYPE_PASSKEY}"))
    } else {
        Err(format!("missing {}", missing.join(", ")))
    };
    report.push("types", types);

    let proof = match &report.issuer {
        None => Err("no issuer to check against".to_string()),
        Some(issuer) => {
            let did_document = match source {
                IssuerSource::DocumentFile(path) => {
                    DidDocument::from_json(&read_file(path)?).map_err(|e| CliError::Config(e.to_string()))?
                }
                IssuerSource::Did(did) => {
                    let resolver = DidResolver::new(Arc::new(HttpTransport::new(allow_loopback_http)));
                    resolver.resolve(did, CachePolicy::FetchIfAbsent).await?
                }
            };
            if &did_document.id != issuer {
                Err(format!("DID document is for {}, credential names {issuer}", did_document.id))
            } else {
                let method = verification_method_id(issuer);
                match did_document.key(&method) {
                    Err(e) => Err(e.to_string()),
                    Ok(key) => verify_proof(&document, &key)
                        .map(|()| format!("signed by {method}"))
                        .map_err(|e| e.to_string()),
                }
            }
        }
    };
    report.push("proof", proof);
    Ok(report)
}

/// Adds a DID document to the verifier's persistent DID cache. Without
/// `document` the DID is resolved over the network once.
pub async fn pin(store: &Path, did: &str, document: Option<&Path>, allow_loopback_http: bool) -> Result<DidDocument, CliError> {
    let resolver = DidResolver::with_store(Arc::new(HttpTransport::new(allow_loopback_http)), store)?;
    let document = match document {
        Some(path) => DidDocument::from_json(&read_file(path)?).map_err(|e| CliError::Config(e.to_string()))?,
        None => return Ok(resolver.resolve(did, CachePolicy::FetchIfAbsent).await?),
    };
    resolver.pin(did, document.clone())?;
    Ok(document)
}

async fn bind(address: &str) -> Result<TcpListener, CliError> {
    TcpListener::bind(address)
        .await
        .map_err(|e| CliError::Io(format!("cannot listen on {address}: {e}")))
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut signal) => {
                signal.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {}
        _ = terminate => {}
    }
}

pub async fn serve_issuer(
    config: IssuerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    config.validate()?;
    let key = read_signing_key(&config.signing_key_path)?;
    let issuer = Arc::new(Issuer::new(config, key, Arc::new(SystemClock))?);
    let listener = bind(&issuer.config().listen_address).await?;
    println!(
        "issuer {} listening on {} (DID document at {})",
        issuer.config().issuer_did,
        listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?,
        issuer.did_document_path()
    );
    serve(listener, issuer.router(), shutdown)
        .await
        .map_err(|e| CliError::Io(e.to_string()))
}

/// `pins` are (DID, document file) pairs added before serving.
pub async fn serve_verifier(
    config: VerifierConfig,
    pins: &[(String, PathBuf)],
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    config.validate()?;
    let transport = Arc::new(HttpTransport::new(config.allow_loopback_http));
    let resolver = match &config.did_cache_path {
        Some(path) => DidResolver::with_store(transport, path)?,
        None => DidResolver::new(transport),
    };
    for (did, path) in pins {
        let document = DidDocument::from_json(&read_file(path)?).map_err(|e| CliError::Config(e.to_string()))?;
        resolver.pin(did, document)?;
    }
    let verifier = Arc::new(Verifier::new(config, Arc::new(resolver), Arc::new(SystemClock))?);
    let listener = bind(&verifier.config().listen_address).await?;
    println!(
        "verifier listening on {} (trusted issuers: {}; pinned: {})",
        listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?,
        verifier.config().trusted_issuer_dids.join(", "),
        verifier.resolver().pinned().join(", ")
    );
    serve(listener, verifier.router(), shutdown)
        .await
        .map_err(|e| CliError::Io(e.to_string()))
}
