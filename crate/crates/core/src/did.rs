//! did:web resolution with a pinning cache.
//!
//! A verifier can pin an issuer's DID document ahead of time and resolve it
//! with [`CachePolicy::PinnedOnly`], which never touches the network. All
//! fetching goes through a [`Transport`] so it can be observed in tests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use async_trait::async_trait;
use p256::ecdsa::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::cose::{deserialize_cose_key, serialize_cose_key, SerializedCoseKey};
use crate::types::CoseKey;
use crate::vcred::verification_method_id;

pub const DID_CONTEXT: &str = "https://www.w3.org/ns/did/v1";
pub const VERIFICATION_METHOD_TYPE: &str = "CoseKeyES256";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DidError {
    #[error("{0:?} is not a did:web identifier")]
    NotDidWeb(String),
    #[error("malformed DID {did:?}: {reason}")]
    MalformedDid { did: String, reason: String },
    #[error("no pinned document for {0}")]
    CacheMiss(String),
    #[error("fetching {url} failed: {reason}")]
    FetchFailed { url: String, reason: String },
    #[error("document id {actual:?} does not match {expected:?}")]
    IdMismatch { expected: String, actual: String },
    #[error("malformed DID document: {0}")]
    MalformedDocument(String),
    #[error("DID cache store: {0}")]
    Store(String),
}

/// Maps a did:web identifier to the URL of its DID document.
///
/// Both `:` (the did:web convention) and `/` separate path segments, and a
/// percent-encoded port in the host segment is decoded.
pub fn did_web_to_url(did: &str) -> Result<Url, DidError> {
    let malformed = |reason: &str| DidError::MalformedDid {
        did: did.to_string(),
        reason: reason.to_string(),
    };
    let rest = did
        .strip_prefix("did:web:")
        .ok_or_else(|| DidError::NotDidWeb(did.to_string()))?;
    if rest.contains(['#', '?']) {
        return Err(malformed("DID URLs with fragments or queries are not DIDs"));
    }
    let mut segments = rest.split([':', '/']);
    let host = segments.next().unwrap_or_default();
    let host = percent_decode(host).ok_or_else(|| malformed("bad percent-encoding"))?;
    if host.is_empty() || host.contains(['/', '@', '\\', ' ']) {
        return Err(malformed("bad host"));
    }
    let path: Vec<&str> = segments.collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(malformed("empty path segment"));
    }
    let path = if path.is_empty() {
        ".well-known".to_string()
    } else {
        path.join("/")
    };
    let url = Url::parse(&format!("https://{}/{path}/did.json", host.to_ascii_lowercase()))
        .map_err(|e| malformed(&e.to_string()))?;
    if url.host_str().is_none() {
        return Err(malformed("bad host"));
    }
    Ok(url)
}

fn percent_decode(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationMethod {
    pub id: String,
    #[serde(rename = "type")]
    pub method_type: String,
    pub controller: String,
    #[serde(rename = "publicKeyCose")]
    pub public_key: SerializedCoseKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidDocument {
    #[serde(rename = "@context", default)]
    pub context: Vec<String>,
    pub id: String,
    #[serde(rename = "verificationMethod")]
    pub verification_methods: Vec<VerificationMethod>,
    #[serde(rename = "assertionMethod", default)]
    pub assertion_methods: Vec<String>,
}

impl DidDocument {
    /// A document publishing one ES256 key as `<did>#key-1`.
    pub fn for_key(did: &str, key: &VerifyingKey) -> Self {
        let method_id = verification_method_id(did);
        Self {
            context: vec![DID_CONTEXT.to_string()],
            id: did.to_string(),
            verification_methods: vec![VerificationMethod {
                id: method_id.clone(),
                method_type: VERIFICATION_METHOD_TYPE.to_string(),
                controller: did.to_string(),
                public_key: serialize_cose_key(&CoseKey::from_verifying_key(key)),
            }],
            assertion_methods: vec![method_id],
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DidError> {
        serde_json::from_slice(bytes).map_err(|e| DidError::MalformedDocument(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable DID document")
    }

    /// The key of the named verification method.
    pub fn key(&self, method_id: &str) -> Result<VerifyingKey, DidError> {
        let method = self
            .verification_methods
            .iter()
            .find(|m| m.id == method_id)
            .ok_or_else(|| {
                DidError::MalformedDocument(format!("no verification method {method_id}"))
            })?;
        deserialize_cose_key(&method.public_key)
            .map(|k| k.verifying_key())
            .map_err(|e| DidError::MalformedDocument(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

#[async_trait]
pub trait Transport: Send + Sync {
    async fn get(&self, url: &Url) -> Result<Vec<u8>, TransportError>;
}

/// HTTPS transport. With `allow_loopback_http`, requests to localhost and
/// 127.0.0.1 are downgraded to plain http for local development.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
    allow_loopback_http: bool,
}

impl HttpTransport {
    pub fn new(allow_loopback_http: bool) -> Self {
        Self {
            client: reqwest::Client::new(),
            allow_loopback_http,
        }
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn get(&self, url: &Url) -> Result<Vec<u8>, TransportError> {
        let mut url = url.clone();
        let loopback = matches!(url.host_str(), Some("localhost" | "127.0.0.1" | "[::1]"));
        if self.allow_loopback_http && loopback {
            let _ = url.set_scheme("http");
        }
        let response = self
            .client
            .get(url.clone())
            .send()
            .await
            .map_err(|e| TransportError(e.to_string()))?;
        if !response.status().is_success() {
            return Err(TransportError(format!("{url} returned {}", response.status())));
        }
        response
            .bytes()
            .await
            .map(|b| b.to_vec())
            .map_err(|e| TransportError(e.to_string()))
    }
}

/// Wraps a transport and records every request made through it.
#[derive(Debug, Default)]
pub struct RecordingTransport<T> {
    inner: T,
    requests: Mutex<Vec<Url>>,
}

impl<T> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<Url> {
        self.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    /// Requests whose host (and port) match `host`.
    pub fn requests_to(&self, host: &str) -> usize {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|u| {
                let authority = match u.port() {
                    Some(p) => format!("{}:{p}", u.host_str().unwrap_or_default()),
                    None => u.host_str().unwrap_or_default().to_string(),
                };
                authority == host || u.host_str() == Some(host)
            })
            .count()
    }
}

#[async_trait]
impl<T: Transport> Transport for RecordingTransport<T> {
    async fn get(&self, url: &Url) -> Result<Vec<u8>, TransportError> {
        self.requests.lock().unwrap().push(url.clone());
        self.inner.get(url).await
    }
}

#[async_trait]
impl<T: Transport + ?Sized> Transport for Arc<T> {
    async fn get(&self, url: &Url) -> Result<Vec<u8>, TransportError> {
        (**self).get(url).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    PinnedOnly,
    FetchIfAbsent,
}

impl std::str::FromStr for CachePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pinned_only" | "pinned-only" => Ok(Self::PinnedOnly),
            "fetch_if_absent" | "fetch-if-absent" => Ok(Self::FetchIfAbsent),
            other => Err(format!("unknown cache policy {other:?}")),
        }
    }
}

/// Resolves did:web identifiers through an in-memory cache, optionally
/// persisted to a JSON file. Entries never expire; pinning again replaces.
pub struct DidResolver {
    cache: RwLock<HashMap<String, DidDocument>>,
    transport: Arc<dyn Transport>,
    store: Option<PathBuf>,
}

impl DidResolver {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            cache: RwLock::new(HashMap::new()),
            transport,
            store: None,
        }
    }

    /// Uses `path` as the persistent cache, loading it when it exists.
    pub fn with_store(transport: Arc<dyn Transport>, path: impl AsRef<Path>) -> Result<Self, DidError> {
        let path = path.as_ref().to_path_buf();
        let cache = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| DidError::Store(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
            Err(e) => return Err(DidError::Store(format!("{}: {e}", path.display()))),
        };
        Ok(Self {
            cache: RwLock::new(cache),
            transport,
            store: Some(path),
        })
    }

    pub fn pin(&self, did: &str, document: DidDocument) -> Result<(), DidError> {
        if document.id != did {
            return Err(DidError::IdMismatch {
                expected: did.to_string(),
                actual: document.id,
            });
        }
        self.cache.write().unwrap().insert(did.to_string(), document);
        self.persist()
    }

    pub fn pinned(&self) -> Vec<String> {
        let mut dids: Vec<String> = self.cache.read().unwrap().keys().cloned().collect();
        dids.sort();
        dids
    }

    fn persist(&self) -> Result<(), DidError> {
        let Some(path) = &self.store else {
            return Ok(());
        };
        let snapshot: std::collections::BTreeMap<String, DidDocument> = self
            .cache
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let bytes = serde_json::to_vec_pretty(&snapshot).expect("serializable cache");
        std::fs::write(path, bytes).map_err(|e| DidError::Store(format!("{}: {e}", path.display())))
    }

    pub async fn resolve(&self, did: &str, policy: CachePolicy) -> Result<DidDocument, DidError> {
        let url = did_web_to_url(did)?;
        if let Some(doc) = self.cache.read().unwrap().get(did) {
            return Ok(doc.clone());
        }
        if policy == CachePolicy::PinnedOnly {
            return Err(DidError::CacheMiss(did.to_string()));
        }
        let bytes = self
            .transport
            .get(&url)
            .await
            .map_err(|e| DidError::FetchFailed {
                url: url.to_string(),
                reason: e.0,
            })?;
        let document = DidDocument::from_json(&bytes)?;
        if document.id != did {
            return Err(DidError::IdMismatch {
                expected: did.to_string(),
                actual: document.id,
            });
        }
        self.pin(did, document.clone())?;
        Ok(document)
    }
}
