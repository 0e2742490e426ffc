//! Authentication: accept an uploaded Verifiable Passkey, check it against a
//! trusted issuer's pinned DID document, run the get ceremony through the
//! credential's own PageX and open an authenticated session.
//!
//! Nothing about the user outlives the pending session. Authenticated
//! sessions are bare bearer tokens with an expiry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

use vpass_core::did::DidError;
use vpass_core::encoding::b64_url_encode;
use vpass_core::types::DEFAULT_CHALLENGE_LEN;
use vpass_core::vcred::{credential_from_upload, verification_method_id, verify_credential_value, VcError, VerifiedPasskey};
use vpass_core::webauthn::{url_origin, verify_assertion, WebauthnError};
use vpass_core::{generate_challenge, CeremonyResult, Challenge, CoseKey, DidResolver, Expectations, UserInfo};

use crate::clock::Clock;
use crate::config::{ConfigError, VerifierConfig};
use crate::error::error_response;
use crate::pagex::{encode_options, Mode, PagexRequest, RequestOptions};
use crate::sessions::{new_token, SessionError, SessionStore};

/// Length in bytes of an authenticated-session token.
pub const SESSION_TOKEN_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifierError {
    #[error("upload is not a usable credential: {0}")]
    MalformedUpload(String),
    #[error("issuer {0} is not trusted")]
    UntrustedIssuer(String),
    #[error("credential rejected: {0}")]
    ProofInvalid(VcError),
    #[error("issuer key unavailable: {0}")]
    ResolutionFailed(DidError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("assertion is for a different credential")]
    CredentialIdMismatch,
    #[error("assertion rejected: {0}")]
    AssertionInvalid(WebauthnError),
    #[error("ceremony did not complete: {0}")]
    CeremonyAborted(String),
}

impl VerifierError {
    pub fn code(&self) -> &'static str {
        match self {
            VerifierError::MalformedUpload(_) => "MalformedUpload",
            VerifierError::UntrustedIssuer(_) => "UntrustedIssuer",
            VerifierError::ProofInvalid(_) => "ProofInvalid",
            VerifierError::ResolutionFailed(_) => "ResolutionFailed",
            VerifierError::Session(SessionError::UnknownSession) => "UnknownSession",
            VerifierError::Session(SessionError::SessionExpired) => "SessionExpired",
            VerifierError::Session(SessionError::SessionReplayed) => "SessionReplayed",
            VerifierError::CredentialIdMismatch => "CredentialIdMismatch",
            VerifierError::AssertionInvalid(_) => "AssertionInvalid",
            VerifierError::CeremonyAborted(_) => "CeremonyAborted",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            VerifierError::MalformedUpload(_) => StatusCode::BAD_REQUEST,
            VerifierError::UntrustedIssuer(_) => StatusCode::FORBIDDEN,
            VerifierError::ProofInvalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            VerifierError::ResolutionFailed(_) => StatusCode::BAD_GATEWAY,
            VerifierError::Session(SessionError::UnknownSession) => StatusCode::NOT_FOUND,
            VerifierError::Session(SessionError::SessionExpired) => StatusCode::GONE,
            VerifierError::Session(SessionError::SessionReplayed) => StatusCode::CONFLICT,
            VerifierError::CredentialIdMismatch | VerifierError::AssertionInvalid(_) => StatusCode::UNAUTHORIZED,
            VerifierError::CeremonyAborted(_) => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for VerifierError {
    fn into_response(self) -> Response {
        error_response(self.status(), self.code(), self.to_string())
    }
}

pub struct PendingAuth {
    pub challenge: Challenge,
    pub expected_key: CoseKey,
    pub expected_credential_id: Vec<u8>,
    pub pagex_origin: String,
    pub rp_id: String,
    pub user: UserInfo,
    pub issuer: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct AuthStart {
    pub session_id: String,
    pub redirect: Url,
}

/// What a successful authentication hands to the application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthOutcome {
    pub user: UserInfo,
    pub issuer: String,
    pub session_token: String,
    pub expires_at: DateTime<Utc>,
    pub sign_count: u32,
}

/// Counts of everything the verifier currently holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    /// Pending authentications that can still be finished.
    pub pending_auth: usize,
    /// Credential data held in any form; only pending sessions carry any.
    pub credential_records: usize,
    /// Ids remembered to report replays, without payload.
    pub replay_markers: usize,
    /// Unexpired bearer tokens, without payload.
    pub authenticated_sessions: usize,
}

pub struct Verifier {
    config: VerifierConfig,
    resolver: Arc<DidResolver>,
    finish_url: Url,
    pending: SessionStore<PendingAuth>,
    sessions: Mutex<HashMap<String, DateTime<Utc>>>,
    clock: Arc<dyn Clock>,
}

impl Verifier {
    pub fn new(config: VerifierConfig, resolver: Arc<DidResolver>, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        config.validate()?;
        let finish_url = config
            .public_url()?
            .join("auth/finish")
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let pending = SessionStore::new(Duration::seconds(config.challenge_ttl_seconds as i64), clock.clone());
        Ok(Self {
            config,
            resolver,
            finish_url,
            pending,
            sessions: Mutex::new(HashMap::new()),
            clock,
        })
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.config
    }

    pub fn resolver(&self) -> &DidResolver {
        &self.resolver
    }

    /// Verifies an uploaded credential (bare or inside a presentation).
    pub async fn check_credential(&self, upload: &[u8]) -> Result<VerifiedPasskey, VerifierError> {
        let document = credential_from_upload(upload).map_err(|e| VerifierError::MalformedUpload(e.to_string()))?;
        let issuer = document
            .get("issuer")
            .and_then(Value::as_str)
            .ok_or_else(|| VerifierError::MalformedUpload("missing issuer".into()))?
            .to_string();
        if !self.config.trusted_issuer_dids.contains(&issuer) {
            return Err(VerifierError::UntrustedIssuer(issuer));
        }
        let did_document = self
            .resolver
            .resolve(&issuer, self.config.did_cache_policy)
            .await
            .map_err(VerifierError::ResolutionFailed)?;
        let key = did_document
            .key(&verification_method_id(&issuer))
            .map_err(VerifierError::ResolutionFailed)?;
        verify_credential_value(&document, &key).map_err(|e| match e {
            VcError::MalformedDocument(msg) => VerifierError::MalformedUpload(msg),
            other => VerifierError::ProofInvalid(other),
        })
    }

    pub async fn auth_start(&self, upload: &[u8]) -> Result<AuthStart, VerifierError> {
        let verified = self.check_credential(upload).await?;
        let pagex_url = Url::parse(&verified.pagex_url).map_err(|e| VerifierError::MalformedUpload(e.to_string()))?;
        let pagex_origin = url_origin(pagex_url.as_str()).map_err(|e| VerifierError::MalformedUpload(e.to_string()))?;
        let rp_id = pagex_url
            .host_str()
            .ok_or_else(|| VerifierError::MalformedUpload("pagex URL has no host".into()))?
            .to_string();
        let challenge = generate_challenge(DEFAULT_CHALLENGE_LEN).expect("default length is valid");
        let credential_id = verified.record.credential_id().to_vec();
        let options = RequestOptions {
            challenge: challenge.to_b64url(),
            rp_id: rp_id.clone(),
            allow_credentials: vec![b64_url_encode(&credential_id)],
        };
        let session_id = self.pending.insert(PendingAuth {
            challenge,
            expected_key: verified.record.public_key().clone(),
            expected_credential_id: credential_id,
            pagex_origin,
            rp_id,
            user: verified.user,
            issuer: verified.issuer,
            created_at: self.clock.now(),
        });
        let mut redirect_uri = self.finish_url.clone();
        redirect_uri.query_pairs_mut().append_pair("session", &session_id);
        let redirect = PagexRequest {
            mode: Mode::Get,
            options: encode_options(&options),
            redirect_uri,
        }
        .to_url(&pagex_url);
        tracing::debug!(session = %session_id, "authentication started");
        Ok(AuthStart { session_id, redirect })
    }

    /// Consumes the session and checks the assertion. The session is gone
    /// afterwards whatever the outcome.
    pub fn auth_finish(&self, session_id: &str, result: &CeremonyResult) -> Result<AuthOutcome, VerifierError> {
        let pending = self.pending.consume(session_id)?;
        let presented = result.credential_id().map_err(VerifierError::AssertionInvalid)?;
        if presented != pending.expected_credential_id {
            return Err(VerifierError::CredentialIdMismatch);
        }
        let expect = Expectations {
            challenge: &pending.challenge,
            origin: self.config.enforce_pagex_origin.then_some(pending.pagex_origin.as_str()),
            rp_id: &pending.rp_id,
            require_user_verification: false,
        };
        let sign_count =
            verify_assertion(result, &expect, &pending.expected_key, 0).map_err(VerifierError::AssertionInvalid)?;

        let now = self.clock.now();
        let expires_at = now + Duration::seconds(self.config.session_lifetime_seconds as i64);
        let session_token = new_token(SESSION_TOKEN_LEN);
        {
            let mut sessions = self.sessions.lock().unwrap();
            sessions.retain(|_, until| *until > now);
            sessions.insert(session_token.clone(), expires_at);
        }
        tracing::info!(session = %session_id, issuer = %pending.issuer, "user authenticated");
        Ok(AuthOutcome {
            user: pending.user,
            issuer: pending.issuer,
            session_token,
            expires_at,
            sign_count,
        })
    }

    /// Records a failed ceremony reported by PageX, burning the session.
    pub fn auth_abort(&self, session_id: &str, code: &str) -> VerifierError {
        match self.pending.consume(session_id) {
            Ok(_) => VerifierError::CeremonyAborted(code.to_string()),
            Err(e) => e.into(),
        }
    }

    /// True when `token` names an unexpired authenticated session.
    pub fn session_valid(&self, token: &str) -> bool {
        let now = self.clock.now();
        self.sessions
            .lock()
            .unwrap()
            .get(token)
            .is_some_and(|until| *until > now)
    }

    pub fn storage_report(&self) -> StorageReport {
        let now = self.clock.now();
        let pending_auth = self.pending.active_count();
        let authenticated_sessions = self
            .sessions
            .lock()
            .unwrap()
            .values()
            .filter(|until| **until > now)
            .count();
        StorageReport {
            pending_auth,
            credential_records: pending_auth,
            replay_markers: self.pending.closed_count(),
            authenticated_sessions,
        }
    }

    /// Drops expired pending sessions, replay markers and tokens.
    pub fn sweep(&self) {
        self.pending.sweep();
        let now = self.clock.now();
        self.sessions.lock().unwrap().retain(|_, until| *until > now);
    }

    pub fn router(self: Arc<Self>) -> Router {
        let mut router = Router::new()
            .route("/login", get(login_page))
            .route("/auth/start", post(auth_start))
            .route("/auth/finish", get(auth_finish))
            .route("/healthz", get(|| async { "ok" }));
        if self.config.expose_debug_storage {
            router = router.route("/debug/storage", get(debug_storage));
        }
        router.with_state(self)
    }
}

#[derive(Deserialize)]
struct FinishQuery {
    session: String,
    result: Option<String>,
    error: Option<String>,
}

async fn login_page() -> Html<&'static str> {
    Html(include_str!("pages/login.html"))
}

async fn read_upload(request: Request) -> Result<Vec<u8>, VerifierError> {
    let multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let malformed = |e: String| VerifierError::MalformedUpload(e);
    if !multipart {
        let body = Bytes::from_request(request, &()).await.map_err(|e| malformed(e.to_string()))?;
        return Ok(body.to_vec());
    }
    let mut form = Multipart::from_request(request, &()).await.map_err(|e| malformed(e.to_string()))?;
    match form.next_field().await.map_err(|e| malformed(e.to_string()))? {
        Some(field) => Ok(field.bytes().await.map_err(|e| malformed(e.to_string()))?.to_vec()),
        None => Err(malformed("empty form".into())),
    }
}

async fn auth_start(State(verifier): State<Arc<Verifier>>, request: Request) -> Response {
    verifier.sweep();
    let outcome = match read_upload(request).await {
        Ok(upload) => verifier.auth_start(&upload).await,
        Err(e) => Err(e),
    };
    match outcome {
        Ok(start) => Redirect::to(start.redirect.as_str()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn auth_finish(State(verifier): State<Arc<Verifier>>, Query(query): Query<FinishQuery>) -> Response {
    let envelope = match (query.result, query.error) {
        (_, Some(code)) => return verifier.auth_abort(&query.session, &code).into_response(),
        (None, None) => return verifier.auth_abort(&query.session, "missing_result").into_response(),
        (Some(envelope), None) => envelope,
    };
    let outcome = match CeremonyResult::from_envelope(&envelope) {
        Ok(result) => verifier.auth_finish(&query.session, &result),
        Err(e) => match verifier.pending.consume(&query.session) {
            Ok(_) => Err(VerifierError::AssertionInvalid(e)),
            Err(session) => Err(session.into()),
        },
    };
    match outcome {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn debug_storage(State(verifier): State<Arc<Verifier>>) -> Json<StorageReport> {
    Json(verifier.storage_report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use p256::ecdsa::SigningKey;
    use rand::rngs::OsRng;
    use vpass_core::did::{RecordingTransport, Transport, TransportError};
    use vpass_core::vcred::issue_credential;
    use vpass_core::{CredentialRecord, DidDocument, SoftAuthenticator};

    const ISSUER: &str = "did:web:issuer.example.com";
    const PAGEX: &str = "https://pagex.example.com/pagex.html";
    const RP: &str = "pagex.example.com";
    const ORIGIN: &str = "https://pagex.example.com";

    struct Offline;

    #[async_trait::async_trait]
    impl Transport for Offline {
        async fn get(&self, url: &Url) -> Result<Vec<u8>, TransportError> {
            Err(TransportError(format!("offline: {url}")))
        }
    }

    struct Fixture {
        verifier: Verifier,
        clock: Arc<ManualClock>,
        transport: Arc<RecordingTransport<Offline>>,
        authenticator: SoftAuthenticator,
        credential: Vec<u8>,
        issuer_key: SigningKey,
    }

    fn user() -> UserInfo {
        UserInfo::new("Bob", "bob@example.com", "+44 20 7946 0000")
    }

    fn enrolled(authenticator: &mut SoftAuthenticator, issuer_key: &SigningKey) -> Vec<u8> {
        let challenge = generate_challenge(32).unwrap();
        let result = authenticator.make_credential(RP, &challenge, &user(), ORIGIN);
        let record = vpass_core::webauthn::verify_attestation(&result, &Expectations::new(&challenge, ORIGIN, RP)).unwrap();
        credential_bytes(&record, issuer_key)
    }

    fn credential_bytes(record: &CredentialRecord, key: &SigningKey) -> Vec<u8> {
        issue_credential(record, &user(), PAGEX, ISSUER, key).unwrap().to_json_pretty().into_bytes()
    }

    fn fixture() -> Fixture {
        let issuer_key = SigningKey::random(&mut OsRng);
        let transport = Arc::new(RecordingTransport::new(Offline));
        let resolver = Arc::new(DidResolver::new(transport.clone()));
        resolver.pin(ISSUER, DidDocument::for_key(ISSUER, issuer_key.verifying_key())).unwrap();
        let clock = Arc::new(ManualClock::default());
        let mut config = VerifierConfig::new(vec![ISSUER.into()]);
        config.public_url = Some("https://verifier.example.net/".into());
        let verifier = Verifier::new(config, resolver, clock.clone()).unwrap();
        let mut authenticator = SoftAuthenticator::new();
        let credential = enrolled(&mut authenticator, &issuer_key);
        Fixture {
            verifier,
            clock,
            transport,
            authenticator,
            credential,
            issuer_key,
        }
    }

    fn options_of(start: &AuthStart) -> (Challenge, RequestOptions) {
        let request = PagexRequest::from_url(&start.redirect).unwrap();
        assert_eq!(request.mode, Mode::Get);
        let options: RequestOptions = crate::pagex::decode_options(&request.options).unwrap();
        let bytes = vpass_core::encoding::b64_url_decode(&options.challenge).unwrap();
        (Challenge::from_bytes(bytes).unwrap(), options)
    }

    fn assert_for(f: &mut Fixture, start: &AuthStart, origin: &str) -> CeremonyResult {
        let (challenge, options) = options_of(start);
        let allowed: Vec<Vec<u8>> = options
            .allow_credentials
            .iter()
            .map(|id| vpass_core::encoding::b64_url_decode(id).unwrap())
            .collect();
        f.authenticator.get_assertion(&options.rp_id, &challenge, &allowed, origin).unwrap()
    }

    #[tokio::test]
    async fn honest_flow_authenticates_without_network() {
        let mut f = fixture();
        let start = f.verifier.auth_start(&f.credential).await.unwrap();
        assert!(start.redirect.as_str().starts_with(PAGEX));
        let result = assert_for(&mut f, &start, ORIGIN);
        let outcome = f.verifier.auth_finish(&start.session_id, &result).unwrap();
        assert_eq!(outcome.user, user());
        assert_eq!(outcome.issuer, ISSUER);
        assert_eq!(outcome.sign_count, 1);
        assert!(f.verifier.session_valid(&outcome.session_token));
        assert_eq!(f.transport.request_count(), 0);
    }

    #[tokio::test]
    async fn presentation_upload_is_accepted() {
        let f = fixture();
        let vc: vpass_core::VerifiablePasskeyCredential = serde_json::from_slice(&f.credential).unwrap();
        let vp = vpass_core::vcred::wrap_presentation(vc).unwrap();
        let bytes = serde_json::to_vec(&vp).unwrap();
        f.verifier.auth_start(&bytes).await.unwrap();
    }

    #[tokio::test]
    async fn untrusted_and_unknown_issuers() {
        let f = fixture();
        let mut doc: Value = serde_json::from_slice(&f.credential).unwrap();
        doc["issuer"] = "did:web:rogue.example".into();
        let err = f.verifier.auth_start(doc.to_string().as_bytes()).await.unwrap_err();
        assert_eq!(err.code(), "UntrustedIssuer");

        let other = SigningKey::random(&mut OsRng);
        let mut auth = SoftAuthenticator::new();
        let forged = enrolled(&mut auth, &other);
        let err = f.verifier.auth_start(&forged).await.unwrap_err();
        assert_eq!(err.code(), "ProofInvalid");
        let _ = &f.issuer_key;
    }

    #[tokio::test]
    async fn resolution_without_pin_fails_offline() {
        let f = fixture();
        let resolver = Arc::new(DidResolver::new(f.transport.clone()));
        let verifier = Verifier::new(f.verifier.config.clone(), resolver, f.clock.clone()).unwrap();
        let err = verifier.auth_start(&f.credential).await.unwrap_err();
        assert_eq!(err.code(), "ResolutionFailed");
        assert_eq!(f.transport.request_count(), 0);
    }

    #[tokio::test]
    async fn garbage_upload_is_malformed() {
        let f = fixture();
        for upload in [&b"not json"[..], b"{}", b"[]"] {
            let err = f.verifier.auth_start(upload).await.unwrap_err();
            assert_eq!(err.code(), "MalformedUpload", "{}", String::from_utf8_lossy(upload));
        }
    }

    #[tokio::test]
    async fn replay_is_rejected() {
        let mut f = fixture();
        let start = f.verifier.auth_start(&f.credential).await.unwrap();
        let result = assert_for(&mut f, &start, ORIGIN);
        f.verifier.auth_finish(&start.session_id, &result).unwrap();
        let err = f.verifier.auth_finish(&start.session_id, &result).unwrap_err();
        assert_eq!(err, VerifierError::Session(SessionError::SessionReplayed));
    }

    #[tokio::test]
    async fn substituted_credential_is_rejected() {
        let mut f = fixture();
        let other = enrolled(&mut f.authenticator, &f.issuer_key);
        let start = f.verifier.auth_start(&f.credential).await.unwrap();
        let (challenge, _) = options_of(&start);
        let other_id = {
            let doc = vpass_core::vcred::credential_from_upload(&other).unwrap();
            let id = doc["credentialSubject"]["cred"]["credential_id"].as_str().unwrap().to_string();
            vpass_core::encoding::b64_std_decode(&id).unwrap()
        };
        let result = f.authenticator.get_assertion(RP, &challenge, &[other_id], ORIGIN).unwrap();
        let err = f.verifier.auth_finish(&start.session_id, &result).unwrap_err();
        assert_eq!(err, VerifierError::CredentialIdMismatch);
    }

    #[tokio::test]
    async fn origin_check_can_be_disabled() {
        let mut f = fixture();
        let start = f.verifier.auth_start(&f.credential).await.unwrap();
        let result = assert_for(&mut f, &start, "https://mirror.example.org");
        let err = f.verifier.auth_finish(&start.session_id, &result).unwrap_err();
        assert_eq!(err.code(), "AssertionInvalid");

        let mut config = f.verifier.config.clone();
        config.enforce_pagex_origin = false;
        let resolver = Arc::new(DidResolver::new(f.transport.clone()));
        resolver.pin(ISSUER, DidDocument::for_key(ISSUER, f.issuer_key.verifying_key())).unwrap();
        let lenient = Verifier::new(config, resolver, f.clock.clone()).unwrap();
        let start = lenient.auth_start(&f.credential).await.unwrap();
        let result = assert_for(&mut f, &start, "https://mirror.example.org");
        lenient.auth_finish(&start.session_id, &result).unwrap();
    }

    #[tokio::test]
    async fn storage_drains_after_expiry() {
        let mut f = fixture();
        let mut tokens = Vec::new();
        for _ in 0..3 {
            let start = f.verifier.auth_start(&f.credential).await.unwrap();
            let result = assert_for(&mut f, &start, ORIGIN);
            tokens.push(f.verifier.auth_finish(&start.session_id, &result).unwrap().session_token);
        }
        f.verifier.auth_start(&f.credential).await.unwrap();
        let during = f.verifier.storage_report();
        assert_eq!(during.pending_auth, 1);
        assert_eq!(during.credential_records, 1);
        assert_eq!(during.authenticated_sessions, 3);
        assert_eq!(f.verifier.storage_report(), during);

        f.clock.advance(Duration::seconds(f.verifier.config.session_lifetime_seconds as i64 + 1));
        let after = f.verifier.storage_report();
        assert_eq!(after.credential_records, 0);
        assert_eq!(after.pending_auth, 0);
        assert_eq!(after.authenticated_sessions, 0);
        assert!(!f.verifier.session_valid(&tokens[0]));
        f.verifier.sweep();
        assert_eq!(f.verifier.storage_report().replay_markers, 1);
        f.clock.advance(Duration::seconds(f.verifier.config.challenge_ttl_seconds as i64 + 1));
        f.verifier.sweep();
        assert_eq!(f.verifier.storage_report().replay_markers, 0);
    }
}
