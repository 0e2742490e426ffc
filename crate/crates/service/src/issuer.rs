//! Enrollment: collect user details, hand the create ceremony to PageX,
//! check the attestation and issue the Verifiable Passkey.
//!
//! The issuer keeps nothing once a credential has been downloaded; only
//! pending enrollments live here, for at most one challenge TTL.

use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use chrono::{DateTime, Duration, Utc};
use p256::ecdsa::SigningKey;
use serde::Deserialize;
use thiserror::Error;
use url::Url;

use vpass_core::did::did_web_to_url;
use vpass_core::vcred::{issue_credential_at, VcError, FILE_EXTENSION};
use vpass_core::webauthn::{url_origin, verify_attestation, WebauthnError};
use vpass_core::{generate_challenge, CeremonyResult, Challenge, DidDocument, Expectations, UserInfo, VerifiablePasskeyCredential};
use vpass_core::types::DEFAULT_CHALLENGE_LEN;

use crate::clock::Clock;
use crate::config::{ConfigError, IssuerConfig};
use crate::error::error_response;
use crate::pagex::{encode_options, CreationOptions, Mode, PagexRequest, UserEntity};
use crate::sessions::{new_token, SessionError, SessionStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IssuerError {
    #[error("missing or empty fields: {0:?}")]
    ValidationFailed(Vec<&'static str>),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("attestation rejected: {0}")]
    AttestationInvalid(WebauthnError),
    #[error("ceremony did not complete: {0}")]
    CeremonyAborted(String),
    #[error("credential issuance failed: {0}")]
    Issuance(VcError),
}

impl IssuerError {
    pub fn code(&self) -> &'static str {
        match self {
            IssuerError::ValidationFailed(_) => "ValidationFailed",
            IssuerError::Session(SessionError::UnknownSession) => "UnknownSession",
            IssuerError::Session(SessionError::SessionExpired) => "SessionExpired",
            IssuerError::Session(SessionError::SessionReplayed) => "SessionReplayed",
            IssuerError::AttestationInvalid(_) => "AttestationInvalid",
            IssuerError::CeremonyAborted(_) => "CeremonyAborted",
            IssuerError::Issuance(_) => "IssuanceFailed",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            IssuerError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            IssuerError::Session(SessionError::UnknownSession) => StatusCode::NOT_FOUND,
            IssuerError::Session(SessionError::SessionExpired) => StatusCode::GONE,
            IssuerError::Session(SessionError::SessionReplayed) => StatusCode::CONFLICT,
            IssuerError::AttestationInvalid(_) => StatusCode::UNAUTHORIZED,
            IssuerError::CeremonyAborted(_) => StatusCode::BAD_REQUEST,
            IssuerError::Issuance(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for IssuerError {
    fn into_response(self) -> Response {
        error_response(self.status(), self.code(), self.to_string())
    }
}

pub struct PendingEnrollment {
    pub challenge: Challenge,
    pub user: UserInfo,
    pub created_at: DateTime<Utc>,
}

/// Result of `enroll_start`: the session and where to send the browser.
#[derive(Debug, Clone)]
pub struct EnrollStart {
    pub session_id: String,
    pub redirect: Url,
}

pub struct Issuer {
    config: IssuerConfig,
    signing_key: SigningKey,
    did_document: DidDocument,
    did_path: String,
    pagex_url: Url,
    pagex_origin: String,
    finish_url: Url,
    sessions: SessionStore<PendingEnrollment>,
    clock: Arc<dyn Clock>,
}

impl Issuer {
    pub fn new(config: IssuerConfig, signing_key: SigningKey, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        config.validate()?;
        let invalid = |e: String| ConfigError::Invalid(e);
        let pagex_url = Url::parse(&config.pagex_url).map_err(|e| invalid(e.to_string()))?;
        let pagex_origin = url_origin(&config.pagex_url).map_err(|e| invalid(e.to_string()))?;
        let did_path = did_web_to_url(&config.issuer_did)
            .map_err(|e| invalid(e.to_string()))?
            .path()
            .to_string();
        let finish_url = config
            .public_url()?
            .join("enroll/finish")
            .map_err(|e| invalid(e.to_string()))?;
        let did_document = DidDocument::for_key(&config.issuer_did, signing_key.verifying_key());
        let sessions = SessionStore::new(Duration::seconds(config.challenge_ttl_seconds as i64), clock.clone());
        Ok(Self {
            config,
            signing_key,
            did_document,
            did_path,
            pagex_url,
            pagex_origin,
            finish_url,
            sessions,
            clock,
        })
    }

    pub fn config(&self) -> &IssuerConfig {
        &self.config
    }

    pub fn did_document(&self) -> &DidDocument {
        &self.did_document
    }

    /// Path the DID document is served at, per the did:web mapping.
    pub fn did_document_path(&self) -> &str {
        &self.did_path
    }

    pub fn pending_count(&self) -> usize {
        self.sessions.live_count()
    }

    pub fn enroll_start(&self, user: UserInfo) -> Result<EnrollStart, IssuerError> {
        let missing = user.missing_fields();
        if !missing.is_empty() {
            return Err(IssuerError::ValidationFailed(missing));
        }
        let challenge = generate_challenge(DEFAULT_CHALLENGE_LEN).expect("default length is valid");
        let options = CreationOptions {
            challenge: challenge.to_b64url(),
            rp_id: self.config.rp_id.clone(),
            user: UserEntity {
                id: new_token(16),
                name: user.email.clone(),
                display_name: user.name.clone(),
            },
        };
        let session_id = self.sessions.insert(PendingEnrollment {
            challenge,
            user,
            created_at: self.clock.now(),
        });
        let mut redirect_uri = self.finish_url.clone();
        redirect_uri.query_pairs_mut().append_pair("session", &session_id);
        let redirect = PagexRequest {
            mode: Mode::Create,
            options: encode_options(&options),
            redirect_uri,
        }
        .to_url(&self.pagex_url);
        tracing::debug!(session = %session_id, "enrollment started");
        Ok(EnrollStart { session_id, redirect })
    }

    /// Consumes the session, verifies the attestation and issues the
    /// credential. The session is gone afterwards whatever the outcome.
    pub fn enroll_finish(
        &self,
        session_id: &str,
        result: &CeremonyResult,
    ) -> Result<VerifiablePasskeyCredential, IssuerError> {
        let pending = self.sessions.consume(session_id)?;
        let expect = Expectations {
            challenge: &pending.challenge,
            origin: Some(&self.pagex_origin),
            rp_id: &self.config.rp_id,
            require_user_verification: self.config.require_user_verification,
        };
        let record = verify_attestation(result, &expect).map_err(IssuerError::AttestationInvalid)?;
        let credential = issue_credential_at(
            &record,
            &pending.user,
            &self.config.pagex_url,
            &self.config.issuer_did,
            &self.signing_key,
            self.clock.now(),
        )
        .map_err(IssuerError::Issuance)?;
        tracing::info!(session = %session_id, "credential issued");
        Ok(credential)
    }

    /// Records a failed ceremony reported by PageX, burning the session.
    pub fn enroll_abort(&self, session_id: &str, code: &str) -> IssuerError {
        match self.sessions.consume(session_id) {
            Ok(_) => IssuerError::CeremonyAborted(code.to_string()),
            Err(e) => e.into(),
        }
    }

    pub fn sweep(&self) {
        self.sessions.sweep();
    }

    pub fn router(self: Arc<Self>) -> Router {
        let did_path = self.did_path.clone();
        Router::new()
            .route("/enroll", get(enroll_page))
            .route("/enroll/start", post(enroll_start))
            .route("/enroll/finish", get(enroll_finish))
            .route(&did_path, get(did_document))
            .route("/healthz", get(|| async { "ok" }))
            .with_state(self)
    }
}

#[derive(Deserialize)]
struct EnrollForm {
    #[serde(default)]
    name: String,
    #[serde(default)]
    email: String,
    #[serde(default)]
    phone: String,
}

#[derive(Deserialize)]
struct FinishQuery {
    session: String,
    result: Option<String>,
    error: Option<String>,
}

async fn enroll_page() -> Html<&'static str> {
    Html(include_str!("pages/enroll.html"))
}

async fn enroll_start(State(issuer): State<Arc<Issuer>>, Form(form): Form<EnrollForm>) -> Response {
    issuer.sweep();
    match issuer.enroll_start(UserInfo::new(form.name, form.email, form.phone)) {
        Ok(start) => Redirect::to(start.redirect.as_str()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn enroll_finish(State(issuer): State<Arc<Issuer>>, Query(query): Query<FinishQuery>) -> Response {
    let result = match (query.result, query.error) {
        (_, Some(code)) => return issuer.enroll_abort(&query.session, &code).into_response(),
        (None, None) => return issuer.enroll_abort(&query.session, "missing_result").into_response(),
        (Some(envelope), None) => CeremonyResult::from_envelope(&envelope),
    };
    let outcome = match result {
        Ok(result) => issuer.enroll_finish(&query.session, &result),
        Err(e) => match issuer.sessions.consume(&query.session) {
            Ok(_) => Err(IssuerError::AttestationInvalid(e)),
            Err(session) => Err(session.into()),
        },
    };
    match outcome {
        Ok(credential) => (
            [
                (header::CONTENT_TYPE, "application/json".to_string()),
                (
                    header::CONTENT_DISPOSITION,
                    format!("attachment; filename=\"verifiable-passkey{FILE_EXTENSION}\""),
                ),
            ],
            credential.to_json_pretty(),
        )
            .into_response(),
        Err(e) => e.into_response(),
    }
}

async fn did_document(State(issuer): State<Arc<Issuer>>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        Json(issuer.did_document.clone()),
    )
        .into_response()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::pagex::decode_options;
    use rand::rngs::OsRng;
    use vpass_core::encoding::b64_url_decode;
    use vpass_core::vcred::verify_credential;
    use vpass_core::SoftAuthenticator;

    const PAGEX: &str = "https://pagex.example.com/";

    fn config() -> IssuerConfig {
        IssuerConfig {
            issuer_did: "did:web:issuer.example.com".into(),
            signing_key_path: "unused.pem".into(),
            pagex_url: PAGEX.into(),
            rp_id: "pagex.example.com".into(),
            challenge_ttl_seconds: 120,
            listen_address: "127.0.0.1:0".into(),
            public_url: Some("https://issuer.example.com/".into()),
            require_user_verification: false,
        }
    }

    fn issuer() -> (Issuer, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::default());
        let issuer = Issuer::new(config(), SigningKey::random(&mut OsRng), clock.clone()).unwrap();
        (issuer, clock)
    }

    fn alice() -> UserInfo {
        UserInfo::new("Alice", "alice@example.com", "+1 555 0100")
    }

    fn challenge_of(start: &EnrollStart) -> Challenge {
        let request = PagexRequest::from_url(&start.redirect).unwrap();
        assert_eq!(request.mode, Mode::Create);
        let options: CreationOptions = decode_options(&request.options).unwrap();
        Challenge::from_bytes(b64_url_decode(&options.challenge).unwrap()).unwrap()
    }

    #[test]
    fn enrollment_issues_a_verifiable_credential() {
        let (issuer, _) = issuer();
        let start = issuer.enroll_start(alice()).unwrap();
        assert!(start.redirect.as_str().starts_with(PAGEX));
        let mut auth = SoftAuthenticator::new();
        let result = auth.make_credential("pagex.example.com", &challenge_of(&start), &alice(), "https://pagex.example.com");
        let vc = issuer.enroll_finish(&start.session_id, &result).unwrap();
        let key = issuer.did_document().key(&verification_method_id()).unwrap();
        let verified = verify_credential(&vc, &key).unwrap();
        assert_eq!(verified.user, alice());
        assert_eq!(issuer.pending_count(), 0);
    }

    fn verification_method_id() -> String {
        vpass_core::vcred::verification_method_id("did:web:issuer.example.com")
    }

    #[test]
    fn missing_fields_are_rejected() {
        let (issuer, _) = issuer();
        let err = issuer.enroll_start(UserInfo::new("Alice", "", " ")).unwrap_err();
        assert_eq!(err, IssuerError::ValidationFailed(vec!["email", "phone"]));
        assert_eq!(issuer.pending_count(), 0);
    }

    #[test]
    fn second_finish_is_a_replay() {
        let (issuer, _) = issuer();
        let start = issuer.enroll_start(alice()).unwrap();
        let mut auth = SoftAuthenticator::new();
        let result = auth.make_credential("pagex.example.com", &challenge_of(&start), &alice(), "https://pagex.example.com");
        issuer.enroll_finish(&start.session_id, &result).unwrap();
        let err = issuer.enroll_finish(&start.session_id, &result).unwrap_err();
        assert_eq!(err.code(), "SessionReplayed");
    }

    #[test]
    fn failed_attestation_burns_the_session() {
        let (issuer, _) = issuer();
        let start = issuer.enroll_start(alice()).unwrap();
        let mut auth = SoftAuthenticator::new();
        let good = auth.make_credential("pagex.example.com", &challenge_of(&start), &alice(), "https://pagex.example.com");
        let evil = auth.make_credential("pagex.example.com", &challenge_of(&start), &alice(), "https://evil.example");
        let err = issuer.enroll_finish(&start.session_id, &evil).unwrap_err();
        assert!(matches!(err, IssuerError::AttestationInvalid(WebauthnError::OriginMismatch { .. })));
        assert_eq!(issuer.enroll_finish(&start.session_id, &good).unwrap_err().code(), "SessionReplayed");
    }

    #[test]
    fn late_finish_is_expired() {
        let (issuer, clock) = issuer();
        let start = issuer.enroll_start(alice()).unwrap();
        let mut auth = SoftAuthenticator::new();
        let result = auth.make_credential("pagex.example.com", &challenge_of(&start), &alice(), "https://pagex.example.com");
        clock.advance(Duration::seconds(121));
        assert_eq!(issuer.enroll_finish(&start.session_id, &result).unwrap_err().code(), "SessionExpired");
        assert_eq!(issuer.enroll_finish("nope", &result).unwrap_err().code(), "UnknownSession");
    }

    #[test]
    fn did_document_path_follows_did_web() {
        let (issuer, _) = issuer();
        assert_eq!(issuer.did_document_path(), "/.well-known/did.json");
        assert_eq!(issuer.did_document().id, "did:web:issuer.example.com");
    }
}
