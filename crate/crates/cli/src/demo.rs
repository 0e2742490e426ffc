//! Headless end-to-end run: enrollment at an in-process issuer, then
//! authentication at an in-process verifier, with the software
//! authenticator standing in for PageX, the browser and the device.
//!
//! Every protocol step is printed as one `STEP <n>:` line. Numbering starts
//! again at 1 for each phase, which is announced by a `PHASE` line.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use p256::ecdsa::SigningKey;
use rand::rngs::OsRng;
use serde_json::Value;
use url::Url;

use vpass_core::did::{HttpTransport, RecordingTransport};
use vpass_core::encoding::b64_url_decode;
use vpass_core::vcred::{verification_method_id, FILE_EXTENSION};
use vpass_core::webauthn::parse_authenticator_data;
use vpass_core::{CeremonyResult, Challenge, DidResolver, SoftAuthenticator, UserInfo};
use vpass_service::clock::SystemClock;
use vpass_service::config::{IssuerConfig, VerifierConfig};
use vpass_service::pagex::{decode_options, result_url, CreationOptions, PagexRequest, RequestOptions};
use vpass_service::{AuthOutcome, Issuer, Verifier};

use crate::CliError;

pub const ISSUER_DID: &str = "did:web:issuer.vpass.example";
pub const ISSUER_HOST: &str = "issuer.vpass.example";
pub const PAGEX_URL: &str = "https://pagex.vpass.example/pagex.html";
pub const PAGEX_ORIGIN: &str = "https://pagex.vpass.example";
pub const RP_ID: &str = "pagex.vpass.example";
pub const VERIFIER_URL: &str = "https://verifier.vpass.example/";

#[derive(Debug, Clone, Default)]
pub struct DemoOptions {
    /// Alter the issued credential before uploading it.
    pub tamper_vc: bool,
    /// Submit the authentication result a second time.
    pub replay: bool,
    /// Also save the issued credential here.
    pub credential_out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    /// The credential exactly as downloaded from the issuer.
    pub credential: Vec<u8>,
    pub outcome: AuthOutcome,
    pub issuer_requests: usize,
    pub total_requests: usize,
}

struct Transcript<'a> {
    out: &'a mut dyn Write,
}

impl Transcript<'_> {
    fn line(&mut self, text: impl AsRef<str>) -> Result<(), CliError> {
        writeln!(self.out, "{}", text.as_ref()).map_err(|e| CliError::Io(e.to_string()))
    }

    fn step(&mut self, n: u32, text: impl AsRef<str>) -> Result<(), CliError> {
        self.line(format!("STEP {n}: {}", text.as_ref()))
    }

    fn fail(&mut self, n: u32, code: &str, message: impl std::fmt::Display) -> CliError {
        let _ = self.line(format!("FAIL at STEP {n}: {code}: {message}"));
        let _ = self.line("RESULT FAIL");
        CliError::Verification(format!("step {n}: {code}"))
    }
}

fn challenge_from(encoded: &str) -> Result<Challenge, CliError> {
    let bytes = b64_url_decode(encoded).map_err(|e| CliError::Verification(e.to_string()))?;
    Challenge::from_bytes(bytes).map_err(|e| CliError::Verification(e.to_string()))
}

fn pagex_request(url: &Url) -> Result<PagexRequest, CliError> {
    PagexRequest::from_url(url).map_err(|e| CliError::Verification(e.to_string()))
}

fn decode<T: serde::de::DeserializeOwned>(encoded: &str) -> Result<T, CliError> {
    decode_options(encoded).map_err(|e| CliError::Verification(e.to_string()))
}

fn demo_user() -> UserInfo {
    UserInfo::new("Ada Lovelace", "ada@example.org", "+44 20 7946 0018")
}

pub async fn run_demo(options: &DemoOptions, out: &mut dyn Write) -> Result<DemoReport, CliError> {
    let mut t = Transcript { out };

    let issuer_config = IssuerConfig {
        issuer_did: ISSUER_DID.into(),
        signing_key_path: PathBuf::from("(generated in memory)"),
        pagex_url: PAGEX_URL.into(),
        rp_id: RP_ID.into(),
        challenge_ttl_seconds: 120,
        listen_address: "127.0.0.1:0".into(),
        public_url: Some(format!("https://{ISSUER_HOST}/")),
        require_user_verification: false,
    };
    let issuer = Issuer::new(issuer_config, SigningKey::random(&mut OsRng), Arc::new(SystemClock))?;

    let transport = Arc::new(RecordingTransport::new(HttpTransport::new(false)));
    let resolver = Arc::new(DidResolver::new(transport.clone()));
    resolver.pin(ISSUER_DID, issuer.did_document().clone())?;
    let mut verifier_config = VerifierConfig::new(vec![ISSUER_DID.into()]);
    verifier_config.public_url = Some(VERIFIER_URL.into());
    let verifier = Verifier::new(verifier_config, resolver, Arc::new(SystemClock))?;
    t.line(format!("SETUP: issuer {ISSUER_DID}, PageX {PAGEX_URL}, verifier {VERIFIER_URL}"))?;
    t.line(format!("SETUP: verifier trusts {ISSUER_DID} and has its DID document pinned"))?;

    let mut device = SoftAuthenticator::new();

    t.line("PHASE enrollment")?;
    let user = demo_user();
    t.step(1, format!("user opens the issuer page and enters name={:?} email={:?} phone={:?}", user.name, user.email, user.phone))?;
    let start = match issuer.enroll_start(user.clone()) {
        Ok(start) => start,
        Err(e) => return Err(t.fail(1, e.code(), e)),
    };
    t.step(2, format!("issuer creates creation options and redirects to PageX: {}", start.redirect))?;
    let request = pagex_request(&start.redirect)?;
    let creation: CreationOptions = decode(&request.options)?;
    let challenge = challenge_from(&creation.challenge)?;
    t.step(3, format!("PageX sends make credential to the device: rpId={} challenge={}", creation.rp_id, creation.challenge))?;
    let attestation = device.make_credential(&creation.rp_id, &challenge, &user, PAGEX_ORIGIN);
    t.step(4, format!("device generates a new key pair: credential id {}", attestation.credential_id_b64url))?;
    let client_data = attestation.client_data().map_err(|e| CliError::Verification(e.to_string()))?;
    t.step(5, format!("device binds challenge {} for origin {} (attestation format none)", client_data.challenge_b64url, client_data.origin))?;
    let auth_data = attestation
        .authenticator_data_bytes()
        .map_err(|e| CliError::Verification(e.to_string()))?;
    let parsed = parse_authenticator_data(&auth_data).map_err(|e| CliError::Verification(e.to_string()))?;
    t.step(6, format!("device returns the attestation: {} bytes of authenticator data, flags {:#04x}, sign count {}", auth_data.len(), parsed.flags.0, parsed.sign_count))?;
    let returned = result_url(&request.redirect_uri, &attestation);
    t.step(7, format!("PageX returns the attestation to the issuer: {returned}"))?;
    let credential = match issuer.enroll_finish(&start.session_id, &attestation) {
        Ok(credential) => credential,
        Err(e) => return Err(t.fail(8, e.code(), e)),
    };
    t.step(8, format!("issuer validates the attestation for credential {}", credential.subject.cred.credential_id))?;
    t.step(9, format!("issuer signs credential {} with {}", credential.id, verification_method_id(ISSUER_DID)))?;
    let download = credential.to_json_pretty().into_bytes();
    t.step(10, format!("issuer sends the credential as verifiable-passkey{FILE_EXTENSION} ({} bytes)", download.len()))?;
    match &options.credential_out {
        Some(path) => {
            std::fs::write(path, &download).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            t.step(11, format!("user keeps the credential at {}", path.display()))?;
        }
        None => t.step(11, "user keeps the credential")?,
    }
    drop(issuer);
    t.line("SETUP: issuer stopped; authentication proceeds without it")?;

    let mut upload = download.clone();
    if options.tamper_vc {
        let mut document: Value = serde_json::from_slice(&upload).expect("issued credential is JSON");
        document["credentialSubject"]["user"]["name"] = Value::String("Mallory".into());
        upload = serde_json::to_vec_pretty(&document).expect("serializable");
        t.line("TAMPER: credentialSubject.user.name changed to \"Mallory\"")?;
    }

    t.line("PHASE authentication")?;
    let requests_before = transport.request_count();
    t.step(1, format!("user opens the verifier login page: {VERIFIER_URL}login"))?;
    t.step(2, format!("user uploads the credential ({} bytes)", upload.len()))?;
    let start = match verifier.auth_start(&upload).await {
        Ok(start) => start,
        Err(e) => return Err(t.fail(3, e.code(), e)),
    };
    t.step(3, format!("verifier checks the credential proof against the pinned key of {ISSUER_DID}: valid"))?;
    let request = pagex_request(&start.redirect)?;
    let pagex = request.redirect_uri.clone();
    t.step(4, format!("verifier extracts the PageX URL from the credential: {}", start.redirect.as_str().split('?').next().unwrap_or_default()))?;
    let request_options: RequestOptions = decode(&request.options)?;
    t.step(5, format!("verifier creates challenge {}", request_options.challenge))?;
    t.step(6, format!("verifier redirects to PageX: {}", start.redirect))?;
    t.step(7, format!("PageX builds request options: rpId={} allowCredentials={:?}", request_options.rp_id, request_options.allow_credentials))?;
    let allowed: Vec<Vec<u8>> = request_options
        .allow_credentials
        .iter()
        .map(|id| b64_url_decode(id).map_err(|e| CliError::Verification(e.to_string())))
        .collect::<Result<_, _>>()?;
    let challenge = challenge_from(&request_options.challenge)?;
    let assertion: CeremonyResult = match device.get_assertion(&request_options.rp_id, &challenge, &allowed, PAGEX_ORIGIN) {
        Ok(assertion) => assertion,
        Err(e) => return Err(t.fail(8, "AuthenticatorError", e)),
    };
    t.step(8, format!("PageX asks the device for an assertion: credential {}", assertion.credential_id_b64url))?;
    let returned = result_url(&pagex, &assertion);
    t.step(9, format!("PageX redirects back to the verifier with the assertion: {returned}"))?;
    let key_x = credential.subject.cred.public_key.entries().get("-2").cloned().unwrap_or_default();
    t.step(10, format!("verifier extracts the credential public key from the credential: x={}", key_x.as_str().unwrap_or_default()))?;
    let outcome = match verifier.auth_finish(&start.session_id, &assertion) {
        Ok(outcome) => outcome,
        Err(e) => return Err(t.fail(11, e.code(), e)),
    };
    t.step(11, format!("verifier validates the assertion: authenticated {} <{}>, sign count {}, session {}", outcome.user.name, outcome.user.email, outcome.sign_count, outcome.session_token))?;

    if options.replay {
        t.line("REPLAY: submitting the same assertion again")?;
        return Err(match verifier.auth_finish(&start.session_id, &assertion) {
            Ok(_) => t.fail(11, "ReplayAccepted", "the replayed assertion was accepted"),
            Err(e) => t.fail(11, e.code(), e),
        });
    }

    let issuer_requests = transport.requests_to(ISSUER_HOST);
    let total_requests = transport.request_count();
    t.line(format!(
        "CHECK issuer requests during authentication: {issuer_requests} (outbound requests: {})",
        total_requests - requests_before
    ))?;
    if issuer_requests != 0 {
        return Err(t.fail(11, "IssuerContacted", format!("{issuer_requests} requests reached the issuer")));
    }
    let report = verifier.storage_report();
    t.line(format!(
        "CHECK verifier storage: {} pending, {} credential records, {} authenticated sessions",
        report.pending_auth, report.credential_records, report.authenticated_sessions
    ))?;
    t.line("RESULT PASS")?;
    Ok(DemoReport {
        credential: download,
        outcome,
        issuer_requests,
        total_requests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn transcript(options: DemoOptions) -> (Result<DemoReport, CliError>, String) {
        let mut out = Vec::new();
        let result = run_demo(&options, &mut out).await;
        (result, String::from_utf8(out).unwrap())
    }

    fn steps(text: &str, phase: &str) -> Vec<u32> {
        text.split("PHASE ")
            .find(|chunk| chunk.starts_with(phase))
            .unwrap()
            .lines()
            .filter_map(|l| l.strip_prefix("STEP ")?.split(':').next()?.parse().ok())
            .collect()
    }

    #[tokio::test]
    async fn default_run_passes_with_eleven_steps_per_phase() {
        let (result, text) = transcript(DemoOptions::default()).await;
        let report = result.unwrap();
        assert_eq!(steps(&text, "enrollment"), (1..=11).collect::<Vec<_>>());
        assert_eq!(steps(&text, "authentication"), (1..=11).collect::<Vec<_>>());
        assert!(text.ends_with("RESULT PASS\n"));
        assert_eq!(report.total_requests, 0);
        assert_eq!(report.outcome.user, demo_user());
    }

    #[tokio::test]
    async fn tampering_fails_at_verification() {
        let (result, text) = transcript(DemoOptions {
            tamper_vc: true,
            ..Default::default()
        })
        .await;
        assert_eq!(result.unwrap_err().exit_code(), 2);
        assert!(text.contains("FAIL at STEP 3: ProofInvalid"), "{text}");
    }

    #[tokio::test]
    async fn replay_fails_at_finish() {
        let (result, text) = transcript(DemoOptions {
            replay: true,
            ..Default::default()
        })
        .await;
        assert_eq!(result.unwrap_err().exit_code(), 2);
        assert!(text.contains("FAIL at STEP 11: SessionReplayed"), "{text}");
    }
}
