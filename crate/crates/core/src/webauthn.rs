//! Parsing and verification of WebAuthn ceremony outputs.
//!
//! Only "none"-style attestation is handled: the attestation is trusted for
//! what it binds (challenge, origin, RP ID, user presence and the attested
//! key) and no attestation statement chain is evaluated.

use p256::ecdsa::signature::Verifier;
use p256::ecdsa::{DerSignature, Signature};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use crate::cose::{parse_cbor_cose_key, CoseError};
use crate::encoding::{b64_url_decode, b64_url_encode};
use crate::types::{Challenge, CoseKey, CredentialRecord, AAGUID_LEN, MAX_CREDENTIAL_ID_LEN, MIN_CHALLENGE_LEN};

/// Length of rpIdHash ‖ flags ‖ signCount.
pub const AUTH_DATA_HEADER_LEN: usize = 37;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WebauthnError {
    #[error("malformed clientDataJSON: {0}")]
    MalformedClientData(String),
    #[error("unknown ceremony type {0:?}")]
    UnknownCeremonyType(String),
    #[error("expected a {expected} ceremony, got {actual}")]
    UnexpectedCeremonyType {
        expected: CeremonyType,
        actual: CeremonyType,
    },
    #[error("authenticator data is {0} bytes, shorter than the 37-byte header")]
    TooShort(usize),
    #[error("attested credential flag set but the data is missing or truncated")]
    AttestedDataMissing,
    #[error("{0} unexpected trailing bytes in authenticator data")]
    TrailingGarbage(usize),
    #[error("credential id length {0} out of range")]
    InvalidCredentialId(usize),
    #[error("malformed ceremony envelope: {0}")]
    MalformedEnvelope(String),
    #[error("challenge does not match the expected challenge")]
    ChallengeMismatch,
    #[error("origin {actual:?} does not match expected {expected:?}")]
    OriginMismatch { expected: String, actual: String },
    #[error("rpIdHash does not match SHA-256 of the expected RP ID")]
    RpIdMismatch,
    #[error("user-present flag not set")]
    UserNotPresent,
    #[error("user-verified flag not set")]
    UserNotVerified,
    #[error("no attested credential data")]
    NoAttestedCredential,
    #[error("credential id in the envelope does not match the expected credential")]
    CredentialIdMismatch,
    #[error(transparent)]
    UnsupportedProfile(#[from] CoseError),
    #[error("assertion carries no signature")]
    MissingSignature,
    #[error("signature verification failed")]
    BadSignature,
    #[error("signature counter went from {last} to {new}")]
    CounterRegression { last: u32, new: u32 },
    #[error("malformed URL: {0}")]
    MalformedUrl(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeremonyType {
    Create,
    Get,
}

impl CeremonyType {
    pub fn as_str(self) -> &'static str {
        match self {
            CeremonyType::Create => "webauthn.create",
            CeremonyType::Get => "webauthn.get",
        }
    }
}

impl std::fmt::Display for CeremonyType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientData {
    pub ceremony_type: CeremonyType,
    pub challenge_b64url: String,
    pub origin: String,
}

#[derive(Deserialize)]
struct RawClientData {
    #[serde(rename = "type")]
    ceremony_type: String,
    challenge: String,
    origin: String,
}

pub fn parse_client_data(bytes: &[u8]) -> Result<ClientData, WebauthnError> {
    let raw: RawClientData = serde_json::from_slice(bytes)
        .map_err(|e| WebauthnError::MalformedClientData(e.to_string()))?;
    let ceremony_type = match raw.ceremony_type.as_str() {
        "webauthn.create" => CeremonyType::Create,
        "webauthn.get" => CeremonyType::Get,
        _ => return Err(WebauthnError::UnknownCeremonyType(raw.ceremony_type)),
    };
    let challenge = b64_url_decode(&raw.challenge)
        .map_err(|e| WebauthnError::MalformedClientData(format!("challenge: {e}")))?;
    if challenge.len() < MIN_CHALLENGE_LEN {
        return Err(WebauthnError::MalformedClientData(format!(
            "challenge is {} bytes",
            challenge.len()
        )));
    }
    Ok(ClientData {
        ceremony_type,
        challenge_b64url: raw.challenge,
        origin: raw.origin,
    })
}

/// Authenticator data flag bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AuthFlags(pub u8);

impl AuthFlags {
    pub const USER_PRESENT: u8 = 0x01;
    pub const USER_VERIFIED: u8 = 0x04;
    pub const ATTESTED_DATA: u8 = 0x40;
    pub const EXTENSION_DATA: u8 = 0x80;

    pub fn user_present(self) -> bool {
        self.0 & Self::USER_PRESENT != 0
    }

    pub fn user_verified(self) -> bool {
        self.0 & Self::USER_VERIFIED != 0
    }

    pub fn attested_data(self) -> bool {
        self.0 & Self::ATTESTED_DATA != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedCredential {
    pub aaguid: [u8; AAGUID_LEN],
    pub credential_id: Vec<u8>,
    pub public_key: CoseKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthenticatorData {
    pub rp_id_hash: [u8; 32],
    pub flags: AuthFlags,
    pub sign_count: u32,
    pub attested: Option<AttestedCredential>,
}

impl AuthenticatorData {
    /// Encodes to the binary layout. The attested-data flag is derived from
    /// `attested`, whatever `flags` says.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(AUTH_DATA_HEADER_LEN + 128);
        out.extend_from_slice(&self.rp_id_hash);
        let flags = match self.attested {
            Some(_) => self.flags.0 | AuthFlags::ATTESTED_DATA,
            None => self.flags.0 & !AuthFlags::ATTESTED_DATA,
        };
        out.push(flags);
        out.extend_from_slice(&self.sign_count.to_be_bytes());
        if let Some(att) = &self.attested {
            out.extend_from_slice(&att.aaguid);
            out.extend_from_slice(&(att.credential_id.len() as u16).to_be_bytes());
            out.extend_from_slice(&att.credential_id);
            out.extend_from_slice(&crate::cose::emit_cbor_cose_key(&att.public_key));
        }
        out
    }
}

pub fn parse_authenticator_data(bytes: &[u8]) -> Result<AuthenticatorData, WebauthnError> {
    if bytes.len() < AUTH_DATA_HEADER_LEN {
        return Err(WebauthnError::TooShort(bytes.len()));
    }
    let rp_id_hash: [u8; 32] = bytes[..32].try_into().unwrap();
    let flags = AuthFlags(bytes[32]);
    let sign_count = u32::from_be_bytes(bytes[33..37].try_into().unwrap());
    let rest = &bytes[AUTH_DATA_HEADER_LEN..];

    let (attested, rest) = if flags.attested_data() {
        let (att, rest) = parse_attested(rest)?;
        (Some(att), rest)
    } else {
        (None, rest)
    };
    if !rest.is_empty() {
        return Err(WebauthnError::TrailingGarbage(rest.len()));
    }
    Ok(AuthenticatorData {
        rp_id_hash,
        flags,
        sign_count,
        attested,
    })
}

fn parse_attested(bytes: &[u8]) -> Result<(AttestedCredential, &[u8]), WebauthnError> {
    if bytes.len() < AAGUID_LEN + 2 {
        return Err(WebauthnError::AttestedDataMissing);
    }
    let aaguid: [u8; AAGUID_LEN] = bytes[..AAGUID_LEN].try_into().unwrap();
    let id_len = u16::from_be_bytes([bytes[AAGUID_LEN], bytes[AAGUID_LEN + 1]]) as usize;
    if id_len == 0 || id_len > MAX_CREDENTIAL_ID_LEN {
        return Err(WebauthnError::InvalidCredentialId(id_len));
    }
    let id_start = AAGUID_LEN + 2;
    let key_start = id_start + id_len;
    if bytes.len() <= key_start {
        return Err(WebauthnError::AttestedDataMissing);
    }
    let credential_id = bytes[id_start..key_start].to_vec();
    let (public_key, rest) = match parse_cbor_cose_key(&bytes[key_start..]) {
        Ok(parsed) => parsed,
        Err(CoseError::MalformedCbor(_)) => return Err(WebauthnError::AttestedDataMissing),
        Err(e) => return Err(e.into()),
    };
    Ok((
        AttestedCredential {
            aaguid,
            credential_id,
            public_key,
        },
        rest,
    ))
}

/// Transport envelope for one ceremony. Every field is base64url; the whole
/// envelope travels base64url-encoded in the `result` query parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeremonyResult {
    #[serde(rename = "id")]
    pub credential_id_b64url: String,
    #[serde(rename = "clientDataJSON")]
    pub client_data_b64url: String,
    #[serde(rename = "authenticatorData")]
    pub authenticator_data_b64url: String,
    #[serde(rename = "signature", default, skip_serializing_if = "Option::is_none")]
    pub signature_b64url: Option<String>,
}

impl CeremonyResult {
    pub fn to_envelope(&self) -> String {
        b64_url_encode(serde_json::to_vec(self).expect("serializable envelope"))
    }

    pub fn from_envelope(envelope: &str) -> Result<Self, WebauthnError> {
        let bytes =
            b64_url_decode(envelope).map_err(|e| WebauthnError::MalformedEnvelope(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| WebauthnError::MalformedEnvelope(e.to_string()))
    }

    pub fn credential_id(&self) -> Result<Vec<u8>, WebauthnError> {
        decode_field("id", &self.credential_id_b64url)
    }

    pub fn client_data_bytes(&self) -> Result<Vec<u8>, WebauthnError> {
        decode_field("clientDataJSON", &self.client_data_b64url)
    }

    pub fn authenticator_data_bytes(&self) -> Result<Vec<u8>, WebauthnError> {
        decode_field("authenticatorData", &self.authenticator_data_b64url)
    }

    pub fn client_data(&self) -> Result<ClientData, WebauthnError> {
        parse_client_data(&self.client_data_bytes()?)
    }
}

fn decode_field(name: &str, value: &str) -> Result<Vec<u8>, WebauthnError> {
    b64_url_decode(value).map_err(|e| WebauthnError::MalformedEnvelope(format!("{name}: {e}")))
}

/// What the relying party expects a ceremony to be bound to.
#[derive(Debug, Clone, Copy)]
pub struct Expectations<'a> {
    pub challenge: &'a Challenge,
    /// `None` skips the origin comparison.
    pub origin: Option<&'a str>,
    pub rp_id: &'a str,
    pub require_user_verification: bool,
}

impl<'a> Expectations<'a> {
    pub fn new(challenge: &'a Challenge, origin: &'a str, rp_id: &'a str) -> Self {
        Self {
            challenge,
            origin: Some(origin),
            rp_id,
            require_user_verification: false,
        }
    }
}

fn check_client_data(
    client_data: &ClientData,
    expected_type: CeremonyType,
    expect: &Expectations<'_>,
) -> Result<(), WebauthnError> {
    if client_data.ceremony_type != expected_type {
        return Err(WebauthnError::UnexpectedCeremonyType {
            expected: expected_type,
            actual: client_data.ceremony_type,
        });
    }
    let challenge = b64_url_decode(&client_data.challenge_b64url)
        .map_err(|e| WebauthnError::MalformedClientData(e.to_string()))?;
    if challenge != expect.challenge.as_bytes() {
        return Err(WebauthnError::ChallengeMismatch);
    }
    if let Some(origin) = expect.origin {
        if client_data.origin != origin {
            return Err(WebauthnError::OriginMismatch {
                expected: origin.to_string(),
                actual: client_data.origin.clone(),
            });
        }
    }
    Ok(())
}

fn check_authenticator_data(
    auth_data: &AuthenticatorData,
    expect: &Expectations<'_>,
) -> Result<(), WebauthnError> {
    let expected_hash: [u8; 32] = Sha256::digest(expect.rp_id.as_bytes()).into();
    if auth_data.rp_id_hash != expected_hash {
        return Err(WebauthnError::RpIdMismatch);
    }
    if !auth_data.flags.user_present() {
        return Err(WebauthnError::UserNotPresent);
    }
    if expect.require_user_verification && !auth_data.flags.user_verified() {
        return Err(WebauthnError::UserNotVerified);
    }
    Ok(())
}

/// Verifies a credential-creation result and extracts the new credential.
pub fn verify_attestation(
    result: &CeremonyResult,
    expect: &Expectations<'_>,
) -> Result<CredentialRecord, WebauthnError> {
    if result.signature_b64url.is_some() {
        return Err(WebauthnError::MalformedEnvelope(
            "signature present on a create ceremony".into(),
        ));
    }
    let client_data = result.client_data()?;
    check_client_data(&client_data, CeremonyType::Create, expect)?;
    let auth_data = parse_authenticator_data(&result.authenticator_data_bytes()?)?;
    check_authenticator_data(&auth_data, expect)?;
    let attested = auth_data
        .attested
        .ok_or(WebauthnError::NoAttestedCredential)?;
    if result.credential_id()? != attested.credential_id {
        return Err(WebauthnError::CredentialIdMismatch);
    }
    CredentialRecord::new(
        &attested.aaguid,
        attested.credential_id,
        attested.public_key,
        auth_data.sign_count,
    )
    .map_err(|_| WebauthnError::NoAttestedCredential)
}

/// Verifies an authentication result against a known credential key and
/// returns the authenticator's new signature counter.
pub fn verify_assertion(
    result: &CeremonyResult,
    expect: &Expectations<'_>,
    key: &CoseKey,
    last_sign_count: u32,
) -> Result<u32, WebauthnError> {
    let client_data_bytes = result.client_data_bytes()?;
    let client_data = parse_client_data(&client_data_bytes)?;
    check_client_data(&client_data, CeremonyType::Get, expect)?;
    let auth_data_bytes = result.authenticator_data_bytes()?;
    let auth_data = parse_authenticator_data(&auth_data_bytes)?;
    check_authenticator_data(&auth_data, expect)?;

    let signature_b64 = result
        .signature_b64url
        .as_deref()
        .ok_or(WebauthnError::MissingSignature)?;
    let signature_der = b64_url_decode(signature_b64).map_err(|_| WebauthnError::BadSignature)?;
    let signature = DerSignature::from_bytes(&signature_der)
        .ok()
        .and_then(|der| Signature::try_from(der).ok())
        .ok_or(WebauthnError::BadSignature)?;

    let mut signed = auth_data_bytes;
    signed.extend_from_slice(&Sha256::digest(&client_data_bytes));
    key.verifying_key()
        .verify(&signed, &signature)
        .map_err(|_| WebauthnError::BadSignature)?;

    let new = auth_data.sign_count;
    if last_sign_count != 0 && new != 0 && new <= last_sign_count {
        return Err(WebauthnError::CounterRegression {
            last: last_sign_count,
            new,
        });
    }
    Ok(new)
}

/// ASCII serialization of a URL's origin (scheme, host and non-default port).
pub fn url_origin(url: &str) -> Result<String, WebauthnError> {
    let parsed = Url::parse(url).map_err(|e| WebauthnError::MalformedUrl(format!("{url}: {e}")))?;
    let origin = parsed.origin();
    if !origin.is_tuple() {
        return Err(WebauthnError::MalformedUrl(format!("{url} has no origin")));
    }
    Ok(origin.ascii_serialization())
}

/// True when the ceremony was performed on the page at `pagex_url`.
pub fn check_pagex_origin(client_data: &ClientData, pagex_url: &str) -> Result<bool, WebauthnError> {
    Ok(client_data.origin == url_origin(pagex_url)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::generate_challenge;
    use p256::ecdsa::SigningKey;
    use rand::rngs::OsRng;

    const PAGEX: &str = "https://adityamitra5102.github.io/VerifiablePasskey/pagex.html";
    const ORIGIN: &str = "https://adityamitra5102.github.io";

    fn random_key() -> CoseKey {
        CoseKey::from_verifying_key(SigningKey::random(&mut OsRng).verifying_key())
    }

    #[test]
    fn client_data_get() {
        let challenge = b64_url_encode([9u8; 32]);
        let doc = format!(
            r#"{{"type":"webauthn.get","challenge":"{challenge}","origin":"{ORIGIN}"}}"#
        );
        let parsed = parse_client_data(doc.as_bytes()).unwrap();
        assert_eq!(parsed.ceremony_type, CeremonyType::Get);
        assert_eq!(parsed.origin, ORIGIN);
        assert_eq!(parsed.challenge_b64url, challenge);
    }

    #[test]
    fn client_data_unknown_type_and_extra_fields() {
        let challenge = b64_url_encode([9u8; 16]);
        let doc = format!(
            r#"{{"type":"webauthn.register","challenge":"{challenge}","origin":"{ORIGIN}"}}"#
        );
        assert_eq!(
            parse_client_data(doc.as_bytes()).unwrap_err(),
            WebauthnError::UnknownCeremonyType("webauthn.register".into())
        );
        let doc = format!(
            r#"{{"type":"webauthn.create","challenge":"{challenge}","origin":"{ORIGIN}","crossOrigin":false}}"#
        );
        assert_eq!(
            parse_client_data(doc.as_bytes()).unwrap().ceremony_type,
            CeremonyType::Create
        );
    }

    #[test]
    fn client_data_short_challenge_or_garbage() {
        let doc = format!(
            r#"{{"type":"webauthn.get","challenge":"{}","origin":"{ORIGIN}"}}"#,
            b64_url_encode([1u8; 8])
        );
        assert!(matches!(
            parse_client_data(doc.as_bytes()),
            Err(WebauthnError::MalformedClientData(_))
        ));
        assert!(matches!(
            parse_client_data(b"not json"),
            Err(WebauthnError::MalformedClientData(_))
        ));
        assert!(matches!(
            parse_client_data(br#"{"type":"webauthn.get"}"#),
            Err(WebauthnError::MalformedClientData(_))
        ));
    }

    #[test]
    fn header_only_authenticator_data() {
        let mut bytes = vec![0xabu8; 32];
        bytes.push(0x01);
        bytes.extend_from_slice(&[0, 0, 0, 5]);
        let parsed = parse_authenticator_data(&bytes).unwrap();
        assert_eq!(parsed.sign_count, 5);
        assert!(parsed.flags.user_present());
        assert!(parsed.attested.is_none());
        assert_eq!(parsed.rp_id_hash, [0xab; 32]);

        assert_eq!(
            parse_authenticator_data(&bytes[..36]).unwrap_err(),
            WebauthnError::TooShort(36)
        );
        bytes.push(0);
        assert_eq!(
            parse_authenticator_data(&bytes).unwrap_err(),
            WebauthnError::TrailingGarbage(1)
        );
    }

    /// Builds attested authenticator data by hand from the documented layout.
    fn hand_built(key: &CoseKey, id: &[u8]) -> Vec<u8> {
        let mut bytes = Sha256::digest(b"example.org").to_vec();
        bytes.push(0x41);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        bytes.extend_from_slice(b"0123456789abcdef");
        bytes.extend_from_slice(&(id.len() as u16).to_be_bytes());
        bytes.extend_from_slice(id);
        // COSE key map written out label by label
        bytes.extend_from_slice(&[0xa5, 0x01, 0x02, 0x03, 0x26, 0x20, 0x01, 0x21, 0x58, 0x20]);
        bytes.extend_from_slice(key.x());
        bytes.extend_from_slice(&[0x22, 0x58, 0x20]);
        bytes.extend_from_slice(key.y());
        bytes
    }

    #[test]
    fn attested_authenticator_data() {
        let key = random_key();
        let id: Vec<u8> = (0..32).collect();
        let bytes = hand_built(&key, &id);
        let parsed = parse_authenticator_data(&bytes).unwrap();
        let att = parsed.attested.as_ref().unwrap();
        assert_eq!(att.credential_id, id);
        assert_eq!(&att.aaguid, b"0123456789abcdef");
        assert_eq!(att.public_key, key);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn attested_flag_without_data() {
        let mut bytes = vec![0u8; 32];
        bytes.push(0x41);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(
            parse_authenticator_data(&bytes).unwrap_err(),
            WebauthnError::AttestedDataMissing
        );
        let full = hand_built(&random_key(), &[7; 32]);
        for cut in AUTH_DATA_HEADER_LEN..full.len() {
            assert_eq!(
                parse_authenticator_data(&full[..cut]).unwrap_err(),
                WebauthnError::AttestedDataMissing,
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn envelope_round_trip() {
        let result = CeremonyResult {
            credential_id_b64url: "abc".into(),
            client_data_b64url: "def".into(),
            authenticator_data_b64url: "ghi".into(),
            signature_b64url: None,
        };
        let env = result.to_envelope();
        assert!(!env.contains('=') && !env.contains('+') && !env.contains('/'));
        assert_eq!(CeremonyResult::from_envelope(&env).unwrap(), result);
        let json = String::from_utf8(b64_url_decode(&env).unwrap()).unwrap();
        assert!(!json.contains("signature"));
        assert!(CeremonyResult::from_envelope("%%").is_err());
    }

    #[test]
    fn pagex_origin_check() {
        let cd = |origin: &str| ClientData {
            ceremony_type: CeremonyType::Get,
            challenge_b64url: b64_url_encode([0u8; 16]),
            origin: origin.into(),
        };
        assert!(check_pagex_origin(&cd(ORIGIN), PAGEX).unwrap());
        assert!(!check_pagex_origin(&cd("http://adityamitra5102.github.io"), PAGEX).unwrap());
        assert!(!check_pagex_origin(&cd("https://adityamitra5102.github.io.evil.example"), PAGEX).unwrap());
        assert!(check_pagex_origin(&cd("http://localhost:8080"), "http://localhost:8080/p.html").unwrap());
        assert!(matches!(
            check_pagex_origin(&cd(ORIGIN), "not a url"),
            Err(WebauthnError::MalformedUrl(_))
        ));
    }

    #[test]
    fn rp_hash_is_full_equality() {
        let challenge = generate_challenge(32).unwrap();
        let expect = Expectations::new(&challenge, ORIGIN, "example.org");
        let mut data = AuthenticatorData {
            rp_id_hash: Sha256::digest(b"example.org").into(),
            flags: AuthFlags(AuthFlags::USER_PRESENT),
            sign_count: 0,
            attested: None,
        };
        assert!(check_authenticator_data(&data, &expect).is_ok());
        data.rp_id_hash[31] ^= 1;
        assert_eq!(
            check_authenticator_data(&data, &expect).unwrap_err(),
            WebauthnError::RpIdMismatch
        );
        let expect = Expectations::new(&challenge, ORIGIN, "example.or");
        data.rp_id_hash[31] ^= 1;
        assert_eq!(
            check_authenticator_data(&data, &expect).unwrap_err(),
            WebauthnError::RpIdMismatch
        );
    }

    #[test]
    fn user_verification_policy() {
        let challenge = generate_challenge(32).unwrap();
        let mut expect = Expectations::new(&challenge, ORIGIN, "example.org");
        let data = AuthenticatorData {
            rp_id_hash: Sha256::digest(b"example.org").into(),
            flags: AuthFlags(AuthFlags::USER_PRESENT),
            sign_count: 0,
            attested: None,
        };
        assert!(check_authenticator_data(&data, &expect).is_ok());
        expect.require_user_verification = true;
        assert_eq!(
            check_authenticator_data(&data, &expect).unwrap_err(),
            WebauthnError::UserNotVerified
        );
        let absent = AuthenticatorData {
            flags: AuthFlags(0),
            ..data
        };
        assert_eq!(
            check_authenticator_data(&absent, &expect).unwrap_err(),
            WebauthnError::UserNotPresent
        );
    }
}
