//! The Verifiable Passkey credential document: construction, signing,
//! canonical form, verification and presentation envelopes.
//!
//! The document layout mirrors the reference sample member for member. The
//! proof is an ES256 signature (raw `r ‖ s`, base64url) over
//! `SHA-256(canon(proof options)) ‖ SHA-256(canon(credential))`, where the
//! proof options are the proof block minus `proofValue` and the credential
//! is the document minus `proof`.

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use crate::cose::{deserialize_cose_key, serialize_cose_key, CoseError, SerializedCoseKey};
use crate::encoding::{b64_std_decode, b64_std_encode, b64_url_decode, b64_url_encode};
use crate::types::{CredentialRecord, UserInfo, AAGUID_LEN};

pub const CREDENTIALS_CONTEXT: &str = "https://www.w3.org/2018/credentials/v1";
pub const TYPE_CREDENTIAL: &str = "VerifiableCredential";
pub const TYPE_PASSKEY: &str = "VerifiablePasskey";
pub const TYPE_PRESENTATION: &str = "VerifiablePresentation";
pub const PROOF_TYPE: &str = "VPassSignature2025";
pub const SUBJECT_ID: &str = "User creds";
/// Fragment of the issuer DID naming its signing key.
pub const KEY_FRAGMENT: &str = "key-1";
/// File extension for stored credentials.
pub const FILE_EXTENSION: &str = ".vpass.json";

const ISSUANCE_DATE_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.6f";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VcError {
    #[error("document already carries a proof")]
    ProofPresent,
    #[error("proof does not verify: {0}")]
    ProofInvalid(String),
    #[error("credential types lack {0:?}")]
    MissingType(&'static str),
    #[error("malformed credential document: {0}")]
    MalformedDocument(String),
    #[error(transparent)]
    UnsupportedProfile(#[from] CoseError),
    #[error("invalid PageX URL {0:?}")]
    InvalidPagexUrl(String),
    #[error("presentation carries no credential")]
    EmptyPresentation,
    #[error("presentation carries {0} credentials, expected one")]
    MultipleCredentials(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifiablePasskeyCredential {
    #[serde(rename = "@context")]
    pub context: Vec<String>,
    pub id: String,
    #[serde(rename = "type")]
    pub types: Vec<String>,
    pub issuer: String,
    #[serde(rename = "issuanceDate")]
    pub issuance_date: String,
    #[serde(rename = "credentialSubject")]
    pub subject: CredentialSubject,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof: Option<Proof>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialSubject {
    pub id: String,
    pub user: UserInfo,
    pub pagex: String,
    pub cred: SerializedCredential,
}

/// The passkey as stored in the subject: standard base64 identifiers and the
/// string-keyed COSE key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SerializedCredential {
    pub aaguid: String,
    pub credential_id: String,
    pub public_key: SerializedCoseKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proof {
    #[serde(rename = "type")]
    pub proof_type: String,
    pub created: String,
    #[serde(rename = "verificationMethod")]
    pub verification_method: String,
    #[serde(rename = "proofValue")]
    pub proof_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifiablePresentation {
    #[serde(rename = "@context")]
    pub context: Vec<String>,
    #[serde(rename = "type")]
    pub types: Vec<String>,
    #[serde(rename = "verifiableCredential")]
    pub credentials: Vec<VerifiablePasskeyCredential>,
}

/// What a verifier learns from a valid credential.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedPasskey {
    pub issuer: String,
    pub user: UserInfo,
    pub pagex_url: String,
    pub record: CredentialRecord,
    pub credential: VerifiablePasskeyCredential,
}

impl VerifiablePasskeyCredential {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable credential")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("serializable credential")
    }
}

/// Renders a JSON document with member names sorted (by UTF-16 code units)
/// and no insignificant whitespace. Refuses documents that already carry a
/// top-level `proof`.
pub fn canonicalize(document: &Value) -> Result<Vec<u8>, VcError> {
    if document.get("proof").is_some() {
        return Err(VcError::ProofPresent);
    }
    Ok(canonical_bytes(document))
}

fn canonical_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_by(|a, b| a.encode_utf16().cmp(b.encode_utf16()));
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend_from_slice(serde_json::to_string(key).unwrap().as_bytes());
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => out.extend_from_slice(serde_json::to_string(scalar).unwrap().as_bytes()),
    }
}

fn signing_input(document: &Value, proof_options: &Value) -> Result<Vec<u8>, VcError> {
    let mut input = Sha256::digest(canonical_bytes(proof_options)).to_vec();
    input.extend_from_slice(&Sha256::digest(canonicalize(document)?));
    Ok(input)
}

fn proof_options(proof_type: &str, created: &str, verification_method: &str) -> Value {
    serde_json::json!({
        "type": proof_type,
        "created": created,
        "verificationMethod": verification_method,
    })
}

/// Signs a proof-less document and returns the proof block to attach.
pub fn sign_document(
    document: &Value,
    signing_key: &SigningKey,
    verification_method: &str,
    created: DateTime<Utc>,
) -> Result<Proof, VcError> {
    let created = created.to_rfc3339_opts(SecondsFormat::Secs, true);
    let options = proof_options(PROOF_TYPE, &created, verification_method);
    let signature: Signature = signing_key.sign(&signing_input(document, &options)?);
    Ok(Proof {
        proof_type: PROOF_TYPE.to_string(),
        created,
        verification_method: verification_method.to_string(),
        proof_value: b64_url_encode(signature.to_bytes()),
    })
}

/// The issuer's verification method for `issuer_did`.
pub fn verification_method_id(issuer_did: &str) -> String {
    format!("{issuer_did}#{KEY_FRAGMENT}")
}

/// Accepts absolute https URLs, and plain http only for loopback hosts.
pub fn validate_pagex_url(pagex_url: &str) -> Result<Url, VcError> {
    let invalid = || VcError::InvalidPagexUrl(pagex_url.to_string());
    let url = Url::parse(pagex_url).map_err(|_| invalid())?;
    let loopback = matches!(url.host_str(), Some("localhost" | "127.0.0.1" | "[::1]"));
    match url.scheme() {
        "https" if url.host_str().is_some() => Ok(url),
        "http" if loopback => Ok(url),
        _ => Err(invalid()),
    }
}

pub fn issue_credential(
    record: &CredentialRecord,
    user: &UserInfo,
    pagex_url: &str,
    issuer_did: &str,
    issuer_signing_key: &SigningKey,
) -> Result<VerifiablePasskeyCredential, VcError> {
    issue_credential_at(record, user, pagex_url, issuer_did, issuer_signing_key, Utc::now())
}

pub fn issue_credential_at(
    record: &CredentialRecord,
    user: &UserInfo,
    pagex_url: &str,
    issuer_did: &str,
    issuer_signing_key: &SigningKey,
    now: DateTime<Utc>,
) -> Result<VerifiablePasskeyCredential, VcError> {
    validate_pagex_url(pagex_url)?;
    let mut credential = VerifiablePasskeyCredential {
        context: vec![CREDENTIALS_CONTEXT.to_string()],
        id: format!("urn:vpass:{}", b64_url_encode(record.credential_id())),
        types: vec![TYPE_CREDENTIAL.to_string(), TYPE_PASSKEY.to_string()],
        issuer: issuer_did.to_string(),
        issuance_date: now.naive_utc().format(ISSUANCE_DATE_FORMAT).to_string(),
        subject: CredentialSubject {
            id: SUBJECT_ID.to_string(),
            user: user.clone(),
            pagex: pagex_url.to_string(),
            cred: SerializedCredential {
                aaguid: b64_std_encode(record.aaguid()),
                credential_id: b64_std_encode(record.credential_id()),
                public_key: serialize_cose_key(record.public_key()),
            },
        },
        proof: None,
    };
    let proof = sign_document(
        &credential.to_value(),
        issuer_signing_key,
        &verification_method_id(issuer_did),
        now,
    )?;
    credential.proof = Some(proof);
    Ok(credential)
}

pub fn verify_credential(
    credential: &VerifiablePasskeyCredential,
    issuer_key: &VerifyingKey,
) -> Result<VerifiedPasskey, VcError> {
    verify_credential_value(&credential.to_value(), issuer_key)
}

/// Verifies a credential given as raw JSON, so that every member present in
/// the submitted document is covered by the signature check.
pub fn verify_credential_value(
    document: &Value,
    issuer_key: &VerifyingKey,
) -> Result<VerifiedPasskey, VcError> {
    verify_proof(document, issuer_key)?;
    let types = document
        .get("type")
        .and_then(Value::as_array)
        .ok_or(VcError::MissingType(TYPE_PASSKEY))?;
    for required in [TYPE_CREDENTIAL, TYPE_PASSKEY] {
        if !types.iter().any(|t| t.as_str() == Some(required)) {
            return Err(VcError::MissingType(required));
        }
    }
    parse_unverified(document)
}

/// Checks only the issuer's signature over the document.
pub fn verify_proof(document: &Value, issuer_key: &VerifyingKey) -> Result<(), VcError> {
    let malformed = |msg: String| VcError::MalformedDocument(msg);
    let object = document
        .as_object()
        .ok_or_else(|| malformed("document is not an object".into()))?;
    let proof_value = object
        .get("proof")
        .ok_or_else(|| malformed("missing proof".into()))?;
    let proof: Proof =
        serde_json::from_value(proof_value.clone()).map_err(|e| malformed(format!("proof: {e}")))?;
    let mut unsigned: Map<String, Value> = object.clone();
    unsigned.remove("proof");
    check_proof(&Value::Object(unsigned), &proof, issuer_key)
}

/// Parses and decodes a credential without checking its proof or types.
/// Only for inspection; never trust the result.
pub fn parse_unverified(document: &Value) -> Result<VerifiedPasskey, VcError> {
    let credential: VerifiablePasskeyCredential = serde_json::from_value(document.clone())
        .map_err(|e| VcError::MalformedDocument(e.to_string()))?;
    extract(credential)
}

fn check_proof(unsigned: &Value, proof: &Proof, issuer_key: &VerifyingKey) -> Result<(), VcError> {
    if proof.proof_type != PROOF_TYPE {
        return Err(VcError::ProofInvalid(format!(
            "unsupported proof type {:?}",
            proof.proof_type
        )));
    }
    let issuer = unsigned.get("issuer").and_then(Value::as_str).unwrap_or("");
    if proof.verification_method.split('#').next() != Some(issuer) {
        return Err(VcError::ProofInvalid(format!(
            "verification method {:?} does not belong to issuer {issuer:?}",
            proof.verification_method
        )));
    }
    let raw = b64_url_decode(&proof.proof_value)
        .map_err(|e| VcError::ProofInvalid(format!("proofValue: {e}")))?;
    let signature = Signature::from_slice(&raw)
        .map_err(|_| VcError::ProofInvalid("proofValue is not an ES256 signature".into()))?;
    let options = proof_options(&proof.proof_type, &proof.created, &proof.verification_method);
    issuer_key
        .verify(&signing_input(unsigned, &options)?, &signature)
        .map_err(|_| VcError::ProofInvalid("signature mismatch".into()))
}

fn extract(credential: VerifiablePasskeyCredential) -> Result<VerifiedPasskey, VcError> {
    let malformed = |msg: String| VcError::MalformedDocument(msg);
    if !credential.context.iter().any(|c| c == CREDENTIALS_CONTEXT) {
        return Err(malformed(format!("@context lacks {CREDENTIALS_CONTEXT}")));
    }
    parse_issuance_date(&credential.issuance_date)?;
    validate_pagex_url(&credential.subject.pagex)
        .map_err(|_| malformed(format!("pagex {:?} is not an absolute https URL", credential.subject.pagex)))?;

    let cred = &credential.subject.cred;
    let aaguid = b64_std_decode(&cred.aaguid).map_err(|e| malformed(format!("aaguid: {e}")))?;
    if aaguid.len() != AAGUID_LEN {
        return Err(malformed(format!("aaguid is {} bytes", aaguid.len())));
    }
    let credential_id = b64_std_decode(&cred.credential_id)
        .map_err(|e| malformed(format!("credential_id: {e}")))?;
    let public_key = deserialize_cose_key(&cred.public_key)?;
    let record = CredentialRecord::new(&aaguid, credential_id, public_key, 0)
        .map_err(|e| malformed(e.to_string()))?;

    Ok(VerifiedPasskey {
        issuer: credential.issuer.clone(),
        user: credential.subject.user.clone(),
        pagex_url: credential.subject.pagex.clone(),
        record,
        credential,
    })
}

/// Parses an issuance date with or without a `Z` suffix.
pub fn parse_issuance_date(s: &str) -> Result<DateTime<Utc>, VcError> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .map(|naive| naive.and_utc())
        .map_err(|e| VcError::MalformedDocument(format!("issuanceDate {s:?}: {e}")))
}

pub fn wrap_presentation(credential: VerifiablePasskeyCredential) -> Result<VerifiablePresentation, VcError> {
    if credential.proof.is_none() {
        return Err(VcError::MalformedDocument("cannot present an unsigned credential".into()));
    }
    Ok(VerifiablePresentation {
        context: vec![CREDENTIALS_CONTEXT.to_string()],
        types: vec![TYPE_PRESENTATION.to_string()],
        credentials: vec![credential],
    })
}

pub fn unwrap_presentation(presentation: VerifiablePresentation) -> Result<VerifiablePasskeyCredential, VcError> {
    let mut credentials = presentation.credentials;
    match credentials.len() {
        0 => Err(VcError::EmptyPresentation),
        1 => Ok(credentials.pop().unwrap()),
        n => Err(VcError::MultipleCredentials(n)),
    }
}

/// Extracts the credential from an uploaded document, which may be a bare
/// credential or a presentation wrapping exactly one. The credential is
/// returned as raw JSON for [`verify_credential_value`].
pub fn credential_from_upload(bytes: &[u8]) -> Result<Value, VcError> {
    let document: Value = serde_json::from_slice(bytes)
        .map_err(|e| VcError::MalformedDocument(format!("not a JSON document: {e}")))?;
    let is_presentation = document
        .get("type")
        .and_then(Value::as_array)
        .is_some_and(|types| types.iter().any(|t| t.as_str() == Some(TYPE_PRESENTATION)));
    if !is_presentation {
        return Ok(document);
    }
    let mut credentials = match document.get("verifiableCredential") {
        Some(Value::Array(items)) => items.clone(),
        Some(single @ Value::Object(_)) => vec![single.clone()],
        None => Vec::new(),
        Some(_) => {
            return Err(VcError::MalformedDocument(
                "verifiableCredential is not a list".into(),
            ))
        }
    };
    match credentials.len() {
        0 => Err(VcError::EmptyPresentation),
        1 => Ok(credentials.pop().unwrap()),
        n => Err(VcError::MultipleCredentials(n)),
    }
}
