//! In-process FIDO2 authenticator emulator.
//!
//! Produces the same attestation and assertion envelopes a browser would
//! hand to PageX, so enrollment and authentication can run headlessly.
//! Exported state contains private keys in clear; it is a test fixture.

use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{b64_url_decode, b64_url_encode};
use crate::types::{Challenge, CoseKey, UserInfo};
use crate::webauthn::{AttestedCredential, AuthFlags, AuthenticatorData, CeremonyResult, CeremonyType};

/// AAGUID reported by the emulator.
pub const EMULATOR_AAGUID: [u8; 16] = *b"VPASS-SOFT-AUTH0";

const STATE_FORMAT: &str = "vpass-soft-authenticator";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthenticatorError {
    #[error("no stored credential matches the allow-list")]
    NoMatchingCredential,
    #[error("credential exists but is bound to a different RP ID")]
    WrongRpId,
    #[error("malformed authenticator state: {0}")]
    MalformedState(String),
}

struct StoredCredential {
    rp_id: String,
    credential_id: Vec<u8>,
    key: SigningKey,
    sign_count: u32,
    user: UserInfo,
}

pub struct SoftAuthenticator {
    credentials: Vec<StoredCredential>,
    user_presence: bool,
}

impl Default for SoftAuthenticator {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for SoftAuthenticator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SoftAuthenticator")
            .field("credentials", &self.credentials.len())
            .field("user_presence", &self.user_presence)
            .finish()
    }
}

impl SoftAuthenticator {
    pub fn new() -> Self {
        Self {
            credentials: Vec::new(),
            user_presence: true,
        }
    }

    /// When false, ceremonies complete without the user-present flag, as if
    /// the user had not touched the device.
    pub fn set_user_presence(&mut self, granted: bool) {
        self.user_presence = granted;
    }

    pub fn credential_count(&self) -> usize {
        self.credentials.len()
    }

    /// Public key of a stored credential.
    pub fn public_key(&self, credential_id: &[u8]) -> Option<CoseKey> {
        self.credentials
            .iter()
            .find(|c| c.credential_id == credential_id)
            .map(|c| CoseKey::from_verifying_key(c.key.verifying_key()))
    }

    pub fn sign_count(&self, credential_id: &[u8]) -> Option<u32> {
        self.credentials
            .iter()
            .find(|c| c.credential_id == credential_id)
            .map(|c| c.sign_count)
    }

    fn flags(&self, extra: u8) -> AuthFlags {
        let up = if self.user_presence { AuthFlags::USER_PRESENT } else { 0 };
        AuthFlags(up | extra)
    }

    pub fn make_credential(
        &mut self,
        rp_id: &str,
        challenge: &Challenge,
        user: &UserInfo,
        origin: &str,
    ) -> CeremonyResult {
        let key = SigningKey::random(&mut OsRng);
        let mut credential_id = vec![0u8; 32];
        OsRng.fill_bytes(&mut credential_id);

        let auth_data = AuthenticatorData {
            rp_id_hash: Sha256::digest(rp_id.as_bytes()).into(),
            flags: self.flags(AuthFlags::ATTESTED_DATA),
            sign_count: 0,
            attested: Some(AttestedCredential {
                aaguid: EMULATOR_AAGUID,
                credential_id: credential_id.clone(),
                public_key: CoseKey::from_verifying_key(key.verifying_key()),
            }),
        };
        let client_data = client_data_json(CeremonyType::Create, challenge, origin);

        self.credentials.push(StoredCredential {
            rp_id: rp_id.to_string(),
            credential_id: credential_id.clone(),
            key,
            sign_count: 0,
            user: user.clone(),
        });

        CeremonyResult {
            credential_id_b64url: b64_url_encode(&credential_id),
            client_data_b64url: b64_url_encode(&client_data),
            authenticator_data_b64url: b64_url_encode(auth_data.to_bytes()),
            signature_b64url: None,
        }
    }

    /// Signs a "get" ceremony with the first allowed credential bound to
    /// `rp_id`. An empty allow-list selects the newest credential for the RP.
    pub fn get_assertion(
        &mut self,
        rp_id: &str,
        challenge: &Challenge,
        allowed_credential_ids: &[Vec<u8>],
        origin: &str,
    ) -> Result<CeremonyResult, AuthenticatorError> {
        let flags = self.flags(0);
        let index = if allowed_credential_ids.is_empty() {
            self.credentials.iter().rposition(|c| c.rp_id == rp_id)
        } else {
            self.credentials.iter().position(|c| {
                c.rp_id == rp_id && allowed_credential_ids.contains(&c.credential_id)
            })
        };
        let Some(index) = index else {
            let known_elsewhere = self
                .credentials
                .iter()
                .any(|c| allowed_credential_ids.contains(&c.credential_id));
            return Err(if known_elsewhere {
                AuthenticatorError::WrongRpId
            } else {
                AuthenticatorError::NoMatchingCredential
            });
        };

        let cred = &mut self.credentials[index];
        cred.sign_count = cred.sign_count.wrapping_add(1);
        let auth_data = AuthenticatorData {
            rp_id_hash: Sha256::digest(rp_id.as_bytes()).into(),
            flags,
            sign_count: cred.sign_count,
            attested: None,
        }
        .to_bytes();
        let client_data = client_data_json(CeremonyType::Get, challenge, origin);

        let mut signed = auth_data.clone();
        signed.extend_from_slice(&Sha256::digest(&client_data));
        let signature: Signature = cred.key.sign(&signed);

        Ok(CeremonyResult {
            credential_id_b64url: b64_url_encode(&cred.credential_id),
            client_data_b64url: b64_url_encode(&client_data),
            authenticator_data_b64url: b64_url_encode(auth_data),
            signature_b64url: Some(b64_url_encode(signature.to_der().as_bytes())),
        })
    }

    pub fn export_state(&self) -> Vec<u8> {
        let state = StateFile {
            format: STATE_FORMAT.to_string(),
            version: STATE_VERSION,
            user_presence: self.user_presence,
            credentials: self
                .credentials
                .iter()
                .map(|c| StateCredential {
                    rp_id: c.rp_id.clone(),
                    credential_id: b64_url_encode(&c.credential_id),
                    private_key: b64_url_encode(c.key.to_bytes()),
                    sign_count: c.sign_count,
                    user: c.user.clone(),
                })
                .collect(),
        };
        serde_json::to_vec_pretty(&state).expect("serializable state")
    }

    pub fn import_state(bytes: &[u8]) -> Result<Self, AuthenticatorError> {
        let malformed = |e: String| AuthenticatorError::MalformedState(e);
        let state: StateFile = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
        if state.format != STATE_FORMAT {
            return Err(malformed(format!("unknown format {:?}", state.format)));
        }
        if state.version != STATE_VERSION {
            return Err(malformed(format!("unsupported version {}", state.version)));
        }
        let credentials = state
            .credentials
            .into_iter()
            .map(|c| {
                let credential_id =
                    b64_url_decode(&c.credential_id).map_err(|e| malformed(e.to_string()))?;
                let scalar = b64_url_decode(&c.private_key).map_err(|e| malformed(e.to_string()))?;
                let key = SigningKey::from_slice(&scalar).map_err(|e| malformed(e.to_string()))?;
                Ok(StoredCredential {
                    rp_id: c.rp_id,
                    credential_id,
                    key,
                    sign_count: c.sign_count,
                    user: c.user,
                })
            })
            .collect::<Result<Vec<_>, AuthenticatorError>>()?;
        Ok(Self {
            credentials,
            user_presence: state.user_presence,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format: String,
    version: u32,
    user_presence: bool,
    credentials: Vec<StateCredential>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateCredential {
    rp_id: String,
    credential_id: String,
    private_key: String,
    sign_count: u32,
    user: UserInfo,
}

fn client_data_json(ceremony: CeremonyType, challenge: &Challenge, origin: &str) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({
        "type": ceremony.as_str(),
        "challenge": challenge.to_b64url(),
        "origin": origin,
        "crossOrigin": false,
    }))
    .expect("serializable client data")
}
