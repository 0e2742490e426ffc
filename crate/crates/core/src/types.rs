//! Shared domain values: challenges, user details, COSE keys and the
//! credential record a passkey is reduced to.

use chrono::{DateTime, Utc};
use p256::ecdsa::VerifyingKey;
use p256::elliptic_curve::sec1::FromEncodedPoint;
use p256::{EncodedPoint, PublicKey};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cose::CoseError;

/// Smallest accepted challenge length in bytes.
pub const MIN_CHALLENGE_LEN: usize = 16;
/// Length used when callers do not ask for a specific one.
pub const DEFAULT_CHALLENGE_LEN: usize = 32;

pub const COSE_KTY_EC2: i64 = 2;
pub const COSE_ALG_ES256: i64 = -7;
pub const COSE_CRV_P256: i64 = 1;

pub const AAGUID_LEN: usize = 16;
pub const MAX_CREDENTIAL_ID_LEN: usize = 1023;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChallengeError {
    #[error("challenge must be at least {MIN_CHALLENGE_LEN} bytes, got {0}")]
    LengthTooShort(usize),
}

/// A one-time random nonce for a challenge-response ceremony.
#[derive(Debug, Clone)]
pub struct Challenge {
    bytes: Vec<u8>,
    issued_at: DateTime<Utc>,
}

impl Challenge {
    /// Wraps bytes received from elsewhere, enforcing the minimum length.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ChallengeError> {
        if bytes.len() < MIN_CHALLENGE_LEN {
            return Err(ChallengeError::LengthTooShort(bytes.len()));
        }
        Ok(Self {
            bytes,
            issued_at: Utc::now(),
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn issued_at(&self) -> DateTime<Utc> {
        self.issued_at
    }

    pub fn to_b64url(&self) -> String {
        crate::encoding::b64_url_encode(&self.bytes)
    }
}

/// Two challenges are the same challenge when their bytes match; the issue
/// time is bookkeeping.
impl PartialEq for Challenge {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for Challenge {}

/// Draws `length` bytes from the operating system CSPRNG.
pub fn generate_challenge(length: usize) -> Result<Challenge, ChallengeError> {
    if length < MIN_CHALLENGE_LEN {
        return Err(ChallengeError::LengthTooShort(length));
    }
    let mut bytes = vec![0u8; length];
    OsRng.fill_bytes(&mut bytes);
    Ok(Challenge {
        bytes,
        issued_at: Utc::now(),
    })
}

/// User details carried in the credential subject. Field order matches the
/// stored document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserInfo {
    pub email: String,
    pub name: String,
    pub phone: String,
}

impl UserInfo {
    pub fn new(name: impl Into<String>, email: impl Into<String>, phone: impl Into<String>) -> Self {
        Self {
            email: email.into(),
            name: name.into(),
            phone: phone.into(),
        }
    }

    /// Names of the fields that are empty or whitespace-only.
    pub fn missing_fields(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.name.trim().is_empty() {
            missing.push("name");
        }
        if self.email.trim().is_empty() {
            missing.push("email");
        }
        if self.phone.trim().is_empty() {
            missing.push("phone");
        }
        missing
    }
}

/// An EC2 COSE public key restricted to ES256 over P-256.
///
/// Construction validates the profile and that `(x, y)` lies on the curve,
/// so every value of this type can be turned into a verifying key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoseKey {
    x: [u8; 32],
    y: [u8; 32],
}

impl CoseKey {
    /// Builds a key from its COSE parameters.
    pub fn from_parts(kty: i64, alg: i64, crv: i64, x: &[u8], y: &[u8]) -> Result<Self, CoseError> {
        if kty != COSE_KTY_EC2 || alg != COSE_ALG_ES256 || crv != COSE_CRV_P256 {
            return Err(CoseError::UnsupportedProfile(format!(
                "kty={kty} alg={alg} crv={crv}"
            )));
        }
        let x: [u8; 32] = x
            .try_into()
            .map_err(|_| CoseError::UnsupportedProfile(format!("x is {} bytes", x.len())))?;
        let y: [u8; 32] = y
            .try_into()
            .map_err(|_| CoseError::UnsupportedProfile(format!("y is {} bytes", y.len())))?;
        Self::es256(x, y)
    }

    pub fn es256(x: [u8; 32], y: [u8; 32]) -> Result<Self, CoseError> {
        let point = EncodedPoint::from_affine_coordinates(&x.into(), &y.into(), false);
        if Option::<PublicKey>::from(PublicKey::from_encoded_point(&point)).is_none() {
            return Err(CoseError::NotOnCurve);
        }
        Ok(Self { x, y })
    }

    pub fn from_verifying_key(key: &VerifyingKey) -> Self {
        let point = key.to_encoded_point(false);
        let mut x = [0u8; 32];
        let mut y = [0u8; 32];
        x.copy_from_slice(point.x().expect("uncompressed point"));
        y.copy_from_slice(point.y().expect("uncompressed point"));
        Self { x, y }
    }

    pub fn kty(&self) -> i64 {
        COSE_KTY_EC2
    }

    pub fn alg(&self) -> i64 {
        COSE_ALG_ES256
    }

    pub fn crv(&self) -> i64 {
        COSE_CRV_P256
    }

    pub fn x(&self) -> &[u8; 32] {
        &self.x
    }

    pub fn y(&self) -> &[u8; 32] {
        &self.y
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        let point = EncodedPoint::from_affine_coordinates(&self.x.into(), &self.y.into(), false);
        // on-curve was checked at construction
        VerifyingKey::from_encoded_point(&point).expect("validated P-256 point")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("aaguid must be {AAGUID_LEN} bytes, got {0}")]
    BadAaguid(usize),
    #[error("credential id must be 1..={MAX_CREDENTIAL_ID_LEN} bytes, got {0}")]
    BadCredentialId(usize),
}

/// The portable identity of a passkey.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialRecord {
    aaguid: [u8; AAGUID_LEN],
    credential_id: Vec<u8>,
    public_key: CoseKey,
    sign_count: u32,
}

impl CredentialRecord {
    pub fn new(
        aaguid: &[u8],
        credential_id: Vec<u8>,
        public_key: CoseKey,
        sign_count: u32,
    ) -> Result<Self, RecordError> {
        let aaguid: [u8; AAGUID_LEN] = aaguid
            .try_into()
            .map_err(|_| RecordError::BadAaguid(aaguid.len()))?;
        if credential_id.is_empty() || credential_id.len() > MAX_CREDENTIAL_ID_LEN {
            return Err(RecordError::BadCredentialId(credential_id.len()));
        }
        Ok(Self {
            aaguid,
            credential_id,
            public_key,
            sign_count,
        })
    }

    pub fn aaguid(&self) -> &[u8; AAGUID_LEN] {
        &self.aaguid
    }

    pub fn credential_id(&self) -> &[u8] {
        &self.credential_id
    }

    pub fn public_key(&self) -> &CoseKey {
        &self.public_key
    }

    pub fn sign_count(&self) -> u32 {
        self.sign_count
    }
}
