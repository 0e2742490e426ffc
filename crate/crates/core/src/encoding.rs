//! Base64 helpers.
//!
//! Stored credential documents carry bytes as padded standard base64 (the
//! `+/` alphabet). Anything that travels through a URL uses the URL-safe
//! alphabet without padding.

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("invalid base64: {0}")]
    InvalidBase64(String),
    #[error("invalid base64url: {0}")]
    InvalidBase64Url(String),
}

pub fn b64_std_encode(bytes: impl AsRef<[u8]>) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_std_decode(s: &str) -> Result<Vec<u8>, DecodeError> {
    STANDARD
        .decode(s)
        .map_err(|e| DecodeError::InvalidBase64(e.to_string()))
}

pub fn b64_url_encode(bytes: impl AsRef<[u8]>) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

pub fn b64_url_decode(s: &str) -> Result<Vec<u8>, DecodeError> {
    URL_SAFE_NO_PAD
        .decode(s)
        .map_err(|e| DecodeError::InvalidBase64Url(e.to_string()))
}
