//! Query-parameter contract between the services and the PageX page.
//!
//! A service redirects the browser to
//! `<pagex>?mode=create|get&options=<b64url JSON>&redirect_uri=<url>`.
//! PageX runs the ceremony and navigates to `redirect_uri` with
//! `result=<b64url CeremonyResult>` appended, or `error=<code>` on failure.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use vpass_core::encoding::{b64_url_decode, b64_url_encode};
use vpass_core::CeremonyResult;

/// Practical ceiling on URLs carrying options or results.
pub const URL_BUDGET: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PagexError {
    #[error("missing query parameter {0:?}")]
    MissingParameter(&'static str),
    #[error("invalid query parameter {name:?}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Create,
    Get,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Create => "create",
            Mode::Get => "get",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntity {
    /// Opaque user handle, base64url.
    pub id: String,
    pub name: String,
    #[serde(rename = "displayName")]
    pub display_name: String,
}

/// Options for `navigator.credentials.create`, compact form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreationOptions {
    pub challenge: String,
    #[serde(rename = "rpId")]
    pub rp_id: String,
    pub user: UserEntity,
}

/// Options for `navigator.credentials.get`, compact form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOptions {
    pub challenge: String,
    #[serde(rename = "rpId")]
    pub rp_id: String,
    #[serde(rename = "allowCredentials")]
    pub allow_credentials: Vec<String>,
}

pub fn encode_options<T: Serialize>(options: &T) -> String {
    b64_url_encode(serde_json::to_vec(options).expect("serializable options"))
}

pub fn decode_options<T: for<'de> Deserialize<'de>>(encoded: &str) -> Result<T, PagexError> {
    let invalid = |reason: String| PagexError::InvalidParameter {
        name: "options",
        reason,
    };
    let bytes = b64_url_decode(encoded).map_err(|e| invalid(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| invalid(e.to_string()))
}

/// The three query parameters PageX is opened with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PagexRequest {
    pub mode: Mode,
    pub options: String,
    pub redirect_uri: Url,
}

impl PagexRequest {
    pub fn to_url(&self, pagex_url: &Url) -> Url {
        let mut url = pagex_url.clone();
        url.query_pairs_mut()
            .append_pair("mode", self.mode.as_str())
            .append_pair("options", &self.options)
            .append_pair("redirect_uri", self.redirect_uri.as_str());
        url
    }

    pub fn from_url(url: &Url) -> Result<Self, PagexError> {
        let param = |name: &'static str| {
            url.query_pairs()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.into_owned())
                .ok_or(PagexError::MissingParameter(name))
        };
        let mode = match param("mode")?.as_str() {
            "create" => Mode::Create,
            "get" => Mode::Get,
            other => {
                return Err(PagexError::InvalidParameter {
                    name: "mode",
                    reason: format!("{other:?}"),
                })
            }
        };
        let options = param("options")?;
        let redirect_uri = Url::parse(&param("redirect_uri")?).map_err(|e| PagexError::InvalidParameter {
            name: "redirect_uri",
            reason: e.to_string(),
        })?;
        Ok(Self {
            mode,
            options,
            redirect_uri,
        })
    }
}

/// Where PageX navigates after a successful ceremony.
pub fn result_url(redirect_uri: &Url, result: &CeremonyResult) -> Url {
    let mut url = redirect_uri.clone();
    url.query_pairs_mut().append_pair("result", &result.to_envelope());
    url
}

/// Where PageX navigates after a failed or cancelled ceremony.
pub fn error_url(redirect_uri: &Url, code: &str) -> Url {
    let mut url = redirect_uri.clone();
    url.query_pairs_mut().append_pair("error", code);
    url
}
