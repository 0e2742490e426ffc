//! Verifiable Passkeys: a FIDO2 passkey exported as a signed Verifiable
//! Credential so that any verifier can authenticate its holder without
//! contacting the issuer.
//!
//! This crate holds the protocol pieces shared by the issuer, the verifier
//! and the command line:
//!
//! - [`types`] and [`encoding`]: challenges, user details, keys, base64.
//! - [`cose`]: COSE key codecs, binary CBOR and the `base64_` string form.
//! - [`webauthn`]: clientDataJSON / authenticator data parsing and the
//!   attestation and assertion checks.
//! - [`vcred`]: the credential document, its canonical form and proof.
//! - [`did`]: did:web mapping, DID documents and a pinning resolver.
//! - [`authenticator`]: a software authenticator for headless ceremonies.

pub mod authenticator;
pub mod cose;
pub mod did;
pub mod encoding;
pub mod types;
pub mod vcred;
pub mod webauthn;

pub use authenticator::SoftAuthenticator;
pub use cose::SerializedCoseKey;
pub use did::{CachePolicy, DidDocument, DidResolver};
pub use types::{generate_challenge, Challenge, CoseKey, CredentialRecord, UserInfo};
pub use vcred::{VerifiablePasskeyCredential, VerifiablePresentation};
pub use webauthn::{CeremonyResult, Expectations};
