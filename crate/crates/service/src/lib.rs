//! HTTP services for Verifiable Passkeys: the issuer (enrollment and
//! credential issuance) and the verifier (authentication from an uploaded
//! credential), plus the shared session, configuration and key-file code.

pub mod clock;
pub mod config;
mod error;
pub mod issuer;
pub mod keys;
pub mod pagex;
pub mod sessions;
pub mod verifier;

use std::future::Future;

use axum::Router;
use tokio::net::TcpListener;

pub use error::ErrorBody;
pub use issuer::{Issuer, IssuerError};
pub use verifier::{AuthOutcome, StorageReport, Verifier, VerifierError};

/// Serves `router` on `listener` until `shutdown` resolves, then finishes
/// in-flight requests and returns.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
}
