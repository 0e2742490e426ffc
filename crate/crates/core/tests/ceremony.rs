//! Cross-module properties: soft authenticator output against the
//! verification routines, and tamper resistance of issued credentials.

use p256::ecdsa::SigningKey;
use proptest::prelude::*;
use rand::rngs::OsRng;
use vpass_core::encoding::{b64_url_decode, b64_url_encode};
use vpass_core::vcred::{issue_credential, verify_credential_value, VcError};
use vpass_core::webauthn::{verify_assertion, verify_attestation, WebauthnError};
use vpass_core::{generate_challenge, CoseKey, Expectations, SoftAuthenticator, UserInfo};

const ISSUER: &str = "did:web:AdityaMitra5102.github.io/VPass-Issuer";
const PAGEX: &str = "https://adityamitra5102.github.io/VerifiablePasskey/pagex.html";

fn user() -> UserInfo {
    UserInfo::new("Aditya Mitra", "adityaarghya0@gmail.com", "+91xxxxxxxxxx")
}

#[derive(Debug, Clone, Copy)]
enum Fault {
    Challenge,
    Origin,
    RpId,
    Key,
    SignatureByte(usize),
}

fn fault_strategy() -> impl Strategy<Value = Fault> {
    prop_oneof![
        Just(Fault::Challenge),
        Just(Fault::Origin),
        Just(Fault::RpId),
        Just(Fault::Key),
        (0usize..70).prop_map(Fault::SignatureByte),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn honest_ceremonies_verify_and_single_faults_fail(
        host in "[a-z]{3,10}\\.example",
        fault in fault_strategy(),
    ) {
        let origin = format!("https://{host}");
        let mut auth = SoftAuthenticator::new();

        let enroll = generate_challenge(32).unwrap();
        let created = auth.make_credential(&host, &enroll, &user(), &origin);
        let record = verify_attestation(&created, &Expectations::new(&enroll, &origin, &host)).unwrap();

        let challenge = generate_challenge(32).unwrap();
        let ids = vec![record.credential_id().to_vec()];
        let mut result = auth.get_assertion(&host, &challenge, &ids, &origin).unwrap();
        prop_assert_eq!(
            verify_assertion(&result, &Expectations::new(&challenge, &origin, &host), record.public_key(), 0),
            Ok(1)
        );

        let other_challenge = generate_challenge(32).unwrap();
        let other_key = CoseKey::from_verifying_key(SigningKey::random(&mut OsRng).verifying_key());
        let evil_origin = "https://evil.example".to_string();
        let evil_rp = format!("{host}.evil");
        let mut challenge_ref = &challenge;
        let mut origin_ref = origin.as_str();
        let mut rp_ref = host.as_str();
        let mut key_ref = record.public_key();
        let expected = match fault {
            Fault::Challenge => { challenge_ref = &other_challenge; WebauthnError::ChallengeMismatch }
            Fault::Origin => {
                origin_ref = &evil_origin;
                WebauthnError::OriginMismatch { expected: evil_origin.clone(), actual: origin.clone() }
            }
            Fault::RpId => { rp_ref = &evil_rp; WebauthnError::RpIdMismatch }
            Fault::Key => { key_ref = &other_key; WebauthnError::BadSignature }
            Fault::SignatureByte(i) => {
                let mut sig = b64_url_decode(result.signature_b64url.as_ref().unwrap()).unwrap();
                let i = i % sig.len();
                sig[i] ^= 0x01;
                result.signature_b64url = Some(b64_url_encode(sig));
                WebauthnError::BadSignature
            }
        };
        prop_assert_eq!(
            verify_assertion(&result, &Expectations::new(challenge_ref, origin_ref, rp_ref), key_ref, 0),
            Err(expected)
        );
    }
}

#[test]
fn attestation_wrong_origin_or_challenge() {
    let mut auth = SoftAuthenticator::new();
    let rp = "adityamitra5102.github.io";
    let origin = "https://adityamitra5102.github.io";
    let challenge = generate_challenge(32).unwrap();
    let created = auth.make_credential(rp, &challenge, &user(), origin);
    assert!(matches!(
        verify_attestation(&created, &Expectations::new(&challenge, "https://evil.example", rp)),
        Err(WebauthnError::OriginMismatch { .. })
    ));
    let other = generate_challenge(32).unwrap();
    assert_eq!(
        verify_attestation(&created, &Expectations::new(&other, origin, rp)).unwrap_err(),
        WebauthnError::ChallengeMismatch
    );
    assert_eq!(
        verify_attestation(&created, &Expectations::new(&challenge, origin, "github.io")).unwrap_err(),
        WebauthnError::RpIdMismatch
    );
    // an assertion is not an attestation
    let ids = vec![created.credential_id().unwrap()];
    let assertion = auth.get_assertion(rp, &challenge, &ids, origin).unwrap();
    assert!(verify_attestation(&assertion, &Expectations::new(&challenge, origin, rp)).is_err());
    let mut unsigned = assertion;
    unsigned.signature_b64url = None;
    assert!(matches!(
        verify_attestation(&unsigned, &Expectations::new(&challenge, origin, rp)),
        Err(WebauthnError::UnexpectedCeremonyType { .. })
    ));
}

#[test]
fn counter_regression() {
    let mut auth = SoftAuthenticator::new();
    let rp = "example.org";
    let origin = "https://example.org";
    let challenge = generate_challenge(32).unwrap();
    let created = auth.make_credential(rp, &challenge, &user(), origin);
    let record = verify_attestation(&created, &Expectations::new(&challenge, origin, rp)).unwrap();
    let ids = vec![record.credential_id().to_vec()];
    let result = auth.get_assertion(rp, &challenge, &ids, origin).unwrap();
    let expect = Expectations::new(&challenge, origin, rp);
    assert_eq!(verify_assertion(&result, &expect, record.public_key(), 0), Ok(1));
    assert_eq!(
        verify_assertion(&result, &expect, record.public_key(), 1),
        Err(WebauthnError::CounterRegression { last: 1, new: 1 })
    );
    assert_eq!(
        verify_assertion(&result, &expect, record.public_key(), 5),
        Err(WebauthnError::CounterRegression { last: 5, new: 1 })
    );
}

#[test]
fn origin_check_can_be_skipped() {
    let mut auth = SoftAuthenticator::new();
    let rp = "example.org";
    let challenge = generate_challenge(32).unwrap();
    let created = auth.make_credential(rp, &challenge, &user(), "https://example.org");
    let record =
        verify_attestation(&created, &Expectations::new(&challenge, "https://example.org", rp)).unwrap();
    let ids = vec![record.credential_id().to_vec()];
    let result = auth
        .get_assertion(rp, &challenge, &ids, "https://login.example.org")
        .unwrap();
    let mut expect = Expectations::new(&challenge, "https://example.org", rp);
    assert!(verify_assertion(&result, &expect, record.public_key(), 0).is_err());
    expect.origin = None;
    assert_eq!(verify_assertion(&result, &expect, record.public_key(), 0), Ok(1));
}

/// Every single-character substitution of a compact issued document is
/// rejected as either an invalid proof or a malformed document.
#[test]
fn any_character_mutation_is_rejected() {
    let issuer_key = SigningKey::random(&mut OsRng);
    let mut auth = SoftAuthenticator::new();
    let rp = "adityamitra5102.github.io";
    let challenge = generate_challenge(32).unwrap();
    let created = auth.make_credential(rp, &challenge, &user(), "https://adityamitra5102.github.io");
    let record = verify_attestation(
        &created,
        &Expectations::new(&challenge, "https://adityamitra5102.github.io", rp),
    )
    .unwrap();
    let vc = issue_credential(&record, &user(), PAGEX, ISSUER, &issuer_key).unwrap();
    let text = serde_json::to_string(&vc).unwrap();
    assert!(text.is_ascii());
    let original: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(verify_credential_value(&original, issuer_key.verifying_key()).is_ok());

    let mut checked = 0;
    for (i, c) in text.char_indices() {
        for replacement in ['a', '0', '"', ' ', '}'] {
            if replacement == c {
                continue;
            }
            let mut mutated = text.clone();
            mutated.replace_range(i..i + 1, &replacement.to_string());
            let outcome = match serde_json::from_str::<serde_json::Value>(&mutated) {
                Err(_) => continue, // not even JSON: rejected before verification
                Ok(value) => verify_credential_value(&value, issuer_key.verifying_key()),
            };
            checked += 1;
            assert!(
                matches!(outcome, Err(VcError::ProofInvalid(_) | VcError::MalformedDocument(_))),
                "position {i} {c:?} -> {replacement:?}: {outcome:?}"
            );
        }
    }
    assert!(checked > text.len());
}
