//! COSE key codecs.
//!
//! Two representations are supported:
//!
//! * the binary CBOR map embedded in WebAuthn attested credential data, and
//! * the string-keyed JSON form stored in a Verifiable Passkey document,
//!   where integer parameters stay integers and byte parameters become
//!   standard base64 with the literal prefix `base64_`.
//!
//! Only the EC2 / ES256 / P-256 profile is accepted in either direction.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::encoding::{b64_std_decode, b64_std_encode};
use crate::types::CoseKey;

/// Prefix marking a byte-valued entry in the serialized form.
pub const BYTES_PREFIX: &str = "base64_";

const LABEL_KTY: i64 = 1;
const LABEL_ALG: i64 = 3;
const LABEL_CRV: i64 = -1;
const LABEL_X: i64 = -2;
const LABEL_Y: i64 = -3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoseError {
    #[error("byte-valued entry {0:?} lacks the \"base64_\" prefix")]
    MissingPrefix(String),
    #[error("entry {label:?} is not valid base64: {reason}")]
    InvalidBase64 { label: String, reason: String },
    #[error("unsupported COSE key: {0}")]
    UnsupportedProfile(String),
    #[error("point is not on the P-256 curve")]
    NotOnCurve,
    #[error("malformed CBOR: {0}")]
    MalformedCbor(String),
}

/// The string-keyed serialized key, e.g.
/// `{"1": 2, "3": -7, "-1": 1, "-2": "base64_...", "-3": "base64_..."}`.
///
/// Entry order is preserved as read and emitted as `1, 3, -1, -2, -3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SerializedCoseKey(Map<String, Value>);

impl SerializedCoseKey {
    pub fn from_map(entries: Map<String, Value>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &Map<String, Value> {
        &self.0
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}

/// One decoded parameter of the serialized form.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Param {
    Int(i64),
    Bytes(Vec<u8>),
}

pub fn serialize_cose_key(key: &CoseKey) -> SerializedCoseKey {
    let mut entries = Map::new();
    entries.insert(LABEL_KTY.to_string(), Value::from(key.kty()));
    entries.insert(LABEL_ALG.to_string(), Value::from(key.alg()));
    entries.insert(LABEL_CRV.to_string(), Value::from(key.crv()));
    entries.insert(
        LABEL_X.to_string(),
        Value::from(format!("{BYTES_PREFIX}{}", b64_std_encode(key.x()))),
    );
    entries.insert(
        LABEL_Y.to_string(),
        Value::from(format!("{BYTES_PREFIX}{}", b64_std_encode(key.y()))),
    );
    SerializedCoseKey(entries)
}

pub fn deserialize_cose_key(serialized: &SerializedCoseKey) -> Result<CoseKey, CoseError> {
    let mut params = KeyParams::default();
    for (label, value) in &serialized.0 {
        let param = match value {
            Value::Number(n) => Param::Int(n.as_i64().ok_or_else(|| {
                CoseError::UnsupportedProfile(format!("entry {label:?} is not an integer"))
            })?),
            Value::String(s) => {
                let encoded = s
                    .strip_prefix(BYTES_PREFIX)
                    .ok_or_else(|| CoseError::MissingPrefix(label.clone()))?;
                Param::Bytes(b64_std_decode(encoded).map_err(|e| CoseError::InvalidBase64 {
                    label: label.clone(),
                    reason: e.to_string(),
                })?)
            }
            other => {
                return Err(CoseError::UnsupportedProfile(format!(
                    "entry {label:?} has unsupported value {other}"
                )))
            }
        };
        let label: i64 = label
            .parse()
            .map_err(|_| CoseError::UnsupportedProfile(format!("label {label:?}")))?;
        params.set(label, param)?;
    }
    params.finish()
}

/// Collects parameters by label, rejecting duplicates and unknown labels.
#[derive(Default)]
struct KeyParams {
    kty: Option<i64>,
    alg: Option<i64>,
    crv: Option<i64>,
    x: Option<Vec<u8>>,
    y: Option<Vec<u8>>,
}

impl KeyParams {
    fn set(&mut self, label: i64, param: Param) -> Result<(), CoseError> {
        let wrong_type = || CoseError::UnsupportedProfile(format!("label {label} has wrong type"));
        let duplicate = || CoseError::UnsupportedProfile(format!("duplicate label {label}"));
        match (label, param) {
            (LABEL_KTY, Param::Int(v)) => replace_once(&mut self.kty, v).ok_or_else(duplicate),
            (LABEL_ALG, Param::Int(v)) => replace_once(&mut self.alg, v).ok_or_else(duplicate),
            (LABEL_CRV, Param::Int(v)) => replace_once(&mut self.crv, v).ok_or_else(duplicate),
            (LABEL_X, Param::Bytes(v)) => replace_once(&mut self.x, v).ok_or_else(duplicate),
            (LABEL_Y, Param::Bytes(v)) => replace_once(&mut self.y, v).ok_or_else(duplicate),
            (LABEL_KTY | LABEL_ALG | LABEL_CRV | LABEL_X | LABEL_Y, _) => Err(wrong_type()),
            _ => Err(CoseError::UnsupportedProfile(format!("unknown label {label}"))),
        }
    }

    fn finish(self) -> Result<CoseKey, CoseError> {
        let missing = |name: &str| CoseError::UnsupportedProfile(format!("missing {name}"));
        let kty = self.kty.ok_or_else(|| missing("kty (1)"))?;
        let alg = self.alg.ok_or_else(|| missing("alg (3)"))?;
        let crv = self.crv.ok_or_else(|| missing("crv (-1)"))?;
        let x = self.x.ok_or_else(|| missing("x (-2)"))?;
        let y = self.y.ok_or_else(|| missing("y (-3)"))?;
        CoseKey::from_parts(kty, alg, crv, &x, &y)
    }
}

fn replace_once<T>(slot: &mut Option<T>, value: T) -> Option<()> {
    if slot.is_some() {
        return None;
    }
    *slot = Some(value);
    Some(())
}

/// Emits the canonical CBOR map: shortest-form heads, labels ordered
/// `1, 3, -1, -2, -3` (canonical length-then-bytewise key order).
pub fn emit_cbor_cose_key(key: &CoseKey) -> Vec<u8> {
    let mut out = Vec::with_capacity(77);
    out.push(0xa5);
    write_int(&mut out, LABEL_KTY);
    write_int(&mut out, key.kty());
    write_int(&mut out, LABEL_ALG);
    write_int(&mut out, key.alg());
    write_int(&mut out, LABEL_CRV);
    write_int(&mut out, key.crv());
    write_int(&mut out, LABEL_X);
    write_bytes(&mut out, key.x());
    write_int(&mut out, LABEL_Y);
    write_bytes(&mut out, key.y());
    out
}

fn write_head(out: &mut Vec<u8>, major: u8, arg: u64) {
    let major = major << 5;
    match arg {
        0..=23 => out.push(major | arg as u8),
        24..=0xff => out.extend_from_slice(&[major | 24, arg as u8]),
        0x100..=0xffff => {
            out.push(major | 25);
            out.extend_from_slice(&(arg as u16).to_be_bytes());
        }
        0x1_0000..=0xffff_ffff => {
            out.push(major | 26);
            out.extend_from_slice(&(arg as u32).to_be_bytes());
        }
        _ => {
            out.push(major | 27);
            out.extend_from_slice(&arg.to_be_bytes());
        }
    }
}

fn write_int(out: &mut Vec<u8>, v: i64) {
    if v >= 0 {
        write_head(out, 0, v as u64);
    } else {
        write_head(out, 1, (-1 - v) as u64);
    }
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    write_head(out, 2, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

/// Parses a COSE key map from the front of `bytes`, returning the key and
/// whatever follows it.
pub fn parse_cbor_cose_key(bytes: &[u8]) -> Result<(CoseKey, &[u8]), CoseError> {
    let mut reader = CborReader { buf: bytes, pos: 0 };
    let (major, len) = reader.head()?;
    if major != 5 {
        return Err(CoseError::MalformedCbor(format!(
            "expected a map, found major type {major}"
        )));
    }
    let mut params = KeyParams::default();
    for _ in 0..len {
        let label = match reader.item()? {
            CborItem::Int(label) => label,
            other => {
                return Err(CoseError::UnsupportedProfile(format!(
                    "non-integer label {other:?}"
                )))
            }
        };
        let param = match reader.item()? {
            CborItem::Int(v) => Param::Int(v),
            CborItem::Bytes(b) => Param::Bytes(b.to_vec()),
            CborItem::Other(major) => {
                return Err(CoseError::UnsupportedProfile(format!(
                    "label {label} has CBOR major type {major}"
                )))
            }
        };
        params.set(label, param)?;
    }
    let key = params.finish()?;
    Ok((key, &bytes[reader.pos..]))
}

#[derive(Debug)]
enum CborItem<'a> {
    Int(i64),
    Bytes(&'a [u8]),
    /// A well-formed item of a type a COSE key never uses (text, arrays...).
    Other(u8),
}

struct CborReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CborReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CoseError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| CoseError::MalformedCbor("unexpected end of input".into()))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn head(&mut self) -> Result<(u8, u64), CoseError> {
        let initial = self.take(1)?[0];
        let major = initial >> 5;
        let info = initial & 0x1f;
        let arg = match info {
            0..=23 => info as u64,
            24 => self.take(1)?[0] as u64,
            25 => u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as u64,
            26 => u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as u64,
            27 => u64::from_be_bytes(self.take(8)?.try_into().unwrap()),
            31 => return Err(CoseError::MalformedCbor("indefinite length".into())),
            _ => return Err(CoseError::MalformedCbor(format!("reserved info {info}"))),
        };
        Ok((major, arg))
    }

    fn item(&mut self) -> Result<CborItem<'a>, CoseError> {
        let (major, arg) = self.head()?;
        match major {
            0 => i64::try_from(arg)
                .map(CborItem::Int)
                .map_err(|_| CoseError::UnsupportedProfile("integer out of range".into())),
            1 => i64::try_from(arg)
                .map(|v| CborItem::Int(-1 - v))
                .map_err(|_| CoseError::UnsupportedProfile("integer out of range".into())),
            2 => {
                let len = usize::try_from(arg)
                    .map_err(|_| CoseError::MalformedCbor("length overflow".into()))?;
                Ok(CborItem::Bytes(self.take(len)?))
            }
            3 => {
                let len = usize::try_from(arg)
                    .map_err(|_| CoseError::MalformedCbor("length overflow".into()))?;
                self.take(len)?;
                Ok(CborItem::Other(major))
            }
            4 | 5 => {
                let count = if major == 5 { arg.saturating_mul(2) } else { arg };
                for _ in 0..count {
                    self.item()?;
                }
                Ok(CborItem::Other(major))
            }
            6 => {
                self.item()?;
                Ok(CborItem::Other(major))
            }
            _ => Ok(CborItem::Other(major)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use p256::ecdsa::SigningKey;
    use proptest::prelude::*;
    use rand::rngs::OsRng;
    use serde_json::json;

    const SAMPLE_X: &str = "base64_zHFxjAiAduj7MrqDQBIIjh/99t42khQt0IUchij5xCE=";
    const SAMPLE_Y: &str = "base64_sx9hzYecDFcgyMZ1fcu1obA4oc3rN9KjgNz1m5I7MVA=";

    fn sample_block() -> SerializedCoseKey {
        serde_json::from_value(json!({
            "1": 2, "3": -7, "-1": 1, "-2": SAMPLE_X, "-3": SAMPLE_Y
        }))
        .unwrap()
    }

    fn random_key() -> CoseKey {
        CoseKey::from_verifying_key(SigningKey::random(&mut OsRng).verifying_key())
    }

    /// CBOR bytes of the key map built with ciborium, independently of the
    /// emitter under test.
    fn ciborium_map(key: &CoseKey, extra: Option<(i64, ciborium::Value)>) -> Vec<u8> {
        use ciborium::Value as C;
        let mut entries = vec![
            (C::from(1), C::from(2)),
            (C::from(3), C::from(-7)),
            (C::from(-1), C::from(1)),
            (C::from(-2), C::Bytes(key.x().to_vec())),
            (C::from(-3), C::Bytes(key.y().to_vec())),
        ];
        if let Some((label, value)) = extra {
            entries.push((C::from(label), value));
        }
        let mut out = Vec::new();
        ciborium::into_writer(&C::Map(entries), &mut out).unwrap();
        out
    }

    #[test]
    fn sample_block_deserializes() {
        let key = deserialize_cose_key(&sample_block()).unwrap();
        assert_eq!(key.x().len(), 32);
        assert_eq!(key.y().len(), 32);
        assert_eq!(key.x()[0], 0xcc);
        assert_eq!(key.y()[0], 0xb3);
    }

    #[test]
    fn sample_block_reserializes_identically() {
        let reserialized = serialize_cose_key(&deserialize_cose_key(&sample_block()).unwrap());
        assert_eq!(reserialized, sample_block());
        let labels: Vec<&str> = reserialized.entries().keys().map(String::as_str).collect();
        assert_eq!(labels, ["1", "3", "-1", "-2", "-3"]);
        assert_eq!(
            serde_json::to_string(&reserialized).unwrap(),
            format!(r#"{{"1":2,"3":-7,"-1":1,"-2":"{SAMPLE_X}","-3":"{SAMPLE_Y}"}}"#)
        );
    }

    #[test]
    fn order_of_input_entries_does_not_matter() {
        let shuffled: SerializedCoseKey = serde_json::from_value(json!({
            "-3": SAMPLE_Y, "-1": 1, "1": 2, "-2": SAMPLE_X, "3": -7
        }))
        .unwrap();
        assert_eq!(
            deserialize_cose_key(&shuffled).unwrap(),
            deserialize_cose_key(&sample_block()).unwrap()
        );
    }

    #[test]
    fn zero_x_serializes_to_known_string() {
        // the all-zero x is not on the curve, so build the string directly
        let mut entries = serialize_cose_key(&random_key()).into_map();
        let expected = "base64_AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA=";
        assert_eq!(expected.len() - BYTES_PREFIX.len(), 44);
        assert_eq!(format!("{BYTES_PREFIX}{}", b64_std_encode([0u8; 32])), expected);
        entries.insert("-2".into(), json!(expected));
        assert_eq!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)).unwrap_err(),
            CoseError::NotOnCurve
        );
    }

    #[test]
    fn missing_prefix_rejected() {
        let mut entries = sample_block().into_map();
        entries.insert("-2".into(), json!("zHFxjAiAduj7MrqDQBIIjh/99t42khQt0IUchij5xCE="));
        assert_eq!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)).unwrap_err(),
            CoseError::MissingPrefix("-2".into())
        );
    }

    #[test]
    fn prefix_is_case_sensitive() {
        let mut entries = sample_block().into_map();
        entries.insert("-3".into(), json!(SAMPLE_Y.replacen("base64_", "BASE64_", 1)));
        assert_eq!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)).unwrap_err(),
            CoseError::MissingPrefix("-3".into())
        );
    }

    #[test]
    fn bad_base64_after_prefix() {
        let mut entries = sample_block().into_map();
        entries.insert("-2".into(), json!("base64_!!!"));
        assert!(matches!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)),
            Err(CoseError::InvalidBase64 { .. })
        ));
    }

    #[test]
    fn incomplete_or_extra_labels_rejected() {
        let mut entries = sample_block().into_map();
        entries.shift_remove("3");
        assert!(matches!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)),
            Err(CoseError::UnsupportedProfile(_))
        ));

        let mut entries = sample_block().into_map();
        entries.insert("-4".into(), json!(0));
        assert!(matches!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)),
            Err(CoseError::UnsupportedProfile(_))
        ));

        let mut entries = sample_block().into_map();
        entries.insert("3".into(), json!(-8));
        assert!(matches!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)),
            Err(CoseError::UnsupportedProfile(_))
        ));

        let mut entries = sample_block().into_map();
        entries.insert("1".into(), json!("base64_Ag=="));
        assert!(matches!(
            deserialize_cose_key(&SerializedCoseKey::from_map(entries)),
            Err(CoseError::UnsupportedProfile(_))
        ));
    }

    #[test]
    fn cbor_from_independent_encoder_parses() {
        let key = random_key();
        let bytes = ciborium_map(&key, None);
        let (parsed, rest) = parse_cbor_cose_key(&bytes).unwrap();
        assert_eq!(parsed, key);
        assert!(rest.is_empty());
    }

    #[test]
    fn emitter_matches_independent_encoder() {
        let key = random_key();
        assert_eq!(emit_cbor_cose_key(&key), ciborium_map(&key, None));
    }

    #[test]
    fn cbor_trailing_bytes_are_returned() {
        let key = random_key();
        let mut bytes = emit_cbor_cose_key(&key);
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let (_, rest) = parse_cbor_cose_key(&bytes).unwrap();
        assert_eq!(rest, &[1, 2, 3, 4]);
    }

    #[test]
    fn cbor_truncation_is_malformed() {
        let bytes = emit_cbor_cose_key(&random_key());
        for cut in 0..bytes.len() {
            assert!(
                matches!(
                    parse_cbor_cose_key(&bytes[..cut]),
                    Err(CoseError::MalformedCbor(_))
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn cbor_extra_label_rejected() {
        let bytes = ciborium_map(&random_key(), Some((-4, ciborium::Value::from(0))));
        assert!(matches!(
            parse_cbor_cose_key(&bytes),
            Err(CoseError::UnsupportedProfile(_))
        ));
    }

    #[test]
    fn cbor_not_a_map() {
        assert!(matches!(
            parse_cbor_cose_key(&[0x82, 0x01, 0x02]),
            Err(CoseError::MalformedCbor(_))
        ));
    }

    #[test]
    fn emission_is_deterministic_with_five_entries() {
        let key = random_key();
        let a = emit_cbor_cose_key(&key);
        assert_eq!(a, emit_cbor_cose_key(&key));
        assert_eq!(a[0], 0xa5);
        assert_eq!(a.len(), 1 + 2 + 2 + 2 + (1 + 2 + 32) * 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn cbor_round_trip(seed in any::<[u8; 32]>()) {
            let Ok(signing) = SigningKey::from_bytes(&seed.into()) else { return Ok(()); };
            let key = CoseKey::from_verifying_key(signing.verifying_key());
            let bytes = emit_cbor_cose_key(&key);
            let (parsed, rest) = parse_cbor_cose_key(&bytes).unwrap();
            prop_assert_eq!(parsed, key);
            prop_assert!(rest.is_empty());
        }

        #[test]
        fn serialized_round_trip(seed in any::<[u8; 32]>()) {
            let Ok(signing) = SigningKey::from_bytes(&seed.into()) else { return Ok(()); };
            let key = CoseKey::from_verifying_key(signing.verifying_key());
            let text = serde_json::to_string(&serialize_cose_key(&key)).unwrap();
            let back: SerializedCoseKey = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(deserialize_cose_key(&back).unwrap(), key);
        }
    }
}
