//! Signed lifecycle transactions and their canonical binary form.
//!
//! The signed region is `kind tag | payload fields (declared order) | sender |
//! nonce`. The full wire form appends the 64-byte signature as one more
//! length-prefixed field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_control::OwnerType;
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{sha256, Address, Hash, Keypair, PublicKey, Signature};

/// Identifier of a tracked vaccine unit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct VaccineId(pub u64);

impl fmt::Display for VaccineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Patients are identified by the address of their own key, kept in a
/// registry separate from the party owner-type mapping.
pub type PatientId = Address;

/// True if `scaled` rounds to a representable fixed-point value.
fn fits_i32(scaled: f64) -> bool {
    scaled.is_finite() && scaled.round() >= f64::from(i32::MIN) && scaled.round() <= f64::from(i32::MAX)
}

/// Temperature in thousandths of a degree Celsius. Serializes as decimal °C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MilliCelsius(pub i32);

impl MilliCelsius {
    pub fn from_celsius(c: f64) -> Self {
        MilliCelsius((c * 1000.0).round() as i32)
    }

    pub fn as_celsius(self) -> f64 {
        f64::from(self.0) / 1000.0
    }
}

impl Serialize for MilliCelsius {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_celsius())
    }
}

impl<'de> Deserialize<'de> for MilliCelsius {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let c = f64::deserialize(d)?;
        if !fits_i32(c * 1000.0) {
            return Err(serde::de::Error::custom("temperature out of range"));
        }
        Ok(MilliCelsius::from_celsius(c))
    }
}

/// Angle in millionths of a degree. Serializes as decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MicroDegrees(pub i32);

impl MicroDegrees {
    pub fn from_degrees(d: f64) -> Self {
        MicroDegrees((d * 1_000_000.0).round() as i32)
    }

    pub fn as_degrees(self) -> f64 {
        f64::from(self.0) / 1_000_000.0
    }
}

impl Serialize for MicroDegrees {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_degrees())
    }
}

impl<'de> Deserialize<'de> for MicroDegrees {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = f64::deserialize(d)?;
        if !fits_i32(deg * 1_000_000.0) {
            return Err(serde::de::Error::custom("angle out of range"));
        }
        Ok(MicroDegrees::from_degrees(deg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: MicroDegrees,
    pub lon: MicroDegrees,
}

/// Sensor sample carried by a `TelemetryReport` transaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TelemetryPayload {
    pub batch: Vec<VaccineId>,
    #[serde(rename = "temperature_c")]
    pub temperature: MilliCelsius,
    pub location: GeoPoint,
    pub timestamp_ms: u64,
    /// Extra named conditions (milli-units). Recorded, never evaluated.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conditions: BTreeMap<String, i64>,
}

impl TelemetryPayload {
    /// Sorted, de-duplicated batch membership.
    pub fn batch_key(&self) -> Vec<VaccineId> {
        self.batch
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// A lifecycle call and its kind-specific payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Call {
    SetOwnerType {
        target: Address,
        role: OwnerType,
        public_key: PublicKey,
    },
    RegisterVaccine {
        vaccine_id: VaccineId,
    },
    ConfirmAuthority {
        vaccine_id: VaccineId,
    },
    HandoverRequest {
        vaccine_id: VaccineId,
        recipient: Address,
    },
    HandoverAccept {
        vaccine_id: VaccineId,
    },
    HandoverReject {
        vaccine_id: VaccineId,
    },
    Expire {
        vaccine_id: VaccineId,
    },
    Inject {
        vaccine_id: VaccineId,
        patient: PatientId,
    },
    /// Also accepted on the wire as `PATIENCE_RECEIVE_VACCINE`.
    #[serde(rename = "PATIENT_RECEIVE_VACCINE", alias = "PATIENCE_RECEIVE_VACCINE")]
    PatientReceive {
        vaccine_id: VaccineId,
    },
    TelemetryReport(TelemetryPayload),
    PatientRegister {
        patient: PatientId,
        public_key: PublicKey,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TxKind {
    SetOwnerType = 1,
    RegisterVaccine = 2,
    ConfirmAuthority = 3,
    HandoverRequest = 4,
    HandoverAccept = 5,
    HandoverReject = 6,
    Expire = 7,
    Inject = 8,
    PatientReceive = 9,
    TelemetryReport = 10,
    PatientRegister = 11,
}

impl TxKind {
    pub const ALL: [TxKind; 11] = [
        TxKind::SetOwnerType,
        TxKind::RegisterVaccine,
        TxKind::ConfirmAuthority,
        TxKind::HandoverRequest,
        TxKind::HandoverAccept,
        TxKind::HandoverReject,
        TxKind::Expire,
        TxKind::Inject,
        TxKind::PatientReceive,
        TxKind::TelemetryReport,
        TxKind::PatientRegister,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        TxKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or(DecodeError::UnknownKind(tag))
    }

    pub fn name(self) -> &'static str {
        match self {
            TxKind::SetOwnerType => "SET_OWNER_TYPE",
            TxKind::RegisterVaccine => "REGISTER_VACCINE",
            TxKind::ConfirmAuthority => "CONFIRM_AUTHORITY",
            TxKind::HandoverRequest => "HANDOVER_REQUEST",
            TxKind::HandoverAccept => "HANDOVER_ACCEPT",
            TxKind::HandoverReject => "HANDOVER_REJECT",
            TxKind::Expire => "EXPIRE",
            TxKind::Inject => "INJECT",
            TxKind::PatientReceive => "PATIENT_RECEIVE_VACCINE",
            TxKind::TelemetryReport => "TELEMETRY_REPORT",
            TxKind::PatientRegister => "PATIENT_REGISTER",
        }
    }
}

impl Call {
    pub fn kind(&self) -> TxKind {
        match self {
            Call::SetOwnerType { .. } => TxKind::SetOwnerType,
            Call::RegisterVaccine { .. } => TxKind::RegisterVaccine,
            Call::ConfirmAuthority { .. } => TxKind::ConfirmAuthority,
            Call::HandoverRequest { .. } => TxKind::HandoverRequest,
            Call::HandoverAccept { .. } => TxKind::HandoverAccept,
            Call::HandoverReject { .. } => TxKind::HandoverReject,
            Call::Expire { .. } => TxKind::Expire,
            Call::Inject { .. } => TxKind::Inject,
            Call::PatientReceive { .. } => TxKind::PatientReceive,
            Call::TelemetryReport(_) => TxKind::TelemetryReport,
            Call::PatientRegister { .. } => TxKind::PatientRegister,
        }
    }

    /// Vaccines whose lifecycle this call touches.
    pub fn vaccine_id(&self) -> Option<VaccineId> {
        match self {
            Call::RegisterVaccine { vaccine_id }
            | Call::ConfirmAuthority { vaccine_id }
            | Call::HandoverRequest { vaccine_id, .. }
            | Call::HandoverAccept { vaccine_id }
            | Call::HandoverReject { vaccine_id }
            | Call::Expire { vaccine_id }
            | Call::Inject { vaccine_id, .. }
            | Call::PatientReceive { vaccine_id } => Some(*vaccine_id),
            _ => None,
        }
    }

    fn encode_payload(&self, enc: &mut Encoder) {
        match self {
            Call::SetOwnerType {
                target,
                role,
                public_key,
            } => {
                enc.address(target).u8(role.tag()).public_key(public_key);
            }
            Call::RegisterVaccine { vaccine_id }
            | Call::ConfirmAuthority { vaccine_id }
            | Call::HandoverAccept { vaccine_id }
            | Call::HandoverReject { vaccine_id }
            | Call::Expire { vaccine_id }
            | Call::PatientReceive { vaccine_id } => {
                enc.u64(vaccine_id.0);
            }
            Call::HandoverRequest {
                vaccine_id,
                recipient,
            } => {
                enc.u64(vaccine_id.0).address(recipient);
            }
            Call::Inject {
                vaccine_id,
                patient,
            } => {
                enc.u64(vaccine_id.0).address(patient);
            }
            Call::TelemetryReport(t) => {
                let count = u32::try_from(t.batch.len()).expect("batch too large");
                enc.u32(count);
                for id in &t.batch {
                    enc.u64(id.0);
                }
                enc.i32(t.temperature.0)
                    .i32(t.location.lat.0)
                    .i32(t.location.lon.0)
                    .u64(t.timestamp_ms);
                let count = u32::try_from(t.conditions.len()).expect("too many conditions");
                enc.u32(count);
                for (name, value) in &t.conditions {
                    enc.str(name).i64(*value);
                }
            }
            Call::PatientRegister {
                patient,
                public_key,
            } => {
                enc.address(patient).public_key(public_key);
            }
        }
    }

    fn decode_payload(kind: TxKind, dec: &mut Decoder<'_>) -> Result<Call, DecodeError> {
        let call = match kind {
            TxKind::SetOwnerType => {
                let target = dec.address()?;
                let role = OwnerType::from_tag(dec.u8()?)
                    .ok_or(DecodeError::BadValue("owner type"))?;
                let public_key = dec.public_key()?;
                Call::SetOwnerType {
                    target,
                    role,
                    public_key,
                }
            }
            TxKind::RegisterVaccine => Call::RegisterVaccine {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::ConfirmAuthority => Call::ConfirmAuthority {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::HandoverRequest => Call::HandoverRequest {
                vaccine_id: VaccineId(dec.u64()?),
                recipient: dec.address()?,
            },
            TxKind::HandoverAccept => Call::HandoverAccept {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::HandoverReject => Call::HandoverReject {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::Expire => Call::Expire {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::Inject => Call::Inject {
                vaccine_id: VaccineId(dec.u64()?),
                patient: dec.address()?,
            },
            TxKind::PatientReceive => Call::PatientReceive {
                vaccine_id: VaccineId(dec.u64()?),
            },
            TxKind::TelemetryReport => {
                let count = dec.u32()? as usize;
                if count > dec.remaining() {
                    return Err(DecodeError::Truncated);
                }
                let batch = (0..count)
                    .map(|_| dec.u64().map(VaccineId))
                    .collect::<Result<Vec<_>, _>>()?;
                let temperature = MilliCelsius(dec.i32()?);
                let lat = MicroDegrees(dec.i32()?);
                let lon = MicroDegrees(dec.i32()?);
                let timestamp_ms = dec.u64()?;
                let count = dec.u32()? as usize;
                if count > dec.remaining() {
                    return Err(DecodeError::Truncated);
                }
                let mut conditions = BTreeMap::new();
                let mut last: Option<String> = None;
                for _ in 0..count {
                    let name = dec.string()?;
                    // Map keys must arrive in strictly ascending order to keep the
                    // encoding canonical.
                    if last.as_ref().is_some_and(|prev| *prev >= name) {
                        return Err(DecodeError::BadValue("condition order"));
                    }
                    let value = dec.i64()?;
                    last = Some(name.clone());
                    conditions.insert(name, value);
                }
                Call::TelemetryReport(TelemetryPayload {
                    batch,
                    temperature,
                    location: GeoPoint { lat, lon },
                    timestamp_ms,
                    conditions,
                })
            }
            TxKind::PatientRegister => Call::PatientRegister {
                patient: dec.address()?,
                public_key: dec.public_key()?,
            },
        };
        Ok(call)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignError {
    #[error("sender {sender} does not match signing key address {key}")]
    SenderKeyMismatch { sender: Address, key: Address },
}

/// A lifecycle call signed by its sender.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    #[serde(flatten)]
    pub call: Call,
    pub sender: Address,
    pub nonce: u64,
    #[serde(default)]
    pub signature: Signature,
}

impl Transaction {
    /// Unsigned transaction; call [`sign_transaction`] before submitting.
    pub fn new(call: Call, sender: Address, nonce: u64) -> Self {
        Transaction {
            call,
            sender,
            nonce,
            signature: Signature::EMPTY,
        }
    }

    pub fn kind(&self) -> TxKind {
        self.call.kind()
    }

    /// The signed region: kind tag, payload, sender, nonce.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_signed_region(&mut enc);
        enc.finish()
    }

    fn encode_signed_region(&self, enc: &mut Encoder) {
        enc.u8(self.kind().tag());
        self.call.encode_payload(enc);
        enc.address(&self.sender).u64(self.nonce);
    }

    /// Full wire form including the signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_signed_region(&mut enc);
        enc.signature(&self.signature);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let tx = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(tx)
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let kind = TxKind::from_tag(dec.u8()?)?;
        let call = Call::decode_payload(kind, dec)?;
        let sender = dec.address()?;
        let nonce = dec.u64()?;
        let signature = dec.signature()?;
        Ok(Transaction {
            call,
            sender,
            nonce,
            signature,
        })
    }

    /// Transaction id: SHA-256 of the full wire form.
    pub fn hash(&self) -> Hash {
        sha256(&self.to_bytes())
    }
}

/// Canonical encoding of the signed region of `tx`.
pub fn canonical_encode(tx: &Transaction) -> Vec<u8> {
    tx.signing_bytes()
}

/// Signs `tx` with `key`; the sender must be the key's address.
pub fn sign_transaction(key: &Keypair, mut tx: Transaction) -> Result<Transaction, SignError> {
    if tx.sender != key.address() {
        return Err(SignError::SenderKeyMismatch {
            sender: tx.sender,
            key: key.address(),
        });
    }
    tx.signature = key.sign(&tx.signing_bytes());
    Ok(tx)
}

/// Lookup of registered public keys by address.
pub trait KeyRegistry {
    fn public_key(&self, address: &Address) -> Option<PublicKey>;
}

impl KeyRegistry for BTreeMap<Address, PublicKey> {
    fn public_key(&self, address: &Address) -> Option<PublicKey> {
        self.get(address).copied()
    }
}

/// True iff the sender is registered and the signature verifies over the
/// canonical encoding. Never panics.
pub fn verify_transaction(tx: &Transaction, registry: &impl KeyRegistry) -> bool {
    if tx.sender.is_zero() {
        return false;
    }
    match registry.public_key(&tx.sender) {
        Some(key) => key.address() == tx.sender && key.verify(&tx.signing_bytes(), &tx.signature),
        None => false,
    }
}
