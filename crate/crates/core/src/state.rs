//! World state and the transaction executor.
//!
//! `State` folds signed transactions: it checks the signature and nonce, then
//! dispatches to the access-control, lifecycle or telemetry rules. A block is
//! executed all-or-nothing.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::access_control::{AccessError, OwnershipBook, PartyRegistry};
use crate::codec::Encoder;
use crate::crypto::{sha256, Address, Hash, PublicKey};
use crate::ledger::tx::{verify_transaction, Call, KeyRegistry, Transaction, VaccineId};
use crate::telemetry::{TelemetryError, TelemetryLog};
use crate::vaccine_supply::{self as supply, PatientRegistry, SupplyError, VaccineRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("sender has no registered key")]
    UnknownSender,
    #[error("signature does not verify")]
    BadSignature,
    #[error("nonce {got} is not above last committed nonce {last}")]
    StaleNonce { last: u64, got: u64 },
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Supply(#[from] SupplyError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

impl ExecError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ExecError::UnknownSender => "UNKNOWN_SENDER",
            ExecError::BadSignature => "BAD_SIGNATURE",
            ExecError::StaleNonce { .. } => "STALE_NONCE",
            ExecError::Access(e) => e.code(),
            ExecError::Supply(e) => e.code(),
            ExecError::Telemetry(e) => e.code(),
        }
    }
}

/// Failure of one transaction inside a block.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transaction {index} rejected: {error}")]
pub struct BlockRejection {
    pub index: usize,
    pub error: ExecError,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct State {
    pub(crate) parties: PartyRegistry,
    pub(crate) patients: PatientRegistry,
    pub(crate) vaccines: BTreeMap<VaccineId, VaccineRecord>,
    pub(crate) ownership: OwnershipBook,
    pub(crate) nonces: BTreeMap<Address, u64>,
    pub(crate) telemetry: TelemetryLog,
}

impl State {
    /// State implied by a genesis block: the given keys hold `AUTHORITY`.
    pub fn with_authorities<'a>(authorities: impl IntoIterator<Item = &'a PublicKey>) -> Self {
        State {
            parties: PartyRegistry::with_authorities(authorities),
            ..State::default()
        }
    }

    pub fn parties(&self) -> &PartyRegistry {
        &self.parties
    }

    pub fn patients(&self) -> &PatientRegistry {
        &self.patients
    }

    pub fn vaccines(&self) -> &BTreeMap<VaccineId, VaccineRecord> {
        &self.vaccines
    }

    pub fn vaccine(&self, id: VaccineId) -> Option<&VaccineRecord> {
        self.vaccines.get(&id)
    }

    pub fn ownership(&self) -> &OwnershipBook {
        &self.ownership
    }

    pub fn telemetry(&self) -> &TelemetryLog {
        &self.telemetry
    }

    pub fn last_nonce(&self, address: &Address) -> Option<u64> {
        self.nonces.get(address).copied()
    }

    pub fn next_nonce(&self, address: &Address) -> u64 {
        self.last_nonce(address).map_or(1, |n| n + 1)
    }

    /// Verifies and executes one transaction. On error the state is unchanged.
    pub fn apply(&mut self, tx: &Transaction) -> Result<(), ExecError> {
        if self.public_key(&tx.sender).is_none() {
            return Err(ExecError::UnknownSender);
        }
        if !verify_transaction(tx, self) {
            return Err(ExecError::BadSignature);
        }
        self.apply_verified(tx)
    }

    /// Executes a transaction whose signature has already been checked.
    pub(crate) fn apply_verified(&mut self, tx: &Transaction) -> Result<(), ExecError> {
        if let Some(last) = self.last_nonce(&tx.sender) {
            if tx.nonce <= last {
                return Err(ExecError::StaleNonce {
                    last,
                    got: tx.nonce,
                });
            }
        }
        self.dispatch(tx)?;
        self.nonces.insert(tx.sender, tx.nonce);
        Ok(())
    }

    fn dispatch(&mut self, tx: &Transaction) -> Result<(), ExecError> {
        let caller = tx.sender;
        match &tx.call {
            Call::SetOwnerType {
                target,
                role,
                public_key,
            } => {
                self.parties
                    .validate_set_owner_type(&caller, target, public_key)?;
                if self.patients.contains(target) {
                    return Err(AccessError::AddressInUse.into());
                }
                self.parties.assign(*target, *role, *public_key);
            }
            Call::RegisterVaccine { vaccine_id } => {
                supply::register_vaccine(self, caller, *vaccine_id)?
            }
            Call::ConfirmAuthority { vaccine_id } => {
                supply::confirm_authority(self, caller, *vaccine_id)?
            }
            Call::HandoverRequest {
                vaccine_id,
                recipient,
            } => supply::handover_request(self, caller, *vaccine_id, *recipient)?,
            Call::HandoverAccept { vaccine_id } => {
                supply::handover_accept(self, caller, *vaccine_id)?
            }
            Call::HandoverReject { vaccine_id } => {
                supply::handover_reject(self, caller, *vaccine_id)?
            }
            Call::Expire { vaccine_id } => supply::expire(self, caller, *vaccine_id)?,
            Call::Inject {
                vaccine_id,
                patient,
            } => supply::inject(self, caller, *vaccine_id, *patient)?,
            Call::PatientReceive { vaccine_id } => {
                supply::patient_receive_vaccine(self, caller, *vaccine_id)?
            }
            Call::TelemetryReport(report) => {
                let role = crate::access_control::owner_type_of(&self.parties, &caller);
                self.telemetry.record(caller, role, report)?
            }
            Call::PatientRegister {
                patient,
                public_key,
            } => supply::register_patient(self, caller, *patient, *public_key)?,
        }
        Ok(())
    }

    /// Executes every transaction in order; all-or-nothing.
    pub fn execute_all<'a>(
        &self,
        txs: impl IntoIterator<Item = &'a Transaction>,
    ) -> Result<State, BlockRejection> {
        let mut next = self.clone();
        for (index, tx) in txs.into_iter().enumerate() {
            next.apply(tx)
                .map_err(|error| BlockRejection { index, error })?;
        }
        Ok(next)
    }

    /// SHA-256 over a canonical encoding of the full state.
    pub fn digest(&self) -> Hash {
        let mut enc = Encoder::new();
        enc.str("parties");
        for (addr, role) in self.parties.entries() {
            enc.address(addr).u8(role.tag());
        }
        for (addr, key) in self.parties.keys() {
            enc.address(addr).public_key(key);
        }
        enc.str("patients");
        for (addr, key) in self.patients.iter() {
            enc.address(addr).public_key(key);
        }
        enc.str("vaccines");
        for (id, rec) in &self.vaccines {
            enc.u64(id.0)
                .address(&rec.manufacturer_id)
                .bool(rec.is_valid)
                .bool(rec.is_injected)
                .u32(rec.owner_history.len() as u32);
            for owner in &rec.owner_history {
                enc.address(owner);
            }
            enc.address(&rec.injected_patient.unwrap_or(Address::ZERO))
                .bool(rec.receipt_confirmed)
                .u8(rec.phase.tag());
        }
        enc.str("ownership");
        for (id, own) in self.ownership.iter() {
            enc.u64(id.0)
                .address(&own.current_owner)
                .address(&own.next_owner);
        }
        enc.str("nonces");
        for (addr, nonce) in &self.nonces {
            enc.address(addr).u64(*nonce);
        }
        enc.str("telemetry");
        self.telemetry.encode_into(&mut enc);
        sha256(enc.as_slice())
    }

    /// Serializable snapshot of a vaccine for queries.
    pub fn snapshot(&self, id: VaccineId) -> Option<VaccineSnapshot> {
        let (record, ownership) = supply::trace(self, id).ok()?;
        Some(VaccineSnapshot {
            vaccine_id: id,
            record,
            ownership,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VaccineSnapshot {
    pub vaccine_id: VaccineId,
    pub record: VaccineRecord,
    pub ownership: crate::access_control::OwnershipState,
}

impl KeyRegistry for State {
    fn public_key(&self, address: &Address) -> Option<PublicKey> {
        self.parties
            .public_key(address)
            .or_else(|| self.patients.public_key(address))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access_control::OwnerType;
    use crate::crypto::Keypair;
    use crate::ledger::tx::sign_transaction;

    fn signed(key: &Keypair, call: Call, nonce: u64) -> Transaction {
        sign_transaction(key, Transaction::new(call, key.address(), nonce)).unwrap()
    }

    fn grant(auth: &Keypair, who: &Keypair, role: OwnerType, nonce: u64) -> Transaction {
        signed(
            auth,
            Call::SetOwnerType {
                target: who.address(),
                role,
                public_key: who.public(),
            },
            nonce,
        )
    }

    #[test]
    fn nonce_must_increase() {
        let auth = Keypair::from_label("auth");
        let m = Keypair::from_label("m");
        let mut s = State::with_authorities([&auth.public()]);
        s.apply(&grant(&auth, &m, OwnerType::Manufacturer, 5)).unwrap();
        assert_eq!(s.next_nonce(&auth.address()), 6);
        let err = s
            .apply(&grant(&auth, &m, OwnerType::Manufacturer, 5))
            .unwrap_err();
        assert_eq!(err, ExecError::StaleNonce { last: 5, got: 5 });
        assert_eq!(err.code(), "STALE_NONCE");
    }

    #[test]
    fn unknown_sender_and_bad_signature() {
        let auth = Keypair::from_label("auth");
        let stranger = Keypair::from_label("stranger");
        let mut s = State::with_authorities([&auth.public()]);
        let tx = signed(
            &stranger,
            Call::RegisterVaccine {
                vaccine_id: VaccineId(1),
            },
            1,
        );
        assert_eq!(s.apply(&tx), Err(ExecError::UnknownSender));

        let mut forged = grant(&auth, &stranger, OwnerType::Authority, 1);
        forged.signature = stranger.sign(&forged.signing_bytes());
        assert_eq!(s.apply(&forged), Err(ExecError::BadSignature));
    }

    #[test]
    fn failed_tx_leaves_state_untouched() {
        let auth = Keypair::from_label("auth");
        let t = Keypair::from_label("t");
        let mut s = State::with_authorities([&auth.public()]);
        s.apply(&grant(&auth, &t, OwnerType::Transporter, 1)).unwrap();
        let before = s.clone();
        let err = s
            .apply(&signed(
                &t,
                Call::RegisterVaccine {
                    vaccine_id: VaccineId(1),
                },
                1,
            ))
            .unwrap_err();
        assert_eq!(err.code(), "NOT_MANUFACTURER");
        assert_eq!(s, before);
        assert_eq!(s.digest(), before.digest());
    }

    #[test]
    fn block_execution_is_atomic() {
        let auth = Keypair::from_label("auth");
        let m = Keypair::from_label("m");
        let s = State::with_authorities([&auth.public()]);
        let txs = vec![
            grant(&auth, &m, OwnerType::Manufacturer, 1),
            signed(
                &m,
                Call::ConfirmAuthority {
                    vaccine_id: VaccineId(1),
                },
                1,
            ),
        ];
        let rej = s.execute_all(&txs).unwrap_err();
        assert_eq!(rej.index, 1);
        assert_eq!(s.next_nonce(&auth.address()), 1);
    }

    #[test]
    fn digest_is_order_independent_of_insertion_but_sensitive_to_content() {
        let auth = Keypair::from_label("auth");
        let a = Keypair::from_label("a");
        let b = Keypair::from_label("b");
        let base = State::with_authorities([&auth.public()]);
        let s1 = base
            .execute_all(&[
                grant(&auth, &a, OwnerType::Transporter, 1),
                grant(&auth, &b, OwnerType::Distributer, 2),
            ])
            .unwrap();
        let s2 = base
            .execute_all(&[
                grant(&auth, &b, OwnerType::Distributer, 1),
                grant(&auth, &a, OwnerType::Transporter, 2),
            ])
            .unwrap();
        // same roles, same final nonce
        assert_eq!(s1.digest(), s2.digest());
        let s3 = base
            .execute_all(&[grant(&auth, &a, OwnerType::Transporter, 1)])
            .unwrap();
        assert_ne!(s1.digest(), s3.digest());
    }

    #[test]
    fn patient_address_cannot_become_party() {
        let auth = Keypair::from_label("auth");
        let v = Keypair::from_label("v");
        let p = Keypair::from_label("p");
        let mut s = State::with_authorities([&auth.public()]);
        s.apply(&grant(&auth, &v, OwnerType::Vaccinator, 1)).unwrap();
        s.apply(&signed(
            &v,
            Call::PatientRegister {
                patient: p.address(),
                public_key: p.public(),
            },
            1,
        ))
        .unwrap();
        let err = s
            .apply(&grant(&auth, &p, OwnerType::Transporter, 2))
            .unwrap_err();
        assert_eq!(err.code(), "ADDRESS_IN_USE");
        assert_eq!(s.public_key(&p.address()), Some(p.public()));
    }
}
