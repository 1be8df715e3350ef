//! Vaccine lifecycle: registration, authority confirmation, the two-phase
//! handover, expiry, injection and patient confirmation.
//!
//! Every operation validates all of its preconditions before touching state,
//! so an `Err` leaves the state exactly as it was.
//!
//! Phase transitions:
//!
//! ```text
//! REGISTERED --confirm--> CONFIRMED --request--> IN_TRANSIT_PENDING
//!                              ^                      |
//!                              +----accept/reject-----+
//! CONFIRMED --inject--> INJECTED --patient receive--> CLOSED
//! REGISTERED | CONFIRMED | IN_TRANSIT_PENDING --expire--> EXPIRED
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_control::{owner_type_of, OwnerType, OwnershipState};
use crate::crypto::{Address, PublicKey};
use crate::ledger::tx::{PatientId, VaccineId};
use crate::state::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecyclePhase {
    Registered,
    Confirmed,
    InTransitPending,
    Expired,
    Injected,
    Closed,
}

impl LifecyclePhase {
    pub fn name(self) -> &'static str {
        match self {
            LifecyclePhase::Registered => "REGISTERED",
            LifecyclePhase::Confirmed => "CONFIRMED",
            LifecyclePhase::InTransitPending => "IN_TRANSIT_PENDING",
            LifecyclePhase::Expired => "EXPIRED",
            LifecyclePhase::Injected => "INJECTED",
            LifecyclePhase::Closed => "CLOSED",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            LifecyclePhase::Registered => 0,
            LifecyclePhase::Confirmed => 1,
            LifecyclePhase::InTransitPending => 2,
            LifecyclePhase::Expired => 3,
            LifecyclePhase::Injected => 4,
            LifecyclePhase::Closed => 5,
        }
    }

    /// No further lifecycle transitions are committable.
    pub fn is_terminal(self) -> bool {
        matches!(self, LifecyclePhase::Closed | LifecyclePhase::Expired)
    }
}

/// Per-vaccine metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaccineRecord {
    pub manufacturer_id: Address,
    pub is_valid: bool,
    pub is_injected: bool,
    pub owner_history: Vec<Address>,
    pub injected_patient: Option<PatientId>,
    pub receipt_confirmed: bool,
    pub phase: LifecyclePhase,
}

impl VaccineRecord {
    /// Phase implied by the flags, the pending-handover state and the history.
    /// Expiry before confirmation leaves the flags identical to `REGISTERED`,
    /// so only that case falls back to the stored phase.
    pub fn derived_phase(&self, ownership: &OwnershipState) -> LifecyclePhase {
        if self.receipt_confirmed {
            LifecyclePhase::Closed
        } else if self.is_injected {
            LifecyclePhase::Injected
        } else if ownership.handover_pending() {
            LifecyclePhase::InTransitPending
        } else if self.is_valid {
            LifecyclePhase::Confirmed
        } else if self.owner_history.len() > 1 || self.phase == LifecyclePhase::Expired {
            LifecyclePhase::Expired
        } else {
            LifecyclePhase::Registered
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupplyError {
    #[error("caller is not a manufacturer")]
    NotManufacturer,
    #[error("vaccine {0} is already registered")]
    DuplicateVaccineId(VaccineId),
    #[error("caller is not an authority")]
    NotAuthority,
    #[error("vaccine {0} is not registered")]
    UnknownVaccine(VaccineId),
    #[error("vaccine is in phase {0:?}")]
    WrongPhase(LifecyclePhase),
    #[error("caller does not currently own the vaccine")]
    NotCurrentOwner,
    #[error("vaccine is not valid")]
    InvalidVaccine,
    #[error("a handover is already pending")]
    HandoverAlreadyPending,
    #[error("recipient has no custody role")]
    RecipientUnregistered,
    #[error("cannot hand a vaccine over to its current owner")]
    SelfHandover,
    #[error("no handover is pending")]
    NoPendingHandover,
    #[error("caller is not the designated recipient")]
    NotDesignatedRecipient,
    #[error("vaccine has already been injected")]
    AlreadyInjected,
    #[error("caller has no registered role")]
    UnregisteredCaller,
    #[error("caller is not a vaccinator")]
    NotVaccinator,
    #[error("a handover is pending")]
    HandoverPending,
    #[error("patient is not registered")]
    UnknownPatient,
    #[error("vaccine has not been injected")]
    NotInjected,
    #[error("caller is not the injected patient")]
    WrongPatient,
    #[error("vaccine lifecycle is closed")]
    AlreadyClosed,
    #[error("only distributers and vaccinators may register patients")]
    NotPatientRegistrar,
    #[error("patient address does not derive from the supplied key")]
    PatientKeyMismatch,
    #[error("patient is already registered")]
    PatientAlreadyRegistered,
    #[error("address already belongs to a registered party")]
    PatientAddressInUse,
}

impl SupplyError {
    pub fn code(&self) -> &'static str {
        match self {
            SupplyError::NotManufacturer => "NOT_MANUFACTURER",
            SupplyError::DuplicateVaccineId(_) => "DUPLICATE_VACCINE_ID",
            SupplyError::NotAuthority => "NOT_AUTHORITY",
            SupplyError::UnknownVaccine(_) => "UNKNOWN_VACCINE",
            SupplyError::WrongPhase(_) => "WRONG_PHASE",
            SupplyError::NotCurrentOwner => "NOT_CURRENT_OWNER",
            SupplyError::InvalidVaccine => "INVALID_VACCINE",
            SupplyError::HandoverAlreadyPending => "HANDOVER_ALREADY_PENDING",
            SupplyError::RecipientUnregistered => "RECIPIENT_UNREGISTERED",
            SupplyError::SelfHandover => "SELF_HANDOVER",
            SupplyError::NoPendingHandover => "NO_PENDING_HANDOVER",
            SupplyError::NotDesignatedRecipient => "NOT_DESIGNATED_RECIPIENT",
            SupplyError::AlreadyInjected => "ALREADY_INJECTED",
            SupplyError::UnregisteredCaller => "UNREGISTERED_CALLER",
            SupplyError::NotVaccinator => "NOT_VACCINATOR",
            SupplyError::HandoverPending => "HANDOVER_PENDING",
            SupplyError::UnknownPatient => "UNKNOWN_PATIENT",
            SupplyError::NotInjected => "NOT_INJECTED",
            SupplyError::WrongPatient => "WRONG_PATIENT",
            SupplyError::AlreadyClosed => "ALREADY_CLOSED",
            SupplyError::NotPatientRegistrar => "NOT_PATIENT_REGISTRAR",
            SupplyError::PatientKeyMismatch => "PATIENT_KEY_MISMATCH",
            SupplyError::PatientAlreadyRegistered => "PATIENT_ALREADY_REGISTERED",
            SupplyError::PatientAddressInUse => "ADDRESS_IN_USE",
        }
    }
}

/// Patients and their keys, separate from the party owner-type mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRegistry {
    keys: BTreeMap<PatientId, PublicKey>,
}

impl PatientRegistry {
    pub fn public_key(&self, patient: &PatientId) -> Option<PublicKey> {
        self.keys.get(patient).copied()
    }

    pub fn contains(&self, patient: &PatientId) -> bool {
        self.keys.contains_key(patient)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PatientId, &PublicKey)> {
        self.keys.iter()
    }
}

/// A vaccine's record and ownership, looked up together. Fails with
/// `UnknownVaccine`, or `AlreadyClosed` once the lifecycle is closed.
fn open_vaccine(
    state: &State,
    id: VaccineId,
) -> Result<(&VaccineRecord, OwnershipState), SupplyError> {
    let record = state
        .vaccines
        .get(&id)
        .ok_or(SupplyError::UnknownVaccine(id))?;
    if record.phase == LifecyclePhase::Closed {
        return Err(SupplyError::AlreadyClosed);
    }
    let ownership = *state
        .ownership
        .get(id)
        .expect("every registered vaccine has an ownership entry");
    Ok((record, ownership))
}

fn record_mut(state: &mut State, id: VaccineId) -> &mut VaccineRecord {
    state.vaccines.get_mut(&id).expect("validated above")
}

fn ownership_mut(state: &mut State, id: VaccineId) -> &mut OwnershipState {
    state.ownership.get_mut(id).expect("validated above")
}

pub fn register_vaccine(state: &mut State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    if owner_type_of(&state.parties, &caller) != OwnerType::Manufacturer {
        return Err(SupplyError::NotManufacturer);
    }
    if state.vaccines.contains_key(&id) {
        return Err(SupplyError::DuplicateVaccineId(id));
    }
    state.vaccines.insert(
        id,
        VaccineRecord {
            manufacturer_id: caller,
            is_valid: false,
            is_injected: false,
            owner_history: vec![caller],
            injected_patient: None,
            receipt_confirmed: false,
            phase: LifecyclePhase::Registered,
        },
    );
    state.ownership.insert(id, OwnershipState::held_by(caller));
    Ok(())
}

pub fn confirm_authority(state: &mut State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    let (record, _) = open_vaccine(state, id)?;
    if owner_type_of(&state.parties, &caller) != OwnerType::Authority {
        return Err(SupplyError::NotAuthority);
    }
    if record.phase != LifecyclePhase::Registered {
        return Err(SupplyError::WrongPhase(record.phase));
    }
    let record = record_mut(state, id);
    record.is_valid = true;
    record.owner_history.push(caller);
    record.phase = LifecyclePhase::Confirmed;
    *ownership_mut(state, id) = OwnershipState::held_by(caller);
    Ok(())
}

pub fn handover_request(
    state: &mut State,
    caller: Address,
    id: VaccineId,
    recipient: Address,
) -> Result<(), SupplyError> {
    let (record, ownership) = open_vaccine(state, id)?;
    if ownership.current_owner != caller {
        return Err(SupplyError::NotCurrentOwner);
    }
    if record.is_injected {
        return Err(SupplyError::AlreadyInjected);
    }
    if !record.is_valid {
        return Err(SupplyError::InvalidVaccine);
    }
    if ownership.handover_pending() {
        return Err(SupplyError::HandoverAlreadyPending);
    }
    if !owner_type_of(&state.parties, &recipient).can_take_custody() {
        return Err(SupplyError::RecipientUnregistered);
    }
    if recipient == caller {
        return Err(SupplyError::SelfHandover);
    }
    ownership_mut(state, id).next_owner = recipient;
    record_mut(state, id).phase = LifecyclePhase::InTransitPending;
    Ok(())
}

fn check_recipient(state: &State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    let (_, ownership) = open_vaccine(state, id)?;
    if !ownership.handover_pending() {
        return Err(SupplyError::NoPendingHandover);
    }
    if ownership.next_owner != caller {
        return Err(SupplyError::NotDesignatedRecipient);
    }
    Ok(())
}

pub fn handover_accept(state: &mut State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    check_recipient(state, caller, id)?;
    *ownership_mut(state, id) = OwnershipState::held_by(caller);
    let record = record_mut(state, id);
    record.owner_history.push(caller);
    record.phase = LifecyclePhase::Confirmed;
    Ok(())
}

pub fn handover_reject(state: &mut State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    check_recipient(state, caller, id)?;
    ownership_mut(state, id).next_owner = Address::ZERO;
    record_mut(state, id).phase = LifecyclePhase::Confirmed;
    Ok(())
}

pub fn expire(state: &mut State, caller: Address, id: VaccineId) -> Result<(), SupplyError> {
    let (record, _) = open_vaccine(state, id)?;
    if owner_type_of(&state.parties, &caller) == OwnerType::None {
        return Err(SupplyError::UnregisteredCaller);
    }
    if record.is_injected {
        return Err(SupplyError::AlreadyInjected);
    }
    if record.phase == LifecyclePhase::Expired {
        return Err(SupplyError::InvalidVaccine);
    }
    ownership_mut(state, id).next_owner = Address::ZERO;
    let record = record_mut(state, id);
    record.is_valid = false;
    record.phase = LifecyclePhase::Expired;
    Ok(())
}

pub fn inject(
    state: &mut State,
    caller: Address,
    id: VaccineId,
    patient: PatientId,
) -> Result<(), SupplyError> {
    let (record, ownership) = open_vaccine(state, id)?;
    if owner_type_of(&state.parties, &caller) != OwnerType::Vaccinator {
        return Err(SupplyError::NotVaccinator);
    }
    if ownership.current_owner != caller {
        return Err(SupplyError::NotCurrentOwner);
    }
    if record.is_injected {
        return Err(SupplyError::AlreadyInjected);
    }
    if !record.is_valid {
        return Err(SupplyError::InvalidVaccine);
    }
    if ownership.handover_pending() {
        return Err(SupplyError::HandoverPending);
    }
    if !state.patients.contains(&patient) {
        return Err(SupplyError::UnknownPatient);
    }
    let record = record_mut(state, id);
    record.is_injected = true;
    record.injected_patient = Some(patient);
    record.phase = LifecyclePhase::Injected;
    Ok(())
}

pub fn patient_receive_vaccine(
    state: &mut State,
    patient: PatientId,
    id: VaccineId,
) -> Result<(), SupplyError> {
    let (record, _) = open_vaccine(state, id)?;
    if record.phase != LifecyclePhase::Injected {
        return Err(SupplyError::NotInjected);
    }
    if record.injected_patient != Some(patient) {
        return Err(SupplyError::WrongPatient);
    }
    let record = record_mut(state, id);
    record.receipt_confirmed = true;
    record.phase = LifecyclePhase::Closed;
    Ok(())
}

/// Registers a patient key so the patient can sign receipt confirmations.
pub fn register_patient(
    state: &mut State,
    caller: Address,
    patient: PatientId,
    public_key: PublicKey,
) -> Result<(), SupplyError> {
    let role = owner_type_of(&state.parties, &caller);
    if !matches!(role, OwnerType::Distributer | OwnerType::Vaccinator) {
        return Err(SupplyError::NotPatientRegistrar);
    }
    if patient.is_zero() || public_key.address() != patient {
        return Err(SupplyError::PatientKeyMismatch);
    }
    if state.parties.is_registered(&patient) {
        return Err(SupplyError::PatientAddressInUse);
    }
    if state.patients.contains(&patient) {
        return Err(SupplyError::PatientAlreadyRegistered);
    }
    state.patients.keys.insert(patient, public_key);
    Ok(())
}

/// Full record plus current/pending ownership.
pub fn trace(state: &State, id: VaccineId) -> Result<(VaccineRecord, OwnershipState), SupplyError> {
    let record = state
        .vaccines
        .get(&id)
        .ok_or(SupplyError::UnknownVaccine(id))?;
    let ownership = *state.ownership.get(id).expect("registered vaccine");
    Ok((record.clone(), ownership))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access_control::set_owner_type;
    use crate::crypto::Keypair;

    struct Cast {
        manufacturer: Keypair,
        authority: Keypair,
        transporter: Keypair,
        distributer: Keypair,
        vaccinator: Keypair,
        patient: Keypair,
    }

    const ID: VaccineId = VaccineId(14273912);

    fn setup() -> (State, Cast) {
        let cast = Cast {
            manufacturer: Keypair::from_label("manufacturer"),
            authority: Keypair::from_label("authority"),
            transporter: Keypair::from_label("transporter"),
            distributer: Keypair::from_label("distributer"),
            vaccinator: Keypair::from_label("vaccinator"),
            patient: Keypair::from_label("patient"),
        };
        let mut state = State::with_authorities([&cast.authority.public()]);
        let auth = cast.authority.address();
        for (key, role) in [
            (&cast.manufacturer, OwnerType::Manufacturer),
            (&cast.transporter, OwnerType::Transporter),
            (&cast.distributer, OwnerType::Distributer),
            (&cast.vaccinator, OwnerType::Vaccinator),
        ] {
            set_owner_type(&mut state.parties, &auth, key.address(), role, key.public()).unwrap();
        }
        register_patient(
            &mut state,
            cast.vaccinator.address(),
            cast.patient.address(),
            cast.patient.public(),
        )
        .unwrap();
        (state, cast)
    }

    fn confirmed() -> (State, Cast) {
        let (mut s, c) = setup();
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        confirm_authority(&mut s, c.authority.address(), ID).unwrap();
        (s, c)
    }

    /// Walks the vaccine to the vaccinator via transporter and distributer.
    fn at_vaccinator() -> (State, Cast) {
        let (mut s, c) = confirmed();
        let hops = [
            (&c.authority, &c.transporter),
            (&c.transporter, &c.distributer),
            (&c.distributer, &c.vaccinator),
        ];
        for (from, to) in hops {
            handover_request(&mut s, from.address(), ID, to.address()).unwrap();
            handover_accept(&mut s, to.address(), ID).unwrap();
        }
        (s, c)
    }

    #[test]
    fn register_sets_initial_metadata() {
        let (mut s, c) = setup();
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        let (rec, own) = trace(&s, ID).unwrap();
        assert!(!rec.is_valid);
        assert!(!rec.is_injected);
        assert_eq!(rec.owner_history, vec![c.manufacturer.address()]);
        assert_eq!(own.current_owner, c.manufacturer.address());
        assert_eq!(rec.phase, LifecyclePhase::Registered);
    }

    #[test]
    fn register_errors() {
        let (mut s, c) = setup();
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        assert_eq!(
            register_vaccine(&mut s, c.manufacturer.address(), ID),
            Err(SupplyError::DuplicateVaccineId(ID))
        );
        assert_eq!(
            register_vaccine(&mut s, c.transporter.address(), VaccineId(2)),
            Err(SupplyError::NotManufacturer)
        );
    }

    #[test]
    fn confirm_transfers_possession_to_authority() {
        let (s, c) = confirmed();
        let (rec, own) = trace(&s, ID).unwrap();
        assert!(rec.is_valid);
        assert_eq!(own.current_owner, c.authority.address());
        assert_eq!(own.next_owner, Address::ZERO);
        assert_eq!(rec.owner_history.len(), 2);
        assert_eq!(rec.phase, LifecyclePhase::Confirmed);
    }

    #[test]
    fn confirm_errors() {
        let (mut s, c) = setup();
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        assert_eq!(
            confirm_authority(&mut s, c.distributer.address(), ID),
            Err(SupplyError::NotAuthority)
        );
        confirm_authority(&mut s, c.authority.address(), ID).unwrap();
        assert_eq!(
            confirm_authority(&mut s, c.authority.address(), ID),
            Err(SupplyError::WrongPhase(LifecyclePhase::Confirmed))
        );
    }

    #[test]
    fn request_then_accept_moves_possession() {
        let (mut s, c) = confirmed();
        handover_request(&mut s, c.authority.address(), ID, c.transporter.address()).unwrap();
        let (rec, own) = trace(&s, ID).unwrap();
        assert_eq!(own.next_owner, c.transporter.address());
        assert_eq!(rec.phase, LifecyclePhase::InTransitPending);

        assert_eq!(
            handover_request(&mut s, c.authority.address(), ID, c.distributer.address()),
            Err(SupplyError::HandoverAlreadyPending)
        );
        assert_eq!(
            handover_accept(&mut s, c.distributer.address(), ID),
            Err(SupplyError::NotDesignatedRecipient)
        );

        handover_accept(&mut s, c.transporter.address(), ID).unwrap();
        let (rec, own) = trace(&s, ID).unwrap();
        assert_eq!(own.current_owner, c.transporter.address());
        assert_eq!(own.next_owner, Address::ZERO);
        assert_eq!(rec.owner_history.len(), 3);
        assert_eq!(rec.phase, LifecyclePhase::Confirmed);
        assert_eq!(
            handover_accept(&mut s, c.transporter.address(), ID),
            Err(SupplyError::NoPendingHandover)
        );
    }

    #[test]
    fn reject_restores_pre_request_state() {
        let (mut s, c) = confirmed();
        let before = trace(&s, ID).unwrap();
        handover_request(&mut s, c.authority.address(), ID, c.transporter.address()).unwrap();
        assert_eq!(
            handover_reject(&mut s, c.authority.address(), ID),
            Err(SupplyError::NotDesignatedRecipient)
        );
        handover_reject(&mut s, c.transporter.address(), ID).unwrap();
        assert_eq!(trace(&s, ID).unwrap(), before);
        assert_eq!(
            handover_reject(&mut s, c.transporter.address(), ID),
            Err(SupplyError::NoPendingHandover)
        );
    }

    #[test]
    fn request_preconditions() {
        let (mut s, c) = confirmed();
        assert_eq!(
            handover_request(&mut s, c.transporter.address(), ID, c.distributer.address()),
            Err(SupplyError::NotCurrentOwner)
        );
        let stranger = Keypair::from_label("stranger").address();
        assert_eq!(
            handover_request(&mut s, c.authority.address(), ID, stranger),
            Err(SupplyError::RecipientUnregistered)
        );
        assert_eq!(
            handover_request(&mut s, c.authority.address(), ID, c.patient.address()),
            Err(SupplyError::RecipientUnregistered)
        );
        assert_eq!(
            handover_request(&mut s, c.authority.address(), ID, c.authority.address()),
            Err(SupplyError::SelfHandover)
        );
        expire(&mut s, c.authority.address(), ID).unwrap();
        assert_eq!(
            handover_request(&mut s, c.authority.address(), ID, c.transporter.address()),
            Err(SupplyError::InvalidVaccine)
        );
    }

    #[test]
    fn unconfirmed_vaccine_cannot_move() {
        let (mut s, c) = setup();
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        assert_eq!(
            handover_request(&mut s, c.manufacturer.address(), ID, c.transporter.address()),
            Err(SupplyError::InvalidVaccine)
        );
    }

    #[test]
    fn expire_mid_transit_clears_pending() {
        let (mut s, c) = confirmed();
        handover_request(&mut s, c.authority.address(), ID, c.transporter.address()).unwrap();
        expire(&mut s, c.transporter.address(), ID).unwrap();
        let (rec, own) = trace(&s, ID).unwrap();
        assert!(!rec.is_valid);
        assert_eq!(own.next_owner, Address::ZERO);
        assert_eq!(rec.phase, LifecyclePhase::Expired);
        assert_eq!(
            expire(&mut s, c.transporter.address(), ID),
            Err(SupplyError::InvalidVaccine)
        );
        assert_eq!(
            handover_accept(&mut s, c.transporter.address(), ID),
            Err(SupplyError::NoPendingHandover)
        );
    }

    #[test]
    fn expire_requires_a_role() {
        let (mut s, _) = confirmed();
        let nobody = Keypair::from_label("nobody").address();
        assert_eq!(expire(&mut s, nobody, ID), Err(SupplyError::UnregisteredCaller));
    }

    #[test]
    fn inject_and_receive() {
        let (mut s, c) = at_vaccinator();
        let v = c.vaccinator.address();
        let p = c.patient.address();
        assert_eq!(
            inject(&mut s, c.distributer.address(), ID, p),
            Err(SupplyError::NotVaccinator)
        );
        assert_eq!(
            inject(&mut s, v, ID, Keypair::from_label("unknown-patient").address()),
            Err(SupplyError::UnknownPatient)
        );
        assert_eq!(
            patient_receive_vaccine(&mut s, p, ID),
            Err(SupplyError::NotInjected)
        );
        inject(&mut s, v, ID, p).unwrap();
        let (rec, _) = trace(&s, ID).unwrap();
        assert!(rec.is_injected);
        assert_eq!(rec.phase, LifecyclePhase::Injected);
        assert_eq!(rec.injected_patient, Some(p));

        assert_eq!(expire(&mut s, v, ID), Err(SupplyError::AlreadyInjected));
        assert_eq!(inject(&mut s, v, ID, p), Err(SupplyError::AlreadyInjected));
        assert_eq!(
            patient_receive_vaccine(&mut s, c.distributer.address(), ID),
            Err(SupplyError::WrongPatient)
        );

        patient_receive_vaccine(&mut s, p, ID).unwrap();
        let (rec, _) = trace(&s, ID).unwrap();
        assert_eq!(rec.phase, LifecyclePhase::Closed);
        assert!(rec.receipt_confirmed);
        assert_eq!(rec.owner_history.len(), 5);

        assert_eq!(patient_receive_vaccine(&mut s, p, ID), Err(SupplyError::AlreadyClosed));
        assert_eq!(expire(&mut s, v, ID), Err(SupplyError::AlreadyClosed));
        assert_eq!(
            handover_request(&mut s, v, ID, c.distributer.address()),
            Err(SupplyError::AlreadyClosed)
        );
    }

    #[test]
    fn inject_blocked_by_pending_handover_and_invalidity() {
        let (mut s, c) = at_vaccinator();
        let v = c.vaccinator.address();
        handover_request(&mut s, v, ID, c.distributer.address()).unwrap();
        assert_eq!(
            inject(&mut s, v, ID, c.patient.address()),
            Err(SupplyError::HandoverPending)
        );
        handover_reject(&mut s, c.distributer.address(), ID).unwrap();
        expire(&mut s, v, ID).unwrap();
        assert_eq!(
            inject(&mut s, v, ID, c.patient.address()),
            Err(SupplyError::InvalidVaccine)
        );
    }

    #[test]
    fn trace_history_lengths() {
        let (mut s, c) = setup();
        assert_eq!(trace(&s, ID), Err(SupplyError::UnknownVaccine(ID)));
        register_vaccine(&mut s, c.manufacturer.address(), ID).unwrap();
        assert_eq!(trace(&s, ID).unwrap().0.owner_history.len(), 1);
    }

    #[test]
    fn patient_registration_rules() {
        let (mut s, c) = setup();
        let q = Keypair::from_label("patient-q");
        assert_eq!(
            register_patient(&mut s, c.transporter.address(), q.address(), q.public()),
            Err(SupplyError::NotPatientRegistrar)
        );
        assert_eq!(
            register_patient(&mut s, c.distributer.address(), q.address(), c.patient.public()),
            Err(SupplyError::PatientKeyMismatch)
        );
        assert_eq!(
            register_patient(
                &mut s,
                c.distributer.address(),
                c.patient.address(),
                c.patient.public()
            ),
            Err(SupplyError::PatientAlreadyRegistered)
        );
        assert_eq!(
            register_patient(
                &mut s,
                c.distributer.address(),
                c.transporter.address(),
                c.transporter.public()
            ),
            Err(SupplyError::PatientAddressInUse)
        );
        register_patient(&mut s, c.distributer.address(), q.address(), q.public()).unwrap();
    }

    #[test]
    fn derived_phase_matches_stored_phase() {
        let (mut s, c) = confirmed();
        let check = |s: &State| {
            let (rec, own) = trace(s, ID).unwrap();
            assert_eq!(rec.derived_phase(&own), rec.phase);
        };
        check(&s);
        handover_request(&mut s, c.authority.address(), ID, c.transporter.address()).unwrap();
        check(&s);
        expire(&mut s, c.transporter.address(), ID).unwrap();
        check(&s);
    }
}
