//! Owner-type mapping (role per address) and ownership mapping (current and
//! pending owner per vaccine).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Address, PublicKey};
use crate::ledger::tx::VaccineId;

/// Role of a party address. Unassigned addresses are `None`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OwnerType {
    #[default]
    None,
    Manufacturer,
    Authority,
    Transporter,
    Distributer,
    Vaccinator,
    /// Cold-chain sensor or sensor agent: may report telemetry and expire
    /// vaccines, never takes custody.
    Sensor,
}

impl OwnerType {
    pub const ALL: [OwnerType; 7] = [
        OwnerType::None,
        OwnerType::Manufacturer,
        OwnerType::Authority,
        OwnerType::Transporter,
        OwnerType::Distributer,
        OwnerType::Vaccinator,
        OwnerType::Sensor,
    ];

    pub fn tag(self) -> u8 {
        match self {
            OwnerType::None => 0,
            OwnerType::Manufacturer => 1,
            OwnerType::Authority => 2,
            OwnerType::Transporter => 3,
            OwnerType::Distributer => 4,
            OwnerType::Vaccinator => 5,
            OwnerType::Sensor => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        OwnerType::ALL.into_iter().find(|t| t.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            OwnerType::None => "NONE",
            OwnerType::Manufacturer => "MANUFACTURER",
            OwnerType::Authority => "AUTHORITY",
            OwnerType::Transporter => "TRANSPORTER",
            OwnerType::Distributer => "DISTRIBUTER",
            OwnerType::Vaccinator => "VACCINATOR",
            OwnerType::Sensor => "SENSOR",
        }
    }

    /// Roles that may hold possession of a vaccine.
    pub fn can_take_custody(self) -> bool {
        !matches!(self, OwnerType::None | OwnerType::Sensor)
    }
}

impl fmt::Display for OwnerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OwnerType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        OwnerType::ALL
            .into_iter()
            .find(|t| t.name() == upper)
            .ok_or_else(|| format!("unknown owner type {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("caller is not an authority")]
    NotAuthority,
    #[error("target is the zero address")]
    ZeroAddressTarget,
    #[error("address does not derive from the supplied public key")]
    KeyAddressMismatch,
    #[error("address is already registered as a patient")]
    AddressInUse,
    #[error("vaccine {0} is not registered")]
    UnknownVaccine(VaccineId),
}

impl AccessError {
    pub fn code(&self) -> &'static str {
        match self {
            AccessError::NotAuthority => "NOT_AUTHORITY",
            AccessError::ZeroAddressTarget => "ZERO_ADDRESS_TARGET",
            AccessError::KeyAddressMismatch => "KEY_ADDRESS_MISMATCH",
            AccessError::AddressInUse => "ADDRESS_IN_USE",
            AccessError::UnknownVaccine(_) => "UNKNOWN_VACCINE",
        }
    }
}

/// Roles and public keys of every party ever registered.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyRegistry {
    owner_types: BTreeMap<Address, OwnerType>,
    public_keys: BTreeMap<Address, PublicKey>,
}

impl PartyRegistry {
    /// Registry seeded with genesis authorities. Used by the chain constructor
    /// only; afterwards authority grants go through [`set_owner_type`].
    pub fn with_authorities<'a>(authorities: impl IntoIterator<Item = &'a PublicKey>) -> Self {
        let mut registry = PartyRegistry::default();
        for key in authorities {
            let addr = key.address();
            registry.owner_types.insert(addr, OwnerType::Authority);
            registry.public_keys.insert(addr, *key);
        }
        registry
    }

    pub fn public_key(&self, address: &Address) -> Option<PublicKey> {
        self.public_keys.get(address).copied()
    }

    pub fn is_registered(&self, address: &Address) -> bool {
        self.public_keys.contains_key(address)
    }

    /// Addresses with their assigned roles, including revoked (`None`) entries.
    pub fn entries(&self) -> impl Iterator<Item = (&Address, &OwnerType)> {
        self.owner_types.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = (&Address, &PublicKey)> {
        self.public_keys.iter()
    }

    pub(crate) fn validate_set_owner_type(
        &self,
        caller: &Address,
        target: &Address,
        public_key: &PublicKey,
    ) -> Result<(), AccessError> {
        if owner_type_of(self, caller) != OwnerType::Authority {
            return Err(AccessError::NotAuthority);
        }
        if target.is_zero() {
            return Err(AccessError::ZeroAddressTarget);
        }
        if public_key.address() != *target {
            return Err(AccessError::KeyAddressMismatch);
        }
        Ok(())
    }

    pub(crate) fn assign(&mut self, target: Address, role: OwnerType, public_key: PublicKey) {
        self.owner_types.insert(target, role);
        self.public_keys.insert(target, public_key);
    }
}

/// Assigns `role` to `target`. Only authorities may call; `None` revokes the
/// role but keeps the key on record.
pub fn set_owner_type(
    registry: &mut PartyRegistry,
    caller: &Address,
    target: Address,
    role: OwnerType,
    public_key: PublicKey,
) -> Result<(), AccessError> {
    registry.validate_set_owner_type(caller, &target, &public_key)?;
    registry.assign(target, role, public_key);
    Ok(())
}

pub fn owner_type_of(registry: &PartyRegistry, address: &Address) -> OwnerType {
    registry
        .owner_types
        .get(address)
        .copied()
        .unwrap_or_default()
}

/// Current holder and pending recipient of a vaccine. `next_owner` is the zero
/// address unless a handover is pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipState {
    pub current_owner: Address,
    pub next_owner: Address,
}

impl OwnershipState {
    pub fn held_by(owner: Address) -> Self {
        OwnershipState {
            current_owner: owner,
            next_owner: Address::ZERO,
        }
    }

    pub fn handover_pending(&self) -> bool {
        !self.next_owner.is_zero()
    }
}

/// Ownership mapping keyed by vaccine id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipBook {
    entries: BTreeMap<VaccineId, OwnershipState>,
}

impl OwnershipBook {
    pub fn get(&self, id: VaccineId) -> Option<&OwnershipState> {
        self.entries.get(&id)
    }

    pub(crate) fn get_mut(&mut self, id: VaccineId) -> Option<&mut OwnershipState> {
        self.entries.get_mut(&id)
    }

    pub(crate) fn insert(&mut self, id: VaccineId, state: OwnershipState) {
        self.entries.insert(id, state);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VaccineId, &OwnershipState)> {
        self.entries.iter()
    }

    /// Vaccines with a pending handover where `party` is the initiator or
    /// the designated recipient.
    pub fn pending_for(&self, party: &Address) -> Vec<(VaccineId, OwnershipState)> {
        self.entries
            .iter()
            .filter(|(_, o)| {
                o.handover_pending() && (o.current_owner == *party || o.next_owner == *party)
            })
            .map(|(id, o)| (*id, *o))
            .collect()
    }
}

pub fn ownership_of(book: &OwnershipBook, id: VaccineId) -> Result<OwnershipState, AccessError> {
    book.get(id).copied().ok_or(AccessError::UnknownVaccine(id))
}
