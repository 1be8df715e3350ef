//! Permissioned ledger for vaccine supply-chain custody and cold-chain
//! telemetry.

pub mod access_control;
pub mod codec;
pub mod crypto;
pub mod ledger;
pub mod replication;
pub mod state;
pub mod telemetry;
pub mod vaccine_supply;

pub use crypto::{Address, Hash, Keypair, PublicKey, Signature};
pub use ledger::{Block, Call, Chain, ChainConfig, Transaction, VaccineId};
pub use state::{ExecError, State};
