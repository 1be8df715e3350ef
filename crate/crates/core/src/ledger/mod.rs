//! Append-only hash-linked chain of transaction blocks.

pub mod block;
pub mod store;
pub mod tx;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Decoder, Encoder};
use crate::crypto::{sha256, Address, Hash, PublicKey};
use crate::state::State;

pub use block::{build_block, Block, BuildError};
pub use tx::{
    canonical_encode, sign_transaction, verify_transaction, Call, Transaction, TxKind, VaccineId,
};

/// Smallest number of approvals that makes a block final among `n` validators.
pub fn quorum_size(n: usize) -> usize {
    n / 2 + 1
}

/// Parameters every node of one network must agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub chain_id: u32,
    pub genesis_authorities: Vec<PublicKey>,
    pub validators: Vec<PublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("at least one genesis authority is required")]
    EmptyAuthorities,
    #[error("genesis authority {0} listed twice")]
    DuplicateAuthority(Address),
    #[error("at least one validator is required")]
    EmptyValidators,
    #[error("validator {0} listed twice")]
    DuplicateValidator(Address),
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.genesis_authorities.is_empty() {
            return Err(ConfigError::EmptyAuthorities);
        }
        let mut seen = BTreeSet::new();
        for key in &self.genesis_authorities {
            if !seen.insert(key.address()) {
                return Err(ConfigError::DuplicateAuthority(key.address()));
            }
        }
        if self.validators.is_empty() {
            return Err(ConfigError::EmptyValidators);
        }
        let mut seen = BTreeSet::new();
        for key in &self.validators {
            if !seen.insert(key.address()) {
                return Err(ConfigError::DuplicateValidator(key.address()));
            }
        }
        Ok(())
    }

    pub fn quorum_size(&self) -> usize {
        quorum_size(self.validators.len())
    }

    pub fn validator_addresses(&self) -> Vec<Address> {
        self.validators.iter().map(PublicKey::address).collect()
    }

    pub fn is_validator(&self, address: &Address) -> bool {
        self.validators.iter().any(|k| k.address() == *address)
    }

    /// Hash committing to the whole configuration; used as the genesis parent.
    pub fn anchor(&self) -> Hash {
        let mut enc = Encoder::new();
        enc.str("coldledger/chain").u32(self.chain_id);
        enc.u32(self.genesis_authorities.len() as u32);
        for key in &self.genesis_authorities {
            enc.public_key(key);
        }
        enc.u32(self.validators.len() as u32);
        for key in &self.validators {
            enc.public_key(key);
        }
        sha256(enc.as_slice())
    }

    pub fn genesis(&self) -> Block {
        Block::genesis(self.anchor())
    }

    pub fn genesis_state(&self) -> State {
        State::with_authorities(&self.genesis_authorities)
    }
}

/// Why a block failed verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureReason {
    BadGenesis,
    LinkBroken,
    HeightMismatch { found: u64 },
    HashMismatch,
    EmptyBlock,
    UnknownProposer(Address),
    TimestampRegressed,
    InvalidTransaction { index: usize, code: &'static str },
    Decode(String),
}

impl FailureReason {
    pub fn code(&self) -> &'static str {
        match self {
            FailureReason::BadGenesis => "BAD_GENESIS",
            FailureReason::LinkBroken => "LINK_BROKEN",
            FailureReason::HeightMismatch { .. } => "HEIGHT_MISMATCH",
            FailureReason::HashMismatch => "HASH_MISMATCH",
            FailureReason::EmptyBlock => "EMPTY_BLOCK",
            FailureReason::UnknownProposer(_) => "UNKNOWN_PROPOSER",
            FailureReason::TimestampRegressed => "TIMESTAMP_REGRESSED",
            FailureReason::InvalidTransaction { .. } => "INVALID_TRANSACTION",
            FailureReason::Decode(_) => "DECODE_ERROR",
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::HeightMismatch { found } => write!(f, "block claims height {found}"),
            FailureReason::UnknownProposer(a) => write!(f, "proposer {a} is not a validator"),
            FailureReason::InvalidTransaction { index, code } => {
                write!(f, "transaction {index} rejected with {code}")
            }
            FailureReason::Decode(msg) => write!(f, "undecodable block: {msg}"),
            other => f.write_str(other.code()),
        }
    }
}

/// First failing height in a chain and the reason.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("chain invalid at height {height}: {reason}")]
pub struct ChainFailure {
    pub height: u64,
    pub reason: FailureReason,
}

/// Verified chain plus the state it produces.
#[derive(Debug, Clone)]
pub struct Chain {
    config: ChainConfig,
    blocks: Vec<Block>,
    state: State,
    tx_index: HashMap<Hash, (u64, usize)>,
}

impl Chain {
    pub fn new(config: ChainConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Chain {
            blocks: vec![config.genesis()],
            state: config.genesis_state(),
            tx_index: HashMap::new(),
            config,
        })
    }

    /// Verifies `blocks` (genesis first) and rebuilds the state they imply.
    pub fn from_blocks(config: ChainConfig, blocks: Vec<Block>) -> Result<Self, ChainFailure> {
        let mut chain = Chain::new(config).map_err(|e| ChainFailure {
            height: 0,
            reason: FailureReason::Decode(e.to_string()),
        })?;
        let mut blocks = blocks.into_iter();
        match blocks.next() {
            Some(g) if g == chain.blocks[0] => {}
            _ => {
                return Err(ChainFailure {
                    height: 0,
                    reason: FailureReason::BadGenesis,
                })
            }
        }
        for block in blocks {
            chain.append(block)?;
        }
        Ok(chain)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis is always present")
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.get(usize::try_from(height).ok()?)
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    /// Height and position of a committed transaction.
    pub fn find_tx(&self, hash: &Hash) -> Option<(u64, usize)> {
        self.tx_index.get(hash).copied()
    }

    /// Checks `block` as the successor of the current tip and returns the
    /// resulting state without committing it.
    pub fn validate_next(&self, block: &Block) -> Result<State, ChainFailure> {
        let parent = self.tip();
        let height = parent.height + 1;
        let fail = |reason| Err(ChainFailure { height, reason });
        if block.prev_hash != parent.hash {
            return fail(FailureReason::LinkBroken);
        }
        if block.height != height {
            return fail(FailureReason::HeightMismatch {
                found: block.height,
            });
        }
        if block.compute_hash() != block.hash {
            return fail(FailureReason::HashMismatch);
        }
        if block.transactions.is_empty() {
            return fail(FailureReason::EmptyBlock);
        }
        if !self.config.is_validator(&block.proposer) {
            return fail(FailureReason::UnknownProposer(block.proposer));
        }
        if block.timestamp < parent.timestamp {
            return fail(FailureReason::TimestampRegressed);
        }
        self.state
            .execute_all(&block.transactions)
            .map_err(|r| ChainFailure {
                height,
                reason: FailureReason::InvalidTransaction {
                    index: r.index,
                    code: r.error.code(),
                },
            })
    }

    pub fn append(&mut self, block: Block) -> Result<(), ChainFailure> {
        let state = self.validate_next(&block)?;
        self.commit_unchecked(block, state);
        Ok(())
    }

    /// Commits a block already checked with [`Chain::validate_next`].
    pub fn commit_unchecked(&mut self, block: Block, state: State) {
        for (i, tx) in block.transactions.iter().enumerate() {
            self.tx_index.insert(tx.hash(), (block.height, i));
        }
        self.state = state;
        self.blocks.push(block);
    }
}

/// Replays `blocks` from genesis. Returns the final state or the first
/// failing height.
pub fn verify_chain(config: &ChainConfig, blocks: &[Block]) -> Result<State, ChainFailure> {
    Chain::from_blocks(config.clone(), blocks.to_vec()).map(|c| c.state)
}

/// Binary form of a block sequence: each block as a length-prefixed field.
pub fn encode_chain(blocks: &[Block]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for block in blocks {
        enc.bytes(&block.to_bytes());
    }
    enc.finish()
}

/// Inverse of [`encode_chain`]. A block that cannot be decoded is reported at
/// its position in the sequence.
pub fn decode_chain(bytes: &[u8]) -> Result<Vec<Block>, ChainFailure> {
    let mut dec = Decoder::new(bytes);
    let mut blocks = Vec::new();
    while dec.remaining() > 0 {
        let height = blocks.len() as u64;
        let block = dec
            .bytes()
            .and_then(Block::from_bytes)
            .map_err(|e| ChainFailure {
                height,
                reason: FailureReason::Decode(e.to_string()),
            })?;
        blocks.push(block);
    }
    Ok(blocks)
}
