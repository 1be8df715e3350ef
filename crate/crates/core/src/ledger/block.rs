use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{sha256, Address, Hash};
use crate::ledger::tx::Transaction;
use crate::state::{ExecError, State};

/// An ordered batch of transactions linked to its predecessor by hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash,
    pub timestamp: u64,
    pub proposer: Address,
    pub transactions: Vec<Transaction>,
    pub hash: Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("a block must carry at least one transaction")]
    EmptyBlock,
    #[error("transaction {index} is invalid: {error}")]
    InvalidTransaction { index: usize, error: ExecError },
}

impl Block {
    /// First block of a chain. `anchor` commits the block to a chain
    /// configuration.
    pub fn genesis(anchor: Hash) -> Self {
        Block::seal(0, anchor, 0, Address::ZERO, Vec::new())
    }

    /// Assembles a block and fills in its hash.
    pub fn seal(
        height: u64,
        prev_hash: Hash,
        timestamp: u64,
        proposer: Address,
        transactions: Vec<Transaction>,
    ) -> Self {
        let mut block = Block {
            height,
            prev_hash,
            timestamp,
            proposer,
            transactions,
            hash: Hash::ZERO,
        };
        block.hash = block.compute_hash();
        block
    }

    fn encode_header(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .hash(&self.prev_hash)
            .u64(self.timestamp)
            .address(&self.proposer)
            .u32(self.transactions.len() as u32);
        for tx in &self.transactions {
            enc.bytes(&tx.to_bytes());
        }
    }

    /// Hash over height, parent hash, timestamp, proposer and every
    /// transaction's wire form.
    pub fn compute_hash(&self) -> Hash {
        let mut enc = Encoder::new();
        self.encode_header(&mut enc);
        sha256(enc.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_header(&mut enc);
        enc.hash(&self.hash);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let block = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(block)
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let height = dec.u64()?;
        let prev_hash = dec.hash()?;
        let timestamp = dec.u64()?;
        let proposer = dec.address()?;
        let count = dec.u32()? as usize;
        // Each transaction needs well over one byte; cap the preallocation.
        let mut transactions = Vec::with_capacity(count.min(dec.remaining()));
        for _ in 0..count {
            transactions.push(Transaction::from_bytes(dec.bytes()?)?);
        }
        let hash = dec.hash()?;
        Ok(Block {
            height,
            prev_hash,
            timestamp,
            proposer,
            transactions,
            hash,
        })
    }
}

/// Executes `txs` on top of `state` and seals them into the successor of
/// `parent`. Fails without side effects if any transaction is rejected.
pub fn build_block(
    state: &State,
    parent: &Block,
    timestamp: u64,
    proposer: Address,
    txs: Vec<Transaction>,
) -> Result<(Block, State), BuildError> {
    if txs.is_empty() {
        return Err(BuildError::EmptyBlock);
    }
    let next = state
        .execute_all(&txs)
        .map_err(|r| BuildError::InvalidTransaction {
            index: r.index,
            error: r.error,
        })?;
    let block = Block::seal(
        parent.height + 1,
        parent.hash,
        timestamp.max(parent.timestamp),
        proposer,
        txs,
    );
    Ok((block, next))
}
