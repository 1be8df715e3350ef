//! Block agreement among a fixed validator set.
//!
//! [`Replica`] is a sans-IO state machine: callers feed it messages, client
//! transactions and timer ticks together with the current time, and it
//! answers with [`Action`]s to perform. The same code runs inside the
//! deterministic simulator and the networked node.
//!
//! Each height runs in numbered rounds. The proposer of round `r` at height
//! `h` is validator `(h + r) mod N`. Validators prevote for a proposal, lock
//! and precommit once a quorum of prevotes (a polka) is seen, and commit
//! once a quorum of precommits for the same round and block is seen. A lock
//! is released only by a polka from a later round, which keeps two quorums
//! from committing different blocks at one height.

pub mod scenario;
pub mod sim;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::{Address, Hash, Keypair, PublicKey, Signature};
use crate::ledger::{Block, Chain, ChainConfig, ChainFailure, Transaction};
use crate::state::{ExecError, State};

pub use crate::ledger::quorum_size;

/// Timing and sizing knobs for one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicaConfig {
    /// Upper bound on one-way message delay assumed by the round timer.
    pub max_delay_ms: u64,
    /// How long a proposer waits after the oldest pending transaction
    /// arrived before cutting a block.
    pub batch_window_ms: u64,
    pub max_block_txs: usize,
    /// Pending transactions older than this are dropped.
    pub pending_ttl_ms: u64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            max_delay_ms: 200,
            batch_window_ms: 20,
            max_block_txs: 512,
            pending_ttl_ms: 60_000,
        }
    }
}

impl ReplicaConfig {
    pub fn round_timeout_ms(&self) -> u64 {
        10 * self.max_delay_ms
    }

    pub fn resend_interval_ms(&self) -> u64 {
        3 * self.max_delay_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VotePhase {
    Prevote,
    Precommit,
}

/// A signed vote. `block_hash: None` is a rejection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub height: u64,
    pub round: u64,
    pub phase: VotePhase,
    pub block_hash: Option<Hash>,
    pub voter: Address,
    pub signature: Signature,
}

impl Vote {
    fn signing_bytes(
        anchor: &Hash,
        height: u64,
        round: u64,
        phase: VotePhase,
        block_hash: Option<Hash>,
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("coldledger/vote")
            .hash(anchor)
            .u64(height)
            .u64(round)
            .u8(phase as u8)
            .hash(&block_hash.unwrap_or(Hash::ZERO))
            .bool(block_hash.is_some());
        enc.finish()
    }

    pub fn sign(
        key: &Keypair,
        anchor: &Hash,
        height: u64,
        round: u64,
        phase: VotePhase,
        block_hash: Option<Hash>,
    ) -> Vote {
        let signature = key.sign(&Self::signing_bytes(anchor, height, round, phase, block_hash));
        Vote {
            height,
            round,
            phase,
            block_hash,
            voter: key.address(),
            signature,
        }
    }

    pub fn verify(&self, anchor: &Hash, key: &PublicKey) -> bool {
        key.address() == self.voter
            && key.verify(
                &Self::signing_bytes(anchor, self.height, self.round, self.phase, self.block_hash),
                &self.signature,
            )
    }

    pub fn approves(&self) -> bool {
        self.block_hash.is_some()
    }
}

/// A block offered by the round's proposer. When the block already gathered
/// a polka in an earlier round, `valid_round` names that round and `polka`
/// carries the prevotes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub round: u64,
    pub block: Block,
    pub valid_round: Option<u64>,
    #[serde(default)]
    pub polka: Vec<Vote>,
    pub signature: Signature,
}

impl Proposal {
    fn signing_bytes(anchor: &Hash, round: u64, block: &Block, valid_round: Option<u64>) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("coldledger/proposal")
            .hash(anchor)
            .u64(block.height)
            .u64(round)
            .hash(&block.hash)
            .u64(valid_round.map_or(0, |r| r + 1));
        enc.finish()
    }

    pub fn sign(
        key: &Keypair,
        anchor: &Hash,
        round: u64,
        block: Block,
        valid_round: Option<u64>,
        polka: Vec<Vote>,
    ) -> Proposal {
        let signature = key.sign(&Self::signing_bytes(anchor, round, &block, valid_round));
        Proposal {
            round,
            block,
            valid_round,
            polka,
            signature,
        }
    }

    pub fn verify(&self, anchor: &Hash, key: &PublicKey) -> bool {
        key.verify(
            &Self::signing_bytes(anchor, self.round, &self.block, self.valid_round),
            &self.signature,
        )
    }
}

/// A committed block with the precommits that finalized it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertifiedBlock {
    pub block: Block,
    pub certificate: Vec<Vote>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Tx { tx: Transaction },
    Proposal { proposal: Box<Proposal> },
    Vote { vote: Vote },
    SyncRequest { from_height: u64 },
    SyncResponse { blocks: Vec<CertifiedBlock> },
}

/// A message tagged with its sender, as carried between replicas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: Address,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { to: Address, message: Message },
    Broadcast(Message),
    /// Call [`Replica::on_timer`] at or after this time.
    SetTimer { at_ms: u64 },
    Committed(CertifiedBlock),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicaError {
    #[error("not the proposer for this round")]
    NotMyTurn,
    #[error("no executable transactions pending")]
    NothingPending,
    #[error("proposal for an already committed height")]
    StaleProposal,
    #[error("sender {0} is not a validator")]
    UnknownValidator(Address),
    #[error("message signature does not verify")]
    BadSignature,
    #[error("proposal does not come from the round's proposer")]
    WrongProposer,
    #[error("transaction rejected: {0}")]
    Rejected(#[from] ExecError),
    #[error("transaction already known")]
    Duplicate,
    #[error("certificate does not justify the block")]
    BadCertificate,
    #[error(transparent)]
    InvalidBlock(#[from] ChainFailure),
}

impl ReplicaError {
    pub fn code(&self) -> &'static str {
        match self {
            ReplicaError::NotMyTurn => "NOT_MY_TURN",
            ReplicaError::NothingPending => "NOTHING_PENDING",
            ReplicaError::StaleProposal => "STALE_PROPOSAL",
            ReplicaError::UnknownValidator(_) => "UNKNOWN_VALIDATOR",
            ReplicaError::BadSignature => "BAD_SIGNATURE",
            ReplicaError::WrongProposer => "WRONG_PROPOSER",
            ReplicaError::Rejected(e) => e.code(),
            ReplicaError::Duplicate => "DUPLICATE_TRANSACTION",
            ReplicaError::BadCertificate => "BAD_CERTIFICATE",
            ReplicaError::InvalidBlock(_) => "INVALID_BLOCK",
        }
    }
}

/// Why an admitted transaction left the pool without being committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    /// Still not executable when the pending TTL ran out.
    #[serde(rename = "PENDING_TTL_EXPIRED")]
    Expired,
    /// A later nonce from the same sender committed first.
    NonceSuperseded,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            DropReason::Expired => "PENDING_TTL_EXPIRED",
            DropReason::NonceSuperseded => "NONCE_SUPERSEDED",
        }
    }
}

/// Where a transaction stands from this replica's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxStatus {
    Pending,
    Committed { height: u64, index: usize },
    Dropped { reason: DropReason },
    Unknown,
}

#[derive(Debug, Clone)]
struct PendingTx {
    tx: Transaction,
    received_at: u64,
}

/// Per-height consensus bookkeeping, reset on every commit.
#[derive(Debug, Clone, Default)]
struct HeightState {
    /// Blocks seen at this height; `None` marks a block that failed validation.
    blocks: BTreeMap<Hash, (Block, Option<State>)>,
    /// First correctly signed proposal per round: block hash and valid round.
    proposals: BTreeMap<u64, (Hash, Option<u64>)>,
    votes: BTreeMap<(u64, VotePhase), BTreeMap<Address, Vote>>,
    locked: Option<(u64, Hash)>,
    valid: Option<(u64, Hash)>,
    proposed: BTreeSet<u64>,
    prevoted: BTreeSet<u64>,
    precommitted: BTreeSet<u64>,
    /// Set once any proposal or vote for this height arrives.
    active: bool,
}

const MAX_SYNC_BLOCKS: u64 = 64;
const MAX_BUFFERED: usize = 4096;
const MAX_DROPPED_TRACKED: usize = 100_000;

pub struct Replica {
    key: Keypair,
    cfg: ReplicaConfig,
    chain: Chain,
    anchor: Hash,
    round: u64,
    round_deadline: u64,
    /// Next retransmission of this round's own proposal and votes.
    resend_at: u64,
    /// Own proposal for the current round, kept for retransmission.
    own_proposal: Option<Proposal>,
    pending: BTreeMap<Hash, PendingTx>,
    /// Recently dropped transactions, oldest first in `dropped_order`.
    dropped: BTreeMap<Hash, DropReason>,
    dropped_order: VecDeque<Hash>,
    hs: HeightState,
    future: BTreeMap<u64, Vec<(Address, Message)>>,
    buffered: usize,
    certificates: BTreeMap<u64, Vec<Vote>>,
    /// Last height for which each peer was sent blocks unprompted.
    helped: BTreeMap<Address, u64>,
    sync_requested_for: Option<u64>,
    /// Set when a proposal attempt found nothing executable; cleared by new
    /// transactions, commits and round changes.
    stalled: bool,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("address", &self.address())
            .field("height", &self.chain.height())
            .field("round", &self.round)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl Replica {
    /// Starts from a verified chain (at least the genesis block).
    pub fn new(key: Keypair, chain: Chain, cfg: ReplicaConfig, now: u64) -> Self {
        let anchor = chain.config().anchor();
        Replica {
            key,
            cfg,
            chain,
            anchor,
            round: 0,
            round_deadline: now + cfg.round_timeout_ms(),
            resend_at: now + cfg.resend_interval_ms(),
            own_proposal: None,
            pending: BTreeMap::new(),
            dropped: BTreeMap::new(),
            dropped_order: VecDeque::new(),
            hs: HeightState::default(),
            future: BTreeMap::new(),
            buffered: 0,
            certificates: BTreeMap::new(),
            helped: BTreeMap::new(),
            sync_requested_for: None,
            stalled: false,
        }
    }

    /// Starts from a replayed chain and the certificates stored with it, so
    /// the replica can serve those blocks to peers that fall behind.
    pub fn restore(
        key: Keypair,
        chain: Chain,
        certificates: BTreeMap<u64, Vec<Vote>>,
        cfg: ReplicaConfig,
        now: u64,
    ) -> Self {
        let mut replica = Replica::new(key, chain, cfg, now);
        replica.certificates = certificates;
        replica
    }

    pub fn genesis(key: Keypair, config: ChainConfig, cfg: ReplicaConfig, now: u64) -> Self {
        let chain = Chain::new(config).expect("validated chain config");
        Replica::new(key, chain, cfg, now)
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn keypair(&self) -> &Keypair {
        &self.key
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn state(&self) -> &State {
        self.chain.state()
    }

    pub fn height(&self) -> u64 {
        self.chain.height()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn anchor(&self) -> &Hash {
        &self.anchor
    }

    /// Precommit certificates of the blocks this replica committed itself or
    /// synced, keyed by height.
    pub fn certificates(&self) -> &BTreeMap<u64, Vec<Vote>> {
        &self.certificates
    }

    pub fn pending(&self) -> impl Iterator<Item = &Transaction> {
        self.pending.values().map(|p| &p.tx)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_pending(&self, hash: &Hash) -> bool {
        self.pending.contains_key(hash)
    }

    pub fn tx_status(&self, hash: &Hash) -> TxStatus {
        if let Some((height, index)) = self.chain.find_tx(hash) {
            TxStatus::Committed { height, index }
        } else if self.pending.contains_key(hash) {
            TxStatus::Pending
        } else if let Some(&reason) = self.dropped.get(hash) {
            TxStatus::Dropped { reason }
        } else {
            TxStatus::Unknown
        }
    }

    fn drop_pending(&mut self, mut reason_for: impl FnMut(&PendingTx) -> Option<DropReason>) {
        let gone: Vec<(Hash, DropReason)> = self
            .pending
            .iter()
            .filter_map(|(h, p)| reason_for(p).map(|r| (*h, r)))
            .collect();
        for (hash, reason) in gone {
            self.pending.remove(&hash);
            if self.dropped.insert(hash, reason).is_none() {
                self.dropped_order.push_back(hash);
            }
        }
        while self.dropped_order.len() > MAX_DROPPED_TRACKED {
            if let Some(old) = self.dropped_order.pop_front() {
                self.dropped.remove(&old);
            }
        }
    }

    /// Next timer deadline the caller should arm.
    pub fn next_deadline(&self) -> u64 {
        let mut at = self.round_deadline;
        if self.hs.active {
            at = at.min(self.resend_at);
        }
        if let Some(batch) = self.batch_ready_at() {
            at = at.min(batch);
        }
        at
    }

    fn validators(&self) -> &[PublicKey] {
        &self.chain.config().validators
    }

    fn validator_key(&self, address: &Address) -> Option<PublicKey> {
        self.validators()
            .iter()
            .find(|k| k.address() == *address)
            .copied()
    }

    fn quorum(&self) -> usize {
        quorum_size(self.validators().len())
    }

    /// Proposer of `round` at `height`.
    pub fn proposer_for(&self, height: u64, round: u64) -> Address {
        let n = self.validators().len() as u64;
        self.validators()[((height + round) % n) as usize].address()
    }

    fn next_height(&self) -> u64 {
        self.chain.height() + 1
    }

    // -----------------------------------------------------------------------
    // Transactions
    // -----------------------------------------------------------------------

    /// Admits a client transaction and gossips it to the other validators.
    pub fn submit(&mut self, now: u64, tx: Transaction) -> Result<Vec<Action>, ReplicaError> {
        self.admit(now, tx.clone())?;
        let mut actions = vec![Action::Broadcast(Message::Tx { tx })];
        actions.extend(self.try_propose(now));
        actions.push(self.timer());
        Ok(actions)
    }

    fn admit(&mut self, now: u64, tx: Transaction) -> Result<(), ReplicaError> {
        let hash = tx.hash();
        if self.pending.contains_key(&hash) || self.chain.find_tx(&hash).is_some() {
            return Err(ReplicaError::Duplicate);
        }
        let state = self.chain.state();
        if crate::ledger::tx::KeyRegistry::public_key(state, &tx.sender).is_none() {
            return Err(ExecError::UnknownSender.into());
        }
        if !crate::ledger::verify_transaction(&tx, state) {
            return Err(ExecError::BadSignature.into());
        }
        if let Some(last) = state.last_nonce(&tx.sender) {
            if tx.nonce <= last {
                return Err(ExecError::StaleNonce { last, got: tx.nonce }.into());
            }
        }
        self.pending.insert(hash, PendingTx { tx, received_at: now });
        self.dropped.remove(&hash);
        self.stalled = false;
        Ok(())
    }

    /// Committed state with every currently executable pending transaction
    /// applied, in the order a proposer would include them.
    pub fn speculative_state(&self) -> State {
        let (_, state) = self.select_batch(usize::MAX);
        state
    }

    /// Greedy multi-pass selection: applies pending transactions in arrival
    /// order, holding back any whose sender still has a lower pending nonce,
    /// until a pass makes no progress.
    fn select_batch(&self, limit: usize) -> (Vec<Transaction>, State) {
        let mut remaining: Vec<&PendingTx> = self.pending.values().collect();
        remaining.sort_by_key(|p| (p.received_at, p.tx.sender, p.tx.nonce));
        let mut state = self.chain.state().clone();
        let mut chosen = Vec::new();
        loop {
            let mut lowest: BTreeMap<Address, u64> = BTreeMap::new();
            for p in &remaining {
                let e = lowest.entry(p.tx.sender).or_insert(p.tx.nonce);
                *e = (*e).min(p.tx.nonce);
            }
            let before = chosen.len();
            let mut blocked: BTreeSet<Address> = BTreeSet::new();
            remaining.retain(|p| {
                if chosen.len() >= limit {
                    return true;
                }
                let tx = &p.tx;
                if state.last_nonce(&tx.sender).is_some_and(|last| tx.nonce <= last) {
                    return false;
                }
                if blocked.contains(&tx.sender) || lowest[&tx.sender] < tx.nonce {
                    return true;
                }
                match state.apply(tx) {
                    Ok(()) => {
                        chosen.push(tx.clone());
                        false
                    }
                    Err(_) => {
                        blocked.insert(tx.sender);
                        true
                    }
                }
            });
            if chosen.len() == before || chosen.len() >= limit {
                break;
            }
        }
        (chosen, state)
    }

    fn batch_ready_at(&self) -> Option<u64> {
        if self.proposer_for(self.next_height(), self.round) != self.address()
            || self.hs.proposed.contains(&self.round)
            || self.stalled
        {
            return None;
        }
        if self.hs.valid.is_some() {
            return Some(0);
        }
        self.pending
            .values()
            .map(|p| p.received_at + self.cfg.batch_window_ms)
            .min()
    }

    // -----------------------------------------------------------------------
    // Proposing
    // -----------------------------------------------------------------------

    /// Proposes for the current round if this replica is the proposer.
    pub fn propose(&mut self, now: u64) -> Result<Vec<Action>, ReplicaError> {
        let height = self.next_height();
        if self.proposer_for(height, self.round) != self.address() {
            return Err(ReplicaError::NotMyTurn);
        }
        let proposal = if let Some((vr, hash)) = self.hs.valid {
            let block = self.hs.blocks[&hash].0.clone();
            let polka = self.votes_for(vr, VotePhase::Prevote, Some(hash));
            Proposal::sign(&self.key, &self.anchor, self.round, block, Some(vr), polka)
        } else {
            let (txs, _) = self.select_batch(self.cfg.max_block_txs);
            if txs.is_empty() {
                self.stalled = true;
                return Err(ReplicaError::NothingPending);
            }
            let tip = self.chain.tip();
            let block = Block::seal(
                height,
                tip.hash,
                now.max(tip.timestamp),
                self.address(),
                txs,
            );
            Proposal::sign(&self.key, &self.anchor, self.round, block, None, Vec::new())
        };
        self.hs.proposed.insert(self.round);
        self.own_proposal = Some(proposal.clone());
        let mut actions = vec![Action::Broadcast(Message::Proposal {
            proposal: Box::new(proposal.clone()),
        })];
        actions.extend(self.on_proposal(now, self.address(), proposal)?);
        Ok(actions)
    }

    fn try_propose(&mut self, now: u64) -> Vec<Action> {
        match self.batch_ready_at() {
            Some(at) if at <= now => self.propose(now).unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    // -----------------------------------------------------------------------
    // Message handling
    // -----------------------------------------------------------------------

    pub fn on_message(
        &mut self,
        now: u64,
        from: Address,
        message: Message,
    ) -> Result<Vec<Action>, ReplicaError> {
        let mut actions = match message {
            Message::Tx { tx } => {
                self.admit(now, tx)?;
                self.try_propose(now)
            }
            Message::Proposal { proposal } => self.on_proposal(now, from, *proposal)?,
            Message::Vote { vote } => self.on_vote(now, from, vote)?,
            Message::SyncRequest { from_height } => self.on_sync_request(from, from_height),
            Message::SyncResponse { blocks } => self.on_sync_response(now, blocks)?,
        };
        actions.push(self.timer());
        Ok(actions)
    }

    fn buffer_future(&mut self, from: Address, height: u64, message: Message) -> Vec<Action> {
        if self.buffered < MAX_BUFFERED {
            self.future.entry(height).or_default().push((from, message));
            self.buffered += 1;
        }
        self.request_sync(Some(from))
    }

    fn request_sync(&mut self, to: Option<Address>) -> Vec<Action> {
        let h = self.next_height();
        if to.is_some() && self.sync_requested_for == Some(h) {
            return Vec::new();
        }
        self.sync_requested_for = Some(h);
        let message = Message::SyncRequest { from_height: h };
        vec![match to {
            Some(to) => Action::Send { to, message },
            None => Action::Broadcast(message),
        }]
    }

    /// Sends committed blocks to a peer seen voting at an old height.
    fn help_peer(&mut self, peer: Address, peer_height: u64) -> Vec<Action> {
        if peer == self.address() || self.helped.get(&peer).is_some_and(|h| *h >= peer_height) {
            return Vec::new();
        }
        self.helped.insert(peer, peer_height);
        self.on_sync_request(peer, peer_height)
    }

    fn on_proposal(
        &mut self,
        now: u64,
        from: Address,
        p: Proposal,
    ) -> Result<Vec<Action>, ReplicaError> {
        let height = self.next_height();
        if p.block.height < height {
            return Err(ReplicaError::StaleProposal);
        }
        let expected = self.proposer_for(p.block.height, p.round);
        // A re-proposed block keeps the proposer of the round that built it.
        if from != expected {
            return Err(ReplicaError::WrongProposer);
        }
        let key = self
            .validator_key(&expected)
            .ok_or(ReplicaError::UnknownValidator(expected))?;
        if !p.verify(&self.anchor, &key) {
            return Err(ReplicaError::BadSignature);
        }
        if p.block.height > height {
            let h = p.block.height;
            return Ok(self.buffer_future(
                from,
                h,
                Message::Proposal {
                    proposal: Box::new(p),
                },
            ));
        }
        if self.hs.proposals.contains_key(&p.round) {
            return Ok(Vec::new());
        }
        let hash = p.block.hash;
        if !self.hs.blocks.contains_key(&hash) {
            let state = self.chain.validate_next(&p.block).ok();
            self.hs.blocks.insert(hash, (p.block.clone(), state));
        }
        let mut valid_round = None;
        if let Some(vr) = p.valid_round {
            if vr < p.round && self.check_quorum(&p.polka, height, vr, VotePhase::Prevote, hash) {
                for v in p.polka {
                    self.record_vote(v);
                }
                valid_round = Some(vr);
            }
        }
        self.hs.proposals.insert(p.round, (hash, valid_round));
        self.hs.active = true;
        let mut actions = Vec::new();
        if p.round > self.round {
            self.enter_round(now, p.round);
        }
        actions.extend(self.progress(now));
        Ok(actions)
    }

    fn on_vote(&mut self, now: u64, from: Address, vote: Vote) -> Result<Vec<Action>, ReplicaError> {
        let key = self
            .validator_key(&vote.voter)
            .ok_or(ReplicaError::UnknownValidator(vote.voter))?;
        if !vote.verify(&self.anchor, &key) {
            return Err(ReplicaError::BadSignature);
        }
        let height = self.next_height();
        if vote.height < height {
            return Ok(self.help_peer(from, vote.height));
        }
        if vote.height > height {
            let h = vote.height;
            return Ok(self.buffer_future(from, h, Message::Vote { vote }));
        }
        // Catch up with validators whose round timers ran ahead.
        if vote.round > self.round {
            self.enter_round(now, vote.round);
        }
        self.record_vote(vote);
        self.hs.active = true;
        Ok(self.progress(now))
    }

    fn on_sync_request(&mut self, to: Address, from_height: u64) -> Vec<Action> {
        let tip = self.chain.height();
        let first = from_height.max(1);
        if first > tip || to == self.address() {
            return Vec::new();
        }
        let last = tip.min(first + MAX_SYNC_BLOCKS - 1);
        let blocks: Vec<CertifiedBlock> = (first..=last)
            .filter_map(|h| {
                Some(CertifiedBlock {
                    block: self.chain.block(h)?.clone(),
                    certificate: self.certificates.get(&h)?.clone(),
                })
            })
            .collect();
        if blocks.is_empty() {
            return Vec::new();
        }
        vec![Action::Send {
            to,
            message: Message::SyncResponse { blocks },
        }]
    }

    fn on_sync_response(
        &mut self,
        now: u64,
        blocks: Vec<CertifiedBlock>,
    ) -> Result<Vec<Action>, ReplicaError> {
        let mut actions = Vec::new();
        for cb in blocks {
            if cb.block.height != self.next_height() {
                continue;
            }
            let round = cb.certificate.first().map_or(0, |v| v.round);
            if !self.check_quorum(
                &cb.certificate,
                cb.block.height,
                round,
                VotePhase::Precommit,
                cb.block.hash,
            ) {
                return Err(ReplicaError::BadCertificate);
            }
            let state = self.chain.validate_next(&cb.block)?;
            actions.extend(self.commit(now, cb.block, state, cb.certificate));
        }
        Ok(actions)
    }

    pub fn on_timer(&mut self, now: u64) -> Vec<Action> {
        let ttl = self.cfg.pending_ttl_ms;
        self.drop_pending(|p| (p.received_at + ttl <= now).then_some(DropReason::Expired));
        let mut actions = Vec::new();
        if now >= self.round_deadline {
            if self.hs.active || !self.pending.is_empty() {
                self.enter_round(now, self.round + 1);
                actions.extend(self.request_sync(None));
                actions.extend(self.progress(now));
            } else {
                // Idle: poll peers in case a commit was missed entirely.
                self.round_deadline = now + self.cfg.round_timeout_ms();
                self.sync_requested_for = None;
                actions.extend(self.request_sync(None));
            }
        }
        if self.hs.active && now >= self.resend_at {
            actions.extend(self.retransmit(now));
        }
        actions.extend(self.try_propose(now));
        actions.push(self.timer());
        actions
    }

    fn timer(&self) -> Action {
        Action::SetTimer {
            at_ms: self.next_deadline(),
        }
    }

    fn enter_round(&mut self, now: u64, round: u64) {
        self.round = round;
        self.stalled = false;
        self.round_deadline = now + self.cfg.round_timeout_ms();
        self.resend_at = now + self.cfg.resend_interval_ms();
    }

    /// Resends this round's own proposal and votes to cover message loss.
    fn retransmit(&mut self, now: u64) -> Vec<Action> {
        self.resend_at = now + self.cfg.resend_interval_ms();
        let me = self.address();
        let round = self.round;
        let mut actions: Vec<Action> = self
            .own_proposal
            .iter()
            .filter(|p| p.round == round)
            .map(|p| Action::Broadcast(Message::Proposal {
                proposal: Box::new(p.clone()),
            }))
            .collect();
        for phase in [VotePhase::Prevote, VotePhase::Precommit] {
            if let Some(v) = self.hs.votes.get(&(round, phase)).and_then(|m| m.get(&me)) {
                actions.push(Action::Broadcast(Message::Vote { vote: v.clone() }));
            }
        }
        actions
    }

    // -----------------------------------------------------------------------
    // Voting rules
    // -----------------------------------------------------------------------

    fn record_vote(&mut self, vote: Vote) {
        let slot = self.hs.votes.entry((vote.round, vote.phase)).or_default();
        slot.entry(vote.voter).or_insert(vote);
    }

    fn votes_for(&self, round: u64, phase: VotePhase, hash: Option<Hash>) -> Vec<Vote> {
        self.hs
            .votes
            .get(&(round, phase))
            .map(|m| m.values().filter(|v| v.block_hash == hash).cloned().collect())
            .unwrap_or_default()
    }

    fn count(&self, round: u64, phase: VotePhase, hash: Hash) -> usize {
        self.hs.votes.get(&(round, phase)).map_or(0, |m| {
            m.values().filter(|v| v.block_hash == Some(hash)).count()
        })
    }

    fn block_is_valid(&self, hash: &Hash) -> bool {
        self.hs.blocks.get(hash).is_some_and(|(_, s)| s.is_some())
    }

    /// True iff `votes` holds a quorum of distinct, correctly signed
    /// validator votes of `phase` for `hash` at `height`/`round`.
    fn check_quorum(
        &self,
        votes: &[Vote],
        height: u64,
        round: u64,
        phase: VotePhase,
        hash: Hash,
    ) -> bool {
        let mut voters = BTreeSet::new();
        for v in votes {
            if v.height != height
                || v.round != round
                || v.phase != phase
                || v.block_hash != Some(hash)
            {
                return false;
            }
            let Some(key) = self.validator_key(&v.voter) else {
                return false;
            };
            if !v.verify(&self.anchor, &key) || !voters.insert(v.voter) {
                return false;
            }
        }
        voters.len() >= self.quorum()
    }

    fn cast(&mut self, phase: VotePhase, hash: Option<Hash>) -> Action {
        let vote = Vote::sign(
            &self.key,
            &self.anchor,
            self.next_height(),
            self.round,
            phase,
            hash,
        );
        self.record_vote(vote.clone());
        Action::Broadcast(Message::Vote { vote })
    }

    /// Applies the voting and commit rules until nothing changes.
    fn progress(&mut self, now: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        loop {
            let height_before = self.chain.height();
            let round = self.round;

            // Track the latest polka for a known valid block.
            let polkas: Vec<(u64, Hash)> = self
                .hs
                .votes
                .iter()
                .filter(|((_, phase), _)| *phase == VotePhase::Prevote)
                .flat_map(|((r, _), m)| m.values().filter_map(move |v| v.block_hash.map(|h| (*r, h))))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter(|(r, h)| self.count(*r, VotePhase::Prevote, *h) >= self.quorum())
                .collect();
            for (r, h) in polkas {
                if self.block_is_valid(&h) && self.hs.valid.map_or(true, |(vr, _)| r > vr) {
                    self.hs.valid = Some((r, h));
                }
            }

            let mut changed = false;

            // Prevote.
            if !self.hs.prevoted.contains(&round) {
                if let Some(&(hash, valid_round)) = self.hs.proposals.get(&round) {
                    let acceptable = self.block_is_valid(&hash)
                        && match self.hs.locked {
                            None => true,
                            Some((_, locked)) if locked == hash => true,
                            Some((lr, _)) => valid_round.is_some_and(|vr| vr >= lr),
                        };
                    self.hs.prevoted.insert(round);
                    actions.push(self.cast(VotePhase::Prevote, acceptable.then_some(hash)));
                    changed = true;
                }
            }

            // Lock and precommit on a polka in the current round.
            if !self.hs.precommitted.contains(&round) {
                let polka = self
                    .hs
                    .blocks
                    .keys()
                    .copied()
                    .find(|h| {
                        self.block_is_valid(h) && self.count(round, VotePhase::Prevote, *h) >= self.quorum()
                    });
                if let Some(hash) = polka {
                    self.hs.locked = Some((round, hash));
                    self.hs.valid = Some((round, hash));
                    self.hs.precommitted.insert(round);
                    actions.push(self.cast(VotePhase::Precommit, Some(hash)));
                    changed = true;
                }
            }

            // Commit on a precommit quorum from any round.
            let decided = self.hs.votes.iter().find_map(|((r, phase), m)| {
                if *phase != VotePhase::Precommit {
                    return None;
                }
                let hashes: BTreeSet<Hash> = m.values().filter_map(|v| v.block_hash).collect();
                hashes
                    .into_iter()
                    .find(|h| self.block_is_valid(h) && self.count(*r, VotePhase::Precommit, *h) >= self.quorum())
                    .map(|h| (*r, h))
            });
            if let Some((r, hash)) = decided {
                let (block, state) = self.hs.blocks.remove(&hash).expect("validated block");
                let certificate = self.votes_for(r, VotePhase::Precommit, Some(hash));
                actions.extend(self.commit(now, block, state.expect("valid"), certificate));
                changed = true;
            }

            if !changed || self.chain.height() != height_before {
                break;
            }
        }
        actions
    }

    fn commit(&mut self, now: u64, block: Block, state: State, certificate: Vec<Vote>) -> Vec<Action> {
        let height = block.height;
        for tx in &block.transactions {
            self.pending.remove(&tx.hash());
        }
        self.certificates.insert(height, certificate.clone());
        self.chain.commit_unchecked(block.clone(), state);
        let committed = self.chain.state().clone();
        self.drop_pending(|p| {
            committed
                .last_nonce(&p.tx.sender)
                .is_some_and(|last| p.tx.nonce <= last)
                .then_some(DropReason::NonceSuperseded)
        });
        self.hs = HeightState::default();
        self.round = 0;
        self.stalled = false;
        self.own_proposal = None;
        self.round_deadline = now + self.cfg.round_timeout_ms();
        self.resend_at = now + self.cfg.resend_interval_ms();

        let mut actions = vec![Action::Committed(CertifiedBlock { block, certificate })];

        // Drop anything buffered for heights now in the past, then replay the
        // next height's messages.
        let next = self.next_height();
        let stale: Vec<u64> = self.future.range(..next).map(|(h, _)| *h).collect();
        for h in stale {
            self.buffered -= self.future.remove(&h).map_or(0, |v| v.len());
        }
        if let Some(msgs) = self.future.remove(&next) {
            self.buffered -= msgs.len();
            for (from, msg) in msgs {
                if let Ok(more) = self.on_message(now, from, msg) {
                    actions.extend(more.into_iter().filter(|a| !matches!(a, Action::SetTimer { .. })));
                }
            }
        }
        if self.next_height() == next {
            actions.extend(self.try_propose(now));
        }
        actions
    }
}

/// Checks that `certificate` is a quorum of valid precommits for `block`
/// under `config`. Used by audits that only hold committed blocks.
pub fn verify_certificate(config: &ChainConfig, block: &Block, certificate: &[Vote]) -> bool {
    let anchor = config.anchor();
    let Some(round) = certificate.first().map(|v| v.round) else {
        return false;
    };
    let mut voters = BTreeSet::new();
    for v in certificate {
        let Some(key) = config.validators.iter().find(|k| k.address() == v.voter) else {
            return false;
        };
        if v.height != block.height
            || v.round != round
            || v.phase != VotePhase::Precommit
            || v.block_hash != Some(block.hash)
            || !v.verify(&anchor, key)
            || !voters.insert(v.voter)
        {
            return false;
        }
    }
    voters.len() >= config.quorum_size()
}
