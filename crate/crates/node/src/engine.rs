//! The node's single writer: replica, durable chain file and alert monitor.
//!
//! [`Engine`] is synchronous and clock-free; callers pass the current time.
//! Every committed block is written to the chain file before the replica's
//! other outputs are released, and the monitor is driven from the same
//! commits, so a restart that replays the file rebuilds identical state and
//! alerts.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use thiserror::Error;

use coldledger_core::ledger::store::{ChainStore, StoreError};
use coldledger_core::replication::{
    verify_certificate, Action, CertifiedBlock, Envelope, Message, Replica, ReplicaConfig,
    ReplicaError, TxStatus,
};
use coldledger_core::telemetry::{
    ingest_reading, Alert, ColdChainMonitor, ColdChainPolicy, SignedReading, SweepAgent,
};
use coldledger_core::{Address, Chain, ChainConfig, Hash, Keypair, State, Transaction};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("chain file corrupt at height {height}: {reason}")]
    CorruptChain { height: u64, reason: String },
    #[error("invalid chain config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::CorruptChain { .. } => "CORRUPT_CHAIN",
            EngineError::Config(_) => "INVALID_CONFIG",
            EngineError::Store(_) => "STORE_FAILURE",
        }
    }
}

/// A submission refused before it reached the pending pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: String,
    pub message: String,
}

impl From<&ReplicaError> for Rejection {
    fn from(e: &ReplicaError) -> Self {
        Rejection {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// A message for one peer (`to = Some`) or for every peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: Option<Address>,
    pub message: Message,
}

pub struct Engine {
    replica: Replica,
    store: ChainStore<CertifiedBlock>,
    monitor: ColdChainMonitor,
    agent: Option<Keypair>,
}

impl Engine {
    /// Replays the chain file (creating it if absent) and rebuilds state and
    /// alerts from it.
    pub fn open(
        key: Keypair,
        config: ChainConfig,
        replica_cfg: ReplicaConfig,
        policy: ColdChainPolicy,
        agent: Option<Keypair>,
        chain_file: &Path,
        now: u64,
    ) -> Result<Self, EngineError> {
        let (store, records) = ChainStore::<CertifiedBlock>::open(chain_file).map_err(|e| match e {
            StoreError::Corrupt { height, reason } => EngineError::CorruptChain { height, reason },
            other => EngineError::Store(other),
        })?;
        let mut chain = Chain::new(config.clone()).map_err(|e| EngineError::Config(e.to_string()))?;
        let issuer = agent.as_ref().map_or_else(|| key.address(), Keypair::address);
        let mut monitor = ColdChainMonitor::new(policy).with_issuer(issuer);
        let mut certificates = BTreeMap::new();
        for (i, record) in records.into_iter().enumerate() {
            let height = i as u64 + 1;
            chain
                .append(record.block.clone())
                .map_err(|f| EngineError::CorruptChain {
                    height: f.height,
                    reason: f.reason.to_string(),
                })?;
            if !verify_certificate(&config, &record.block, &record.certificate) {
                return Err(EngineError::CorruptChain {
                    height,
                    reason: "commit certificate does not verify".into(),
                });
            }
            monitor.observe_block(&record.block);
            monitor.sweep(chain.state(), None);
            certificates.insert(height, record.certificate);
        }
        let replica = Replica::restore(key, chain, certificates, replica_cfg, now);
        Ok(Engine {
            replica,
            store,
            monitor,
            agent,
        })
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn state(&self) -> &State {
        self.replica.state()
    }

    pub fn chain(&self) -> &Chain {
        self.replica.chain()
    }

    pub fn address(&self) -> Address {
        self.replica.address()
    }

    pub fn policy(&self) -> &ColdChainPolicy {
        self.monitor.policy()
    }

    pub fn alerts(&self) -> &[Alert] {
        self.monitor.alerts()
    }

    pub fn tx_status(&self, hash: &Hash) -> TxStatus {
        self.replica.tx_status(hash)
    }

    pub fn next_deadline(&self) -> u64 {
        self.replica.next_deadline()
    }

    /// State including every executable pending transaction.
    pub fn speculative_state(&self) -> State {
        self.replica.speculative_state()
    }

    /// Pre-checks `tx` against the speculative state and admits it.
    pub fn submit(&mut self, now: u64, tx: Transaction) -> Result<(Hash, Vec<Outbound>), SubmitError> {
        let mut ahead = self.speculative_state();
        if let Err(e) = ahead.apply(&tx) {
            return Err(SubmitError::Rejected(Rejection {
                code: e.code().to_string(),
                message: e.to_string(),
            }));
        }
        self.admit(now, tx)
    }

    fn admit(&mut self, now: u64, tx: Transaction) -> Result<(Hash, Vec<Outbound>), SubmitError> {
        let hash = tx.hash();
        let actions = self
            .replica
            .submit(now, tx)
            .map_err(|e| SubmitError::Rejected(Rejection::from(&e)))?;
        Ok((hash, self.run(now, actions)?))
    }

    /// Validates and submits a batch of sensor readings in order. Each
    /// reading is checked against the state left by the ones before it.
    pub fn ingest(
        &mut self,
        now: u64,
        readings: Vec<Result<SignedReading, Rejection>>,
    ) -> Result<(Vec<Result<Hash, Rejection>>, Vec<Outbound>), EngineError> {
        let mut ahead = self.speculative_state();
        let mut results = Vec::with_capacity(readings.len());
        let mut out = Vec::new();
        for reading in readings {
            let result = reading.and_then(|r| {
                let tx = ingest_reading(&ahead, &r).map_err(|e| Rejection {
                    code: e.code().to_string(),
                    message: e.to_string(),
                })?;
                ahead.apply(&tx).map_err(|e| Rejection {
                    code: e.code().to_string(),
                    message: e.to_string(),
                })?;
                Ok(tx)
            });
            match result {
                Ok(tx) => match self.admit(now, tx) {
                    Ok((hash, more)) => {
                        out.extend(more);
                        results.push(Ok(hash));
                    }
                    Err(SubmitError::Rejected(r)) => results.push(Err(r)),
                    Err(SubmitError::Fatal(e)) => return Err(e),
                },
                Err(r) => results.push(Err(r)),
            }
        }
        Ok((results, out))
    }

    pub fn on_peer_message(&mut self, now: u64, envelope: Envelope) -> Result<Vec<Outbound>, SubmitError> {
        let actions = self
            .replica
            .on_message(now, envelope.from, envelope.message)
            .map_err(|e| SubmitError::Rejected(Rejection::from(&e)))?;
        Ok(self.run(now, actions)?)
    }

    pub fn tick(&mut self, now: u64) -> Result<Vec<Outbound>, EngineError> {
        let actions = self.replica.on_timer(now);
        self.run(now, actions)
    }

    /// Executes replica actions: persists commits, drives the monitor and
    /// feeds auto-issued expiries back into the replica.
    fn run(&mut self, now: u64, actions: Vec<Action>) -> Result<Vec<Outbound>, EngineError> {
        let mut queue: VecDeque<Action> = actions.into();
        let mut out = Vec::new();
        while let Some(action) = queue.pop_front() {
            match action {
                Action::Send { to, message } => out.push(Outbound { to: Some(to), message }),
                Action::Broadcast(message) => out.push(Outbound { to: None, message }),
                Action::SetTimer { .. } => {}
                Action::Committed(cb) => {
                    self.store.append(&cb)?;
                    self.monitor.observe_block(&cb.block);
                    for tx in self.sweep() {
                        match self.replica.submit(now, tx) {
                            Ok(more) => queue.extend(more),
                            Err(e) => tracing::warn!(code = e.code(), "auto-expiry not admitted"),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn sweep(&mut self) -> Vec<Transaction> {
        let Some(key) = self.agent.clone() else {
            self.monitor.sweep(self.replica.state(), None);
            return Vec::new();
        };
        let me = key.address();
        let pending_max = self
            .replica
            .pending()
            .filter(|tx| tx.sender == me)
            .map(|tx| tx.nonce + 1)
            .max()
            .unwrap_or(0);
        let mut agent = SweepAgent {
            next_nonce: self.replica.state().next_nonce(&me).max(pending_max),
            key,
        };
        let outcome = self.monitor.sweep(self.replica.state(), Some(&mut agent));
        for alert in &outcome.alerts {
            tracing::info!(cause = ?alert.cause, ids = ?alert.vaccine_ids, "cold-chain alert");
        }
        outcome.expires
    }
}

/// A refused request, or a failure that leaves the node unable to continue.
#[derive(Debug)]
pub enum SubmitError {
    Rejected(Rejection),
    Fatal(EngineError),
}

impl From<EngineError> for SubmitError {
    fn from(e: EngineError) -> Self {
        SubmitError::Fatal(e)
    }
}
