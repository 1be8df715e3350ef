//! Deterministic discrete-event network simulator.
//!
//! Every source of nondeterminism (message delay, loss, where a client
//! submits) comes from one seeded ChaCha8 stream, so a seed reproduces a run
//! exactly. Each directed link delivers in send order, like a TCP stream.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Message, Proposal, Replica, ReplicaConfig, Vote, VotePhase};
use crate::access_control::OwnerType;
use crate::crypto::{Address, Hash, Keypair, PublicKey};
use crate::ledger::{Block, Call, ChainConfig, Transaction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nodes: usize,
    /// The last `byzantine` validators misbehave.
    pub byzantine: usize,
    pub seed: u64,
    pub min_delay_ms: u64,
    pub max_delay_ms: u64,
    pub drop_rate: f64,
    pub max_time_ms: u64,
    pub batch_window_ms: u64,
    pub max_block_txs: usize,
    pub pending_ttl_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 4,
            byzantine: 0,
            seed: 0,
            min_delay_ms: 1,
            max_delay_ms: 20,
            drop_rate: 0.0,
            max_time_ms: 600_000,
            batch_window_ms: 5,
            max_block_txs: 256,
            pending_ttl_ms: 60_000,
        }
    }
}

impl SimConfig {
    pub fn replica_config(&self) -> ReplicaConfig {
        ReplicaConfig {
            max_delay_ms: self.max_delay_ms.max(1),
            batch_window_ms: self.batch_window_ms,
            max_block_txs: self.max_block_txs,
            pending_ttl_ms: self.pending_ttl_ms,
        }
    }
}

/// Validator keys used by simulations, derived from their index.
pub fn validator_key(index: usize) -> Keypair {
    Keypair::from_label(&format!("sim-validator-{index}"))
}

/// A client submission at a point in simulated time. `node` pins the
/// receiving validator; otherwise an honest one is drawn from the RNG.
#[derive(Debug, Clone)]
pub struct Submission {
    pub at_ms: u64,
    pub node: Option<usize>,
    pub tx: Transaction,
}

/// Validator that forges transactions, proposes blocks containing them,
/// approves only its own forgeries and withholds sync data.
struct Byzantine {
    forged_blocks: BTreeSet<Hash>,
    counter: u64,
    victim: Address,
}

impl Byzantine {
    fn forge_tx(&mut self, key: &Keypair) -> Transaction {
        self.counter += 1;
        // Claims to come from a genesis authority but is signed with the
        // byzantine key, so it can never verify.
        let mut tx = Transaction::new(
            Call::SetOwnerType {
                target: key.address(),
                role: OwnerType::Authority,
                public_key: key.public(),
            },
            self.victim,
            1_000_000 + self.counter,
        );
        tx.signature = key.sign(&tx.signing_bytes());
        tx
    }

    fn filter(&mut self, replica: &Replica, actions: Vec<Action>, forged: &mut Vec<Hash>) -> Vec<Action> {
        let key = replica.keypair().clone();
        let anchor = *replica.anchor();
        let mut out = Vec::new();
        for action in actions {
            match action {
                Action::Broadcast(Message::Proposal { proposal }) => {
                    let tx = self.forge_tx(&key);
                    forged.push(tx.hash());
                    let b = &proposal.block;
                    let mut txs = vec![tx];
                    txs.extend(b.transactions.iter().cloned());
                    let block = Block::seal(b.height, b.prev_hash, b.timestamp, b.proposer, txs);
                    self.forged_blocks.insert(block.hash);
                    let (height, round, hash) = (block.height, proposal.round, block.hash);
                    let p = Proposal::sign(&key, &anchor, round, block, None, Vec::new());
                    out.push(Action::Broadcast(Message::Proposal {
                        proposal: Box::new(p),
                    }));
                    for phase in [VotePhase::Prevote, VotePhase::Precommit] {
                        out.push(Action::Broadcast(Message::Vote {
                            vote: Vote::sign(&key, &anchor, height, round, phase, Some(hash)),
                        }));
                    }
                }
                Action::Broadcast(Message::Vote { vote }) => {
                    let approve_own = vote.block_hash.is_some_and(|h| self.forged_blocks.contains(&h));
                    if !approve_own {
                        let nil = Vote::sign(&key, &anchor, vote.height, vote.round, vote.phase, None);
                        out.push(Action::Broadcast(Message::Vote { vote: nil }));
                    }
                }
                Action::Send {
                    message: Message::SyncResponse { .. },
                    ..
                } => {}
                other => out.push(other),
            }
        }
        out
    }
}

enum Event {
    Deliver { to: usize, from: Address, message: Message },
    Timer { node: usize },
    Submit { node: Option<usize>, tx: Transaction },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub index: usize,
    pub address: Address,
    pub byzantine: bool,
    pub height: u64,
    pub tip_hash: Hash,
    pub state_digest: Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub end_time_ms: u64,
    /// True if the run reached quiescence before `max_time_ms`.
    pub settled: bool,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub nodes: Vec<NodeReport>,
    /// Submissions the receiving replica refused, with the reason code.
    pub rejected: Vec<(Hash, String)>,
}

pub struct Simulation {
    cfg: SimConfig,
    chain: ChainConfig,
    replicas: Vec<Replica>,
    byzantine: Vec<Option<Byzantine>>,
    index_of: BTreeMap<Address, usize>,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event>,
    seq: u64,
    now: u64,
    timers: Vec<Option<u64>>,
    /// Latest scheduled delivery per (from, to) link. Links are FIFO.
    links: BTreeMap<(usize, usize), u64>,
    in_flight: usize,
    sent: u64,
    dropped: u64,
    rejected: Vec<(Hash, String)>,
    forged: Vec<Hash>,
}

impl Simulation {
    pub fn new(cfg: SimConfig, genesis_authorities: Vec<PublicKey>) -> Self {
        assert!(cfg.nodes > 0, "at least one validator");
        assert!(cfg.byzantine < cfg.nodes, "at least one honest validator");
        let keys: Vec<Keypair> = (0..cfg.nodes).map(validator_key).collect();
        let chain = ChainConfig {
            chain_id: 1,
            genesis_authorities,
            validators: keys.iter().map(Keypair::public).collect(),
        };
        let victim = chain
            .genesis_authorities
            .first()
            .map_or(Address::ZERO, PublicKey::address);
        let replicas: Vec<Replica> = keys
            .iter()
            .map(|k| Replica::genesis(k.clone(), chain.clone(), cfg.replica_config(), 0))
            .collect();
        let byzantine = (0..cfg.nodes)
            .map(|i| {
                (i >= cfg.nodes - cfg.byzantine).then(|| Byzantine {
                    forged_blocks: BTreeSet::new(),
                    counter: 0,
                    victim,
                })
            })
            .collect();
        let index_of = keys.iter().enumerate().map(|(i, k)| (k.address(), i)).collect();
        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            chain,
            replicas,
            byzantine,
            index_of,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            now: 0,
            timers: vec![None; cfg.nodes],
            links: BTreeMap::new(),
            in_flight: 0,
            sent: 0,
            dropped: 0,
            rejected: Vec::new(),
            forged: Vec::new(),
        };
        for node in 0..cfg.nodes {
            let at = sim.replicas[node].next_deadline();
            sim.arm(node, at);
        }
        sim
    }

    pub fn chain_config(&self) -> &ChainConfig {
        &self.chain
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn is_byzantine(&self, index: usize) -> bool {
        self.byzantine[index].is_some()
    }

    pub fn honest(&self) -> impl Iterator<Item = &Replica> {
        self.replicas
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_byzantine(*i))
            .map(|(_, r)| r)
    }

    /// Hashes of every transaction forged by byzantine validators.
    pub fn forged(&self) -> &[Hash] {
        &self.forged
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    fn arm(&mut self, node: usize, at: u64) {
        let at = at.max(self.now);
        if self.timers[node].map_or(true, |t| at < t) {
            self.timers[node] = Some(at);
            self.schedule(at, Event::Timer { node });
        }
    }

    pub fn submit(&mut self, submission: Submission) {
        self.in_flight += 1;
        self.schedule(
            submission.at_ms,
            Event::Submit {
                node: submission.node,
                tx: submission.tx,
            },
        );
    }

    fn deliver(&mut self, from_node: usize, to: usize, message: Message) {
        self.sent += 1;
        if self.cfg.drop_rate > 0.0 && self.rng.gen_bool(self.cfg.drop_rate.min(1.0)) {
            self.dropped += 1;
            return;
        }
        let delay = self
            .rng
            .gen_range(self.cfg.min_delay_ms..=self.cfg.max_delay_ms.max(self.cfg.min_delay_ms));
        let from = self.replicas[from_node].address();
        let last = self.links.entry((from_node, to)).or_insert(0);
        let at = (self.now + delay).max(*last);
        *last = at;
        self.in_flight += 1;
        self.schedule(at, Event::Deliver { to, from, message });
    }

    fn perform(&mut self, node: usize, actions: Vec<Action>) {
        let actions = match self.byzantine[node].as_mut() {
            Some(b) => b.filter(&self.replicas[node], actions, &mut self.forged),
            None => actions,
        };
        for action in actions {
            match action {
                Action::Send { to, message } => {
                    if let Some(&to) = self.index_of.get(&to) {
                        self.deliver(node, to, message);
                    }
                }
                Action::Broadcast(message) => {
                    for to in 0..self.replicas.len() {
                        if to != node {
                            self.deliver(node, to, message.clone());
                        }
                    }
                }
                Action::SetTimer { at_ms } => self.arm(node, at_ms),
                Action::Committed(_) => {}
            }
        }
    }

    fn honest_indices(&self) -> Vec<usize> {
        (0..self.replicas.len())
            .filter(|i| !self.is_byzantine(*i))
            .collect()
    }

    /// No client work or messages outstanding and every honest replica at the
    /// same height with an empty pool.
    pub fn settled(&self) -> bool {
        if self.in_flight > 0 {
            return false;
        }
        let Some(h0) = self.honest().next().map(Replica::height) else {
            return true;
        };
        self.honest().all(|r| r.height() == h0 && r.pending_len() == 0)
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse((at, seq))) = self.queue.pop() else {
            return false;
        };
        let event = self.events.remove(&seq).expect("scheduled event");
        self.now = at;
        match event {
            Event::Deliver { to, from, message } => {
                self.in_flight -= 1;
                let actions = self.replicas[to]
                    .on_message(at, from, message)
                    .unwrap_or_else(|_| vec![Action::SetTimer {
                        at_ms: self.replicas[to].next_deadline(),
                    }]);
                self.perform(to, actions);
            }
            Event::Timer { node } => {
                if self.timers[node] == Some(at) {
                    self.timers[node] = None;
                    let mut actions = self.replicas[node].on_timer(at);
                    if let Some(b) = self.byzantine[node].as_mut() {
                        let tx = b.forge_tx(self.replicas[node].keypair());
                        self.forged.push(tx.hash());
                        actions.push(Action::Broadcast(Message::Tx { tx }));
                    }
                    self.perform(node, actions);
                }
            }
            Event::Submit { node, tx } => {
                self.in_flight -= 1;
                let node = node.unwrap_or_else(|| {
                    let honest = self.honest_indices();
                    honest[self.rng.gen_range(0..honest.len())]
                });
                let hash = tx.hash();
                match self.replicas[node].submit(at, tx) {
                    Ok(actions) => self.perform(node, actions),
                    Err(e) => self.rejected.push((hash, e.code().to_string())),
                }
            }
        }
        true
    }

    /// Runs until settled or `max_time_ms`.
    pub fn run(&mut self) -> SimReport {
        let mut settled = self.settled();
        while !settled {
            match self.queue.peek() {
                Some(Reverse((at, _))) if *at <= self.cfg.max_time_ms => {}
                _ => break,
            }
            self.step();
            settled = self.settled();
        }
        self.report(settled)
    }

    pub fn report(&self, settled: bool) -> SimReport {
        SimReport {
            seed: self.cfg.seed,
            end_time_ms: self.now,
            settled,
            messages_sent: self.sent,
            messages_dropped: self.dropped,
            nodes: self
                .replicas
                .iter()
                .enumerate()
                .map(|(index, r)| NodeReport {
                    index,
                    address: r.address(),
                    byzantine: self.is_byzantine(index),
                    height: r.height(),
                    tip_hash: r.chain().tip().hash,
                    state_digest: r.state().digest(),
                })
                .collect(),
            rejected: self.rejected.clone(),
        }
    }
}

/// First height at which two honest replicas committed different blocks.
pub fn find_fork(replicas: &[&Replica]) -> Option<u64> {
    let max = replicas.iter().map(|r| r.height()).max()?;
    (0..=max).find(|&h| {
        let hashes: BTreeSet<Hash> = replicas
            .iter()
            .filter_map(|r| r.chain().block(h).map(|b| b.hash))
            .collect();
        hashes.len() > 1
    })
}
