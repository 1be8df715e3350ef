//! Outbound peer traffic and the node clock.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::sync::Notify;

use coldledger_core::replication::Envelope;
use coldledger_core::Address;

use crate::engine::Outbound;

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Fire-and-forget delivery to peers' `POST /p2p`. Lost messages are
/// covered by the replica's own retransmission.
#[derive(Clone)]
pub struct Network {
    me: Address,
    peers: Arc<BTreeMap<Address, String>>,
    client: reqwest::Client,
    wake: Arc<Notify>,
}

impl Network {
    pub fn new(me: Address, peers: BTreeMap<Address, String>) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(2))
            .build()
            .expect("http client");
        Network {
            me,
            peers: Arc::new(peers),
            client,
            wake: Arc::new(Notify::new()),
        }
    }

    /// Asks the timer loop to recompute its deadline.
    pub fn wake(&self) {
        self.wake.notify_one();
    }

    pub async fn woken(&self) {
        self.wake.notified().await;
    }

    pub fn dispatch(&self, out: Vec<Outbound>) {
        for Outbound { to, message } in out {
            let targets: Vec<&String> = match to {
                Some(addr) => self.peers.get(&addr).into_iter().collect(),
                None => self
                    .peers
                    .iter()
                    .filter(|(a, _)| **a != self.me)
                    .map(|(_, u)| u)
                    .collect(),
            };
            let envelope = Envelope {
                from: self.me,
                message,
            };
            for url in targets {
                let request = self
                    .client
                    .post(format!("{}/p2p", url.trim_end_matches('/')))
                    .json(&envelope);
                tokio::spawn(async move {
                    if let Err(e) = request.send().await {
                        tracing::debug!(error = %e, "peer unreachable");
                    }
                });
            }
        }
    }
}
