#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use coldledger_core::crypto::KeyFile;
use coldledger_core::ledger::{sign_transaction, Call, Transaction};
use coldledger_core::replication::ReplicaConfig;
use coldledger_core::telemetry::ColdChainPolicy;
use coldledger_core::{ChainConfig, Hash, Keypair};
use coldledger_node::config::{NodeConfig, Peer};
use serde_json::Value;

pub fn write_key(dir: &Path, name: &str, key: &Keypair) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.key"));
    std::fs::write(&path, serde_json::to_string(&KeyFile::from_keypair(key)).unwrap()).unwrap();
    path
}

pub fn fast_replica() -> ReplicaConfig {
    ReplicaConfig {
        max_delay_ms: 50,
        batch_window_ms: 5,
        ..ReplicaConfig::default()
    }
}

pub fn node_config(
    dir: &Path,
    index: usize,
    key: &Keypair,
    chain: &ChainConfig,
    peers: Vec<Peer>,
    agent: Option<&Keypair>,
) -> NodeConfig {
    NodeConfig {
        key_file: write_key(dir, &format!("node{index}"), key),
        address: Some(key.address()),
        role: None,
        chain_file: dir.join(format!("node{index}.chain.jsonl")),
        listen: "127.0.0.1:0".parse().unwrap(),
        agent_key_file: agent.map(|a| write_key(dir, &format!("agent{index}"), a)),
        peers,
        chain: chain.clone(),
        policy: ColdChainPolicy::default(),
        replica: fast_replica(),
    }
}

pub struct Client {
    pub base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: String) -> Self {
        Client {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_raw(&self, path: &str, body: String) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn next_nonce(&self, key: &Keypair) -> u64 {
        let (_, v) = self.get(&format!("/accounts/{}/nonce", key.address())).await;
        v["next_nonce"].as_u64().unwrap()
    }

    /// Signs `call` with the next nonce and posts it.
    pub async fn send(&self, key: &Keypair, call: Call) -> (u16, Value) {
        let nonce = self.next_nonce(key).await;
        let tx = sign_transaction(key, Transaction::new(call, key.address(), nonce)).unwrap();
        self.post_raw("/tx", serde_json::to_string(&tx).unwrap()).await
    }

    /// Posts `call` and waits until it commits.
    pub async fn commit(&self, key: &Keypair, call: Call) {
        let (status, body) = self.send(key, call).await;
        assert_eq!(status, 202, "{body}");
        let hash: Hash = body["hash"].as_str().unwrap().parse().unwrap();
        self.wait_committed(&hash).await;
    }

    pub async fn wait_committed(&self, hash: &Hash) {
        for _ in 0..400 {
            let (_, v) = self.get(&format!("/tx/{hash}")).await;
            match v["status"].as_str() {
                Some("COMMITTED") => return,
                Some("DROPPED") => panic!("dropped: {v}"),
                _ => tokio::time::sleep(Duration::from_millis(25)).await,
            }
        }
        panic!("transaction {hash} did not commit");
    }

    pub async fn height(&self) -> u64 {
        self.get("/chain/height").await.1["height"].as_u64().unwrap()
    }
}
