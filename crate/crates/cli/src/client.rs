//! Blocking HTTP client for the node API.

use std::path::Path;
use std::time::{Duration, Instant};

use reqwest::blocking::Response;
use serde_json::Value;
use thiserror::Error;

use coldledger_core::crypto::KeyFile;
use coldledger_core::ledger::sign_transaction;
use coldledger_core::{Address, Call, Hash, Keypair, Transaction, VaccineId};

pub const DEFAULT_NODE: &str = "http://127.0.0.1:8545";

const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{code}: {message}")]
    Rejected { code: String, message: String },
    #[error("{reason}: transaction {hash} was dropped")]
    Dropped { hash: Hash, reason: String },
    #[error("transaction {0} not committed in time")]
    Timeout(Hash),
    #[error("node request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl ClientError {
    /// Stable code for rejections and drops.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Rejected { code, .. } => code,
            ClientError::Dropped { reason, .. } => reason,
            ClientError::Timeout(_) => "COMMIT_TIMEOUT",
            ClientError::Http(_) => "NODE_UNREACHABLE",
            ClientError::Protocol(_) => "PROTOCOL_ERROR",
            ClientError::Io { .. } => "IO_ERROR",
        }
    }

    /// True when the ledger refused the transaction, as opposed to a
    /// transport or local failure.
    pub fn is_rejection(&self) -> bool {
        matches!(self, ClientError::Rejected { .. } | ClientError::Dropped { .. })
    }
}

pub fn read_key(path: &Path) -> Result<Keypair, ClientError> {
    let io = |reason: String| ClientError::Io {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    let file: KeyFile = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
    file.to_keypair().map_err(|e| io(e.to_string()))
}

pub fn write_key(path: &Path, key: &Keypair) -> Result<(), ClientError> {
    let text = serde_json::to_string_pretty(&KeyFile::from_keypair(key)).expect("key file serializes");
    std::fs::write(path, text + "\n").map_err(|e| ClientError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Where a committed transaction landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub hash: Hash,
    pub height: u64,
    pub index: u64,
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
    pub commit_timeout: Duration,
}

impl Client {
    pub fn new(base: &str) -> Self {
        Client {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("http client"),
            commit_timeout: Duration::from_secs(30),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn decode(resp: Response) -> Result<Value, ClientError> {
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| ClientError::Protocol(format!("status {status}: {e}")))?;
        if status.is_success() {
            return Ok(body);
        }
        match (body["code"].as_str(), body["message"].as_str()) {
            (Some(code), message) => Err(ClientError::Rejected {
                code: code.to_string(),
                message: message.unwrap_or_default().to_string(),
            }),
            _ => Err(ClientError::Protocol(format!("status {status}: {body}"))),
        }
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        Self::decode(self.http.get(self.url(path)).send()?)
    }

    pub fn next_nonce(&self, address: &Address) -> Result<u64, ClientError> {
        let v = self.get(&format!("/accounts/{address}/nonce"))?;
        v["next_nonce"]
            .as_u64()
            .ok_or_else(|| ClientError::Protocol(format!("no next_nonce in {v}")))
    }

    pub fn submit(&self, tx: &Transaction) -> Result<Hash, ClientError> {
        let v = Self::decode(self.http.post(self.url("/tx")).json(tx).send()?)?;
        parse_hash(&v["hash"])
    }

    /// Signs `call` as `key` with the node's suggested next nonce and submits it.
    pub fn send(&self, key: &Keypair, call: Call) -> Result<Hash, ClientError> {
        let nonce = self.next_nonce(&key.address())?;
        let tx = sign_transaction(key, Transaction::new(call, key.address(), nonce))
            .expect("sender is the signing key");
        self.submit(&tx)
    }

    /// Polls until the transaction commits, is dropped or the timeout passes.
    pub fn wait(&self, hash: Hash) -> Result<Receipt, ClientError> {
        let deadline = Instant::now() + self.commit_timeout;
        loop {
            let v = self.get(&format!("/tx/{hash}"))?;
            match v["status"].as_str() {
                Some("COMMITTED") => {
                    return Ok(Receipt {
                        hash,
                        height: v["height"].as_u64().unwrap_or_default(),
                        index: v["index"].as_u64().unwrap_or_default(),
                    })
                }
                Some("DROPPED") => {
                    return Err(ClientError::Dropped {
                        hash,
                        reason: v["reason"].as_str().unwrap_or("DROPPED").to_string(),
                    })
                }
                Some("PENDING") => {}
                _ => return Err(ClientError::Protocol(format!("unexpected tx status {v}"))),
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(hash));
            }
            std::thread::sleep(POLL_INTERVAL);
        }
    }

    pub fn vaccine(&self, id: VaccineId) -> Result<Value, ClientError> {
        self.get(&format!("/vaccines/{}", id.0))
    }

    /// Posts line-delimited readings. A partially rejected batch still
    /// returns the per-line receipt.
    pub fn post_telemetry(&self, body: String) -> Result<Value, ClientError> {
        let resp = self
            .http
            .post(self.url("/telemetry"))
            .header("content-type", "application/x-ndjson")
            .body(body)
            .send()?;
        let status = resp.status();
        let v: Value = resp
            .json()
            .map_err(|e| ClientError::Protocol(format!("status {status}: {e}")))?;
        if v.get("results").is_some() {
            return Ok(v);
        }
        Err(ClientError::Rejected {
            code: v["code"].as_str().unwrap_or("PROTOCOL_ERROR").to_string(),
            message: v["message"].as_str().unwrap_or_default().to_string(),
        })
    }
}

fn parse_hash(v: &Value) -> Result<Hash, ClientError> {
    v.as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ClientError::Protocol(format!("bad hash {v}")))
}
