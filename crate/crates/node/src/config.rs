//! Node configuration file (TOML).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use coldledger_core::access_control::OwnerType;
use coldledger_core::crypto::KeyFile;
use coldledger_core::replication::ReplicaConfig;
use coldledger_core::telemetry::ColdChainPolicy;
use coldledger_core::{Address, ChainConfig, Keypair};

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "COLDLEDGER_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid key file {path}: {reason}")]
    Key { path: PathBuf, reason: String },
    #[error("key derives address {derived}, config says {configured}")]
    IdentityMismatch {
        derived: Address,
        configured: Address,
    },
    #[error("peer {0} is not a configured validator")]
    UnknownPeer(Address),
    #[error("invalid chain config: {0}")]
    Chain(String),
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// Another validator and the base URL of its HTTP API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub address: Address,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub key_file: PathBuf,
    /// Expected address of `key_file`, checked at start-up when present.
    #[serde(default)]
    pub address: Option<Address>,
    /// Party role the operator expects this identity to hold on chain.
    #[serde(default)]
    pub role: Option<OwnerType>,
    pub chain_file: PathBuf,
    pub listen: SocketAddr,
    /// Signs auto-issued expiries. Nodes without it only raise alerts.
    #[serde(default)]
    pub agent_key_file: Option<PathBuf>,
    #[serde(default)]
    pub peers: Vec<Peer>,
    pub chain: ChainConfig,
    #[serde(default)]
    pub policy: ColdChainPolicy,
    #[serde(default)]
    pub replica: ReplicaConfig,
}

impl NodeConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Loads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.key_file);
            fix(&mut cfg.chain_file);
            if let Some(agent) = cfg.agent_key_file.as_mut() {
                fix(agent);
            }
        }
        Ok(cfg)
    }

    /// Loads the key and checks it against the configured identity.
    pub fn keypair(&self) -> Result<Keypair, ConfigError> {
        let key = read_key(&self.key_file)?;
        if let Some(configured) = self.address {
            if configured != key.address() {
                return Err(ConfigError::IdentityMismatch {
                    derived: key.address(),
                    configured,
                });
            }
        }
        Ok(key)
    }

    pub fn agent_keypair(&self) -> Result<Option<Keypair>, ConfigError> {
        self.agent_key_file.as_deref().map(read_key).transpose()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chain
            .validate()
            .map_err(|e| ConfigError::Chain(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| ConfigError::Policy(e.to_string()))?;
        for peer in &self.peers {
            if !self.chain.is_validator(&peer.address) {
                return Err(ConfigError::UnknownPeer(peer.address));
            }
        }
        Ok(())
    }
}

pub fn read_key(path: &Path) -> Result<Keypair, ConfigError> {
    let err = |reason: String| ConfigError::Key {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: KeyFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    file.to_keypair().map_err(|e| err(e.to_string()))
}
