//! Networked ledger node: HTTP API, peer replication over `POST /p2p`,
//! durable chain file and cold-chain alerts.

pub mod api;
pub mod config;
pub mod engine;
pub mod net;
pub mod server;

pub use config::NodeConfig;
pub use engine::Engine;
pub use server::{start, NodeError, RunningNode};
