#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use coldledger_cli::client::write_key;
use coldledger_core::replication::ReplicaConfig;
use coldledger_core::telemetry::ColdChainPolicy;
use coldledger_core::{ChainConfig, Keypair};
use coldledger_node::{NodeConfig, RunningNode};

pub const BIN: &str = env!("CARGO_BIN_EXE_coldledger");

/// Parties of the supply chain, keyed by name. `ministry` is the genesis
/// authority and `agent` signs automatic expiries on the node.
pub const PARTIES: [(&str, &str); 7] = [
    ("maker", "MANUFACTURER"),
    ("truck", "TRANSPORTER"),
    ("depot", "DISTRIBUTER"),
    ("clinic", "VACCINATOR"),
    ("sensor", "SENSOR"),
    ("agent", "SENSOR"),
    ("ministry", "AUTHORITY"),
];

pub fn key(name: &str) -> Keypair {
    Keypair::from_label(&format!("cli-test-{name}"))
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stdout: {}\nstderr: {}", self.stdout, self.stderr);
        self
    }
}

pub fn run_cli(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("run coldledger");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// A single-validator node running on its own tokio runtime, with a key
/// file per party in a temp dir.
pub struct TestNode {
    pub dir: tempfile::TempDir,
    pub url: String,
    node: Option<RunningNode>,
    rt: tokio::runtime::Runtime,
}

impl TestNode {
    pub fn start() -> Self {
        Self::start_with(ColdChainPolicy::default())
    }

    pub fn start_with(policy: ColdChainPolicy) -> Self {
        let dir = tempfile::tempdir().unwrap();
        for name in PARTIES.iter().map(|p| p.0).chain(["patient", "validator"]) {
            write_key(&dir.path().join(format!("{name}.key")), &key(name)).unwrap();
        }
        let validator = key("validator");
        let cfg = NodeConfig {
            key_file: dir.path().join("validator.key"),
            address: Some(validator.address()),
            role: None,
            chain_file: dir.path().join("chain.jsonl"),
            listen: "127.0.0.1:0".parse().unwrap(),
            agent_key_file: Some(dir.path().join("agent.key")),
            peers: Vec::new(),
            chain: ChainConfig {
                chain_id: 5,
                genesis_authorities: vec![key("ministry").public()],
                validators: vec![validator.public()],
            },
            policy,
            replica: ReplicaConfig {
                max_delay_ms: 50,
                batch_window_ms: 5,
                ..ReplicaConfig::default()
            },
        };
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let node = rt.block_on(coldledger_node::start(cfg)).expect("node starts");
        TestNode {
            url: node.url(),
            dir,
            node: Some(node),
            rt,
        }
    }

    pub fn key_path(&self, name: &str) -> PathBuf {
        self.dir.path().join(format!("{name}.key"))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.path().join(file)
    }

    /// Runs the CLI against this node without a signing key.
    pub fn cli(&self, args: &[&str]) -> Output {
        let mut all = vec!["--node", self.url.as_str()];
        all.extend_from_slice(args);
        run_cli(&all)
    }

    /// Runs the CLI signing as `party`.
    pub fn cli_as(&self, party: &str, args: &[&str]) -> Output {
        let key = self.key_path(party);
        let key = key.to_str().unwrap();
        let mut all = vec!["--key", key];
        all.extend_from_slice(args);
        self.cli(&all)
    }

    /// Assigns every role and registers the patient, all through the CLI.
    pub fn onboard(&self) {
        for (name, role) in PARTIES.iter().filter(|p| p.0 != "ministry") {
            let party = self.key_path(name);
            self.cli_as(
                "ministry",
                &["role", "assign", "--role", role, "--party-key", party.to_str().unwrap()],
            )
            .ok();
        }
        let patient = self.key_path("patient");
        self.cli_as("clinic", &["patient", "register", "--party-key", patient.to_str().unwrap()])
            .ok();
    }

    pub fn get(&self, path: &str) -> serde_json::Value {
        coldledger_cli::Client::new(&self.url).get(path).expect("node query")
    }

    pub fn stop(mut self) {
        if let Some(node) = self.node.take() {
            self.rt.block_on(node.stop());
        }
    }
}

impl Drop for TestNode {
    fn drop(&mut self) {
        if let Some(node) = self.node.take() {
            self.rt.block_on(node.stop());
        }
    }
}

pub fn address(name: &str) -> String {
    key(name).address().to_string()
}

pub fn repo_root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}
