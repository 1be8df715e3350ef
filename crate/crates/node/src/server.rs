//! Wires config, engine, HTTP API and the round timer together.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::api::{router, AppState};
use crate::config::{ConfigError, NodeConfig};
use crate::engine::{Engine, EngineError};
use crate::net::{now_ms, Network};

/// Upper bound on how long the timer loop sleeps between checks.
const MAX_IDLE: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot listen on {addr}: {source}")]
    PortUnavailable {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

impl NodeError {
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::Config(_) => "INVALID_CONFIG",
            NodeError::Engine(e) => e.code(),
            NodeError::PortUnavailable { .. } => "PORT_UNAVAILABLE",
        }
    }
}

/// A started node. Dropping it does not stop the tasks; call [`RunningNode::stop`].
pub struct RunningNode {
    pub addr: SocketAddr,
    pub engine: Arc<RwLock<Engine>>,
    shutdown: Arc<watch::Sender<bool>>,
    server: JoinHandle<()>,
    timer: JoinHandle<()>,
}

impl RunningNode {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops serving and waits for both tasks to finish.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        let _ = self.server.await;
        let _ = self.timer.await;
    }

    /// Resolves once shutdown begins, including after a fatal storage error.
    pub async fn halted(&self) {
        let _ = self.shutdown.subscribe().wait_for(|s| *s).await;
    }
}

/// Replays the chain file, binds the listener and starts serving.
pub async fn start(cfg: NodeConfig) -> Result<RunningNode, NodeError> {
    cfg.validate()?;
    let key = cfg.keypair()?;
    let agent = cfg.agent_keypair()?;
    let me = key.address();
    let engine = Engine::open(
        key,
        cfg.chain.clone(),
        cfg.replica,
        cfg.policy,
        agent,
        &cfg.chain_file,
        now_ms(),
    )?;
    if let Some(role) = cfg.role {
        let actual = coldledger_core::access_control::owner_type_of(engine.state().parties(), &me);
        if actual != role {
            tracing::warn!(%me, configured = %role, on_chain = %actual, "identity role differs from config");
        }
    }
    tracing::info!(%me, height = engine.chain().height(), "chain replayed");

    let listener = TcpListener::bind(cfg.listen)
        .await
        .map_err(|source| NodeError::PortUnavailable {
            addr: cfg.listen,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| NodeError::PortUnavailable {
        addr: cfg.listen,
        source,
    })?;

    let peers = cfg.peers.iter().map(|p| (p.address, p.url.clone())).collect();
    let net = Network::new(me, peers);
    let engine = Arc::new(RwLock::new(engine));
    let (shutdown, mut stop_server) = watch::channel(false);
    let shutdown = Arc::new(shutdown);
    let mut stop_timer = shutdown.subscribe();
    let halt = shutdown.clone();

    let app = router(AppState {
        engine: engine.clone(),
        net: net.clone(),
    });
    let server = tokio::spawn(async move {
        let stopped = async move {
            let _ = stop_server.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stopped).await {
            tracing::error!(error = %e, "http server failed");
        }
    });

    let timer_engine = engine.clone();
    let timer = tokio::spawn(async move {
        loop {
            let deadline = timer_engine.read().expect("engine lock").next_deadline();
            let wait = Duration::from_millis(deadline.saturating_sub(now_ms())).min(MAX_IDLE);
            tokio::select! {
                _ = tokio::time::sleep(wait) => {}
                _ = net.woken() => continue,
                _ = stop_timer.wait_for(|s| *s) => break,
            }
            let result = timer_engine.write().expect("engine lock").tick(now_ms());
            match result {
                Ok(out) => net.dispatch(out),
                Err(e) => {
                    tracing::error!(error = %e, "stopping after engine failure");
                    let _ = halt.send(true);
                    break;
                }
            }
        }
    });

    Ok(RunningNode {
        addr,
        engine,
        shutdown,
        server,
        timer,
    })
}
