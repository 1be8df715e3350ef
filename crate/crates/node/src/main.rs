use std::path::PathBuf;
use std::process::ExitCode;

use coldledger_node::config::CONFIG_ENV;
use coldledger_node::NodeConfig;

fn config_path() -> Option<PathBuf> {
    let mut args = std::env::args_os().skip(1);
    match args.next() {
        Some(flag) if flag == "--config" => args.next().map(PathBuf::from),
        Some(path) => Some(PathBuf::from(path)),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let Some(path) = config_path() else {
        eprintln!("usage: coldledger-node [--config] FILE   (or set {CONFIG_ENV})");
        return ExitCode::from(2);
    };
    let cfg = match NodeConfig::load(&path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("INVALID_CONFIG: {e}");
            return ExitCode::from(2);
        }
    };
    let node = match coldledger_node::start(cfg).await {
        Ok(node) => node,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            return ExitCode::from(1);
        }
    };
    tracing::info!(url = %node.url(), "listening");
    let code = tokio::select! {
        _ = tokio::signal::ctrl_c() => ExitCode::SUCCESS,
        _ = node.halted() => ExitCode::from(1),
    };
    node.stop().await;
    code
}
