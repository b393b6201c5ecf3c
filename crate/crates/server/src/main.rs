use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use arena_server::{ApiConfig, Server};
use clap::Parser;
use tracing_subscriber::EnvFilter;

/// Pairwise evaluation arena API server.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML or JSON config file.
    #[arg(long, env = "ARENA_CONFIG")]
    config: Option<PathBuf>,
    /// Listen address; overrides the config file and ARENA_LISTEN.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Event log path; overrides the config file and ARENA_LOG_PATH.
    #[arg(long)]
    log_path: Option<PathBuf>,
}

fn load(cli: &Cli) -> Result<ApiConfig, arena_server::ConfigError> {
    let mut config = match &cli.config {
        Some(path) => ApiConfig::from_file(path)?,
        None => ApiConfig::default(),
    };
    config.apply_env(std::env::vars())?;
    if let Some(addr) = cli.listen {
        config.listen = addr;
    }
    if let Some(path) = &cli.log_path {
        config.log_path = Some(path.clone());
    }
    config.validate()?;
    Ok(config)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let config = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if config.log_path.is_none() {
        tracing::warn!("no log_path configured; events are kept in memory only");
    }
    let server = match Server::bind(config).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    tracing::info!(addr = %server.local_addr(), "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    match server.run(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
