use std::path::PathBuf;
use std::process::ExitCode;

use beamline_core::config::EXAMPLE_CONFIG;
use beamline_core::device::init_once;
use beamline_core::protocol::server::serve;
use beamline_core::BeamlineConfig;
use clap::Parser;
use tokio::net::TcpListener;
use tokio::sync::watch;

/// Beamline device server: owns the simulated beamline and serves the control protocol.
#[derive(Parser)]
#[command(name = "beamline-server", version)]
struct Args {
    /// Beamline config file (TOML). Uses the bundled example when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the TCP port from the config.
    #[arg(long)]
    port: Option<u16>,
    /// Override the bind address from the config.
    #[arg(long)]
    bind: Option<String>,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => BeamlineConfig::load(p),
        None => BeamlineConfig::from_toml_str(EXAMPLE_CONFIG),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(p) = args.port {
        cfg.server.tcp_port = p;
    }
    if let Some(b) = args.bind {
        cfg.server.bind = b;
    }
    let device = match init_once(&cfg) {
        Ok(d) => d.clone(),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let addr = format!("{}:{}", cfg.server.bind, cfg.server.tcp_port);
    let listener = match TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot bind {addr}: {e}");
            return ExitCode::from(2);
        }
    };
    let local = listener.local_addr().map(|a| a.to_string()).unwrap_or(addr);
    log::info!("'{}' ready", cfg.server.name);
    // Scripts read the bound address from here (useful with --port 0).
    println!("listening on {local}");
    let _ = std::io::Write::flush(&mut std::io::stdout());
    let (tx, rx) = watch::channel(false);
    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        let _ = tx.send(true);
    });
    serve(listener, device, Default::default(), rx).await;
    ExitCode::SUCCESS
}
