use std::path::PathBuf;
use std::process::ExitCode;

use beamline_core::config::EXAMPLE_CONFIG;
use beamline_core::device::init_once;
use beamline_core::protocol::server::BackgroundServer;
use beamline_core::protocol::DEFAULT_PORT;
use beamline_core::BeamlineConfig;
use beamline_gateway::{GatewayOptions, RunningGateway};
use clap::Parser;
use tokio::net::TcpListener;

/// HTTP/WebSocket gateway in front of a beamline device server.
#[derive(Parser)]
#[command(name = "beamline-gateway", version)]
struct Args {
    /// Device server host.
    #[arg(long, env = "BEAMLINE_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Device server port.
    #[arg(long, env = "BEAMLINE_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// HTTP port (default: http_port from the config, else 8080). 0 picks a free port.
    #[arg(long)]
    http_port: Option<u16>,
    /// HTTP bind address.
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Directory with console assets to serve at /.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Run a device server inside this process and bridge to it over loopback.
    #[arg(long)]
    embedded: bool,
    /// Beamline config (TOML) for --embedded and the default HTTP port.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => BeamlineConfig::load(p),
        None => BeamlineConfig::from_toml_str(EXAMPLE_CONFIG),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let (host, port, _embedded) = if args.embedded {
        let device = match init_once(&cfg) {
            Ok(d) => d.clone(),
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(2);
            }
        };
        match BackgroundServer::start("127.0.0.1:0", device) {
            Ok(s) => ("127.0.0.1".to_string(), s.port(), Some(s)),
            Err(e) => {
                eprintln!("cannot start embedded device server: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        (args.host.clone(), args.port, None)
    };
    let addr = format!(
        "{}:{}",
        args.bind,
        args.http_port.unwrap_or(cfg.server.http_port)
    );
    let listener = match TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot bind {addr}: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = GatewayOptions {
        upstream_host: host,
        upstream_port: port,
        static_dir: args.static_dir,
    };
    let gw = match RunningGateway::start(listener, opts) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    log::info!("bridging to device server at {}", gw.upstream.addr());
    println!("listening on {}", gw.addr);
    let _ = std::io::Write::flush(&mut std::io::stdout());
    let stop = gw.shutdown_handle();
    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        let _ = stop.send(true);
    });
    gw.join().await;
    ExitCode::SUCCESS
}
