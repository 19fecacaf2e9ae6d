use std::net::SocketAddr;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use carisma_core::control_plane::ControlPlane;

/// Control plane: node registry, service registry and snapshot stream.
#[derive(Debug, Parser)]
#[command(name = "carisma-cp")]
struct Args {
    #[arg(long, env = "CARISMA_CP_LISTEN", default_value = "0.0.0.0:15000")]
    listen: SocketAddr,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let server = match ControlPlane::new().serve(args.listen).await {
        Ok(server) => server,
        Err(err) => {
            eprintln!("carisma-cp: {err}");
            return std::process::ExitCode::FAILURE;
        }
    };
    let _ = tokio::signal::ctrl_c().await;
    server.shutdown().await;
    std::process::ExitCode::SUCCESS
}
