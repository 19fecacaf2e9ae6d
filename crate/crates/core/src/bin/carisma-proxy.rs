use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use clap::Parser;
use tracing_subscriber::EnvFilter;

use carisma_core::model::NodeId;
use carisma_core::proxy::{ProxyHandle, ProxyOptions, DEFAULT_EGRESS_PORT, DEFAULT_INGRESS_PORT};

/// Per-node proxy with an egress and an ingress listener.
#[derive(Debug, Parser)]
#[command(name = "carisma-proxy")]
struct Args {
    #[arg(long, env = "CARISMA_CP")]
    control_plane: String,
    #[arg(long, env = "CARISMA_NODE_ID")]
    node_id: String,
    #[arg(long, default_value_t = DEFAULT_EGRESS_PORT)]
    egress_port: u16,
    #[arg(long, default_value_t = DEFAULT_INGRESS_PORT)]
    ingress_port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    egress_bind: IpAddr,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED))]
    ingress_bind: IpAddr,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let mut opts = ProxyOptions::new(args.control_plane, NodeId::new(args.node_id), args.egress_port, args.ingress_port);
    opts.egress_addr = SocketAddr::new(args.egress_bind, args.egress_port);
    opts.ingress_addr = SocketAddr::new(args.ingress_bind, args.ingress_port);

    let mut proxy = match ProxyHandle::start(opts).await {
        Ok(proxy) => proxy,
        Err(err) => {
            eprintln!("carisma-proxy: {err}");
            return std::process::ExitCode::FAILURE;
        }
    };
    tokio::select! {
        result = proxy.join() => {
            if let Err(err) = result {
                eprintln!("carisma-proxy: {err}");
            }
            proxy.shutdown().await;
            std::process::ExitCode::FAILURE
        }
        _ = tokio::signal::ctrl_c() => {
            proxy.shutdown().await;
            std::process::ExitCode::SUCCESS
        }
    }
}
