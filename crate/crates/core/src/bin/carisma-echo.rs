use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use clap::Parser;

/// Value-serving test service used by the harness.
#[derive(Debug, Parser)]
#[command(name = "carisma-echo")]
struct Args {
    #[arg(long)]
    name: String,
    #[arg(long)]
    port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    bind: IpAddr,
    /// Instance tag; random when omitted.
    #[arg(long)]
    instance: Option<String>,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    let args = Args::parse();
    let server = match carisma_core::echo::serve(&args.name, SocketAddr::new(args.bind, args.port), args.instance).await {
        Ok(server) => server,
        Err(err) => {
            eprintln!("carisma-echo: {err}");
            return std::process::ExitCode::FAILURE;
        }
    };
    let _ = tokio::signal::ctrl_c().await;
    server.shutdown().await;
    std::process::ExitCode::SUCCESS
}
