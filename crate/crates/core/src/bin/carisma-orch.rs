use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use tokio::sync::Mutex;
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

use carisma_core::orchestrator::{
    admin_router, load_config, ActionResult, ConfigError, DeploymentConfig, NodeSetup, Orchestrator, Timing,
};
use carisma_core::server::{bind, ServerHandle};

const STARTUP_FAILURE: u8 = 1;
const INVALID_CONFIG: u8 = 2;

/// Per-node orchestrator. Runs as a daemon, or with `--apply` hands a
/// replacement config to a running daemon.
#[derive(Debug, Parser)]
#[command(name = "carisma-orch")]
struct Args {
    /// Deployment file for this node.
    #[arg(long, required_unless_present = "apply")]
    config: Option<PathBuf>,
    /// Overrides the file's `control_plane`.
    #[arg(long)]
    control_plane: Option<String>,
    /// Replacement deployment file to reconcile a running daemon against.
    #[arg(long)]
    apply: Option<PathBuf>,
    /// Admin endpoint of the daemon.
    #[arg(long, default_value_t = SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 15100))]
    admin: SocketAddr,
    /// Node address when the file has no `[node]` section. No proxy is
    /// started in that case.
    #[arg(long)]
    address: Option<String>,
}

fn config_error(err: &ConfigError) -> ExitCode {
    eprintln!("carisma-orch: {err}");
    match err {
        ConfigError::Io { .. } => ExitCode::from(STARTUP_FAILURE),
        _ => ExitCode::from(INVALID_CONFIG),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    match &args.apply {
        Some(path) => apply(path, args.admin).await,
        None => daemon(&args).await,
    }
}

async fn apply(path: &PathBuf, admin: SocketAddr) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) => {
            eprintln!("carisma-orch: cannot read {}: {err}", path.display());
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    if let Err(err) = DeploymentConfig::parse(&text) {
        return config_error(&err);
    }
    let http = reqwest::Client::builder().no_proxy().build().expect("http client");
    let resp = match http.post(format!("http://{admin}/admin/apply")).body(text).send().await {
        Ok(resp) => resp,
        Err(err) => {
            eprintln!("carisma-orch: admin endpoint {admin} unreachable: {err}");
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    if !resp.status().is_success() {
        eprintln!("carisma-orch: apply rejected: {}", resp.text().await.unwrap_or_default());
        return ExitCode::from(INVALID_CONFIG);
    }
    let results: Vec<ActionResult> = match resp.json().await {
        Ok(results) => results,
        Err(err) => {
            eprintln!("carisma-orch: bad admin response: {err}");
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    let mut ok = true;
    for result in &results {
        println!("{}", serde_json::to_string(result).expect("serializable"));
        ok &= result.error.is_none();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(STARTUP_FAILURE)
    }
}

async fn daemon(args: &Args) -> ExitCode {
    let path = args.config.as_ref().expect("clap enforces --config");
    let mut config = match load_config(path) {
        Ok(config) => config,
        Err(err) => return config_error(&err),
    };
    if let Some(cp) = &args.control_plane {
        config.control_plane = cp.clone();
    }

    let setup = match (&config.node, &args.address) {
        (Some(node), _) => NodeSetup::hpc(&node.address, node.egress_port, node.ingress_port),
        (None, Some(address)) => {
            let mut setup = NodeSetup::hpc(address, 0, 0);
            setup.proxy = None;
            setup
        }
        (None, None) => {
            eprintln!("carisma-orch: config has no [node] section and no --address was given");
            return ExitCode::from(INVALID_CONFIG);
        }
    };

    let admin_listener = match bind(args.admin).await {
        Ok(listener) => listener,
        Err(err) => {
            eprintln!("carisma-orch: {err}");
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    let orchestrator = match Orchestrator::bootstrap(&config.control_plane, setup, Timing::default()).await {
        Ok(o) => o,
        Err(err) => {
            eprintln!("carisma-orch: {err}");
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    println!("node_id={}", orchestrator.node_id());

    let orchestrator = Arc::new(Mutex::new(orchestrator));
    let results = orchestrator.lock().await.reconcile(&config).await;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        error!(failed, "initial deployment incomplete");
    }

    let admin = match ServerHandle::spawn(admin_listener, admin_router(orchestrator.clone())) {
        Ok(admin) => admin,
        Err(err) => {
            eprintln!("carisma-orch: admin endpoint: {err}");
            shutdown(orchestrator).await;
            return ExitCode::from(STARTUP_FAILURE);
        }
    };
    info!(admin = %admin.local_addr(), "orchestrator running");

    let _ = tokio::signal::ctrl_c().await;
    admin.shutdown().await;
    shutdown(orchestrator).await;
    ExitCode::SUCCESS
}

async fn shutdown(orchestrator: Arc<Mutex<Orchestrator>>) {
    match Arc::try_unwrap(orchestrator) {
        Ok(orchestrator) => orchestrator.into_inner().shutdown().await,
        Err(_) => error!("orchestrator still in use at shutdown"),
    }
}
