//! The per-node data plane.
//!
//! Each node runs one proxy with two listeners. The egress listener takes
//! requests from local services and forwards them either to a service on the
//! same machine or to the ingress listener of the node hosting it. The
//! ingress listener only ever routes to services on its own node.
//!
//! Both listeners bind immediately and answer 503 until the first snapshot
//! from the control plane has been applied.

mod capture;
mod forward;
mod request;
mod table;

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use futures::StreamExt;
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{info, warn};

pub use capture::{CapturedRequest, Listener, UpstreamLog};
pub use forward::CONFIG_PATH;
pub use request::{ServicePath, SERVICE_PREFIX};
pub use table::{ActiveConfig, ApplyOutcome, ConfigStore, RouteError, SnapshotError};

use crate::client::{ClientError, ControlPlaneClient};
use crate::model::NodeId;
use crate::server::{bind, BindError, ServerHandle};
use forward::Shared;

pub const DEFAULT_EGRESS_PORT: u16 = 15001;
pub const DEFAULT_INGRESS_PORT: u16 = 15006;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("control plane rejected subscription: {0}")]
    Rejected(ClientError),
}

#[derive(Debug, Clone)]
pub struct ProxyOptions {
    pub control_plane: String,
    pub node_id: NodeId,
    pub egress_addr: SocketAddr,
    pub ingress_addr: SocketAddr,
    pub upstream_timeout: Duration,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl ProxyOptions {
    /// Egress on loopback, ingress on all interfaces.
    pub fn new(control_plane: impl Into<String>, node_id: NodeId, egress_port: u16, ingress_port: u16) -> Self {
        ProxyOptions {
            control_plane: control_plane.into(),
            node_id,
            egress_addr: SocketAddr::from((Ipv4Addr::LOCALHOST, egress_port)),
            ingress_addr: SocketAddr::from((Ipv4Addr::UNSPECIFIED, ingress_port)),
            upstream_timeout: Duration::from_secs(10),
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(2),
        }
    }
}

/// A running proxy. Dropping it stops both listeners.
#[derive(Debug)]
pub struct ProxyHandle {
    node_id: NodeId,
    shared: Arc<Shared>,
    egress: Option<ServerHandle>,
    ingress: Option<ServerHandle>,
    subscriber: JoinHandle<Result<(), ProxyError>>,
}

impl ProxyHandle {
    pub async fn start(opts: ProxyOptions) -> Result<Self, ProxyError> {
        let http = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(2))
            .timeout(opts.upstream_timeout)
            .build()
            .expect("http client");
        let shared = Arc::new(Shared {
            store: ConfigStore::new(Some(opts.node_id.clone())),
            log: UpstreamLog::default(),
            http,
        });

        let egress_listener = bind(opts.egress_addr).await?;
        let ingress_listener = bind(opts.ingress_addr).await?;
        let egress_router = Router::new().fallback(forward::egress).with_state(shared.clone());
        let ingress_router = Router::new().fallback(forward::ingress).with_state(shared.clone());
        let spawn_err = |addr: SocketAddr| move |source| BindError { addr, port: addr.port(), source };
        let egress = ServerHandle::spawn(egress_listener, egress_router).map_err(spawn_err(opts.egress_addr))?;
        let ingress = ServerHandle::spawn(ingress_listener, ingress_router).map_err(spawn_err(opts.ingress_addr))?;
        info!(node = %opts.node_id, egress = %egress.local_addr(), ingress = %ingress.local_addr(), "proxy listening");

        let subscriber = tokio::spawn(subscribe_loop(shared.clone(), opts.clone()));
        Ok(ProxyHandle { node_id: opts.node_id, shared, egress: Some(egress), ingress: Some(ingress), subscriber })
    }

    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn egress_addr(&self) -> SocketAddr {
        self.egress.as_ref().map(|s| s.local_addr()).expect("running")
    }

    pub fn ingress_addr(&self) -> SocketAddr {
        self.ingress.as_ref().map(|s| s.local_addr()).expect("running")
    }

    pub fn store(&self) -> &ConfigStore {
        &self.shared.store
    }

    pub fn version(&self) -> u64 {
        self.shared.store.version()
    }

    pub fn upstream_log(&self) -> &UpstreamLog {
        &self.shared.log
    }

    /// Waits until a snapshot with at least `version` has been applied.
    pub async fn wait_for_version(&self, version: u64, timeout: Duration) -> bool {
        let mut rx: watch::Receiver<u64> = self.shared.store.watch_version();
        tokio::time::timeout(timeout, rx.wait_for(|v| *v >= version))
            .await
            .is_ok_and(|r| r.is_ok())
    }

    pub fn subscriber_finished(&self) -> bool {
        self.subscriber.is_finished()
    }

    /// Resolves when the subscription loop gives up (only on rejection).
    pub async fn join(&mut self) -> Result<(), ProxyError> {
        match (&mut self.subscriber).await {
            Ok(result) => result,
            Err(_) => Ok(()),
        }
    }

    pub async fn shutdown(mut self) {
        self.subscriber.abort();
        if let Some(egress) = self.egress.take() {
            egress.shutdown_within(Duration::from_secs(1)).await;
        }
        if let Some(ingress) = self.ingress.take() {
            ingress.shutdown_within(Duration::from_secs(1)).await;
        }
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.subscriber.abort();
    }
}

/// Keeps a snapshot stream open, re-subscribing with exponential backoff
/// whenever it drops. Only an explicit rejection ends the loop.
async fn subscribe_loop(shared: Arc<Shared>, opts: ProxyOptions) -> Result<(), ProxyError> {
    let client = ControlPlaneClient::new(&opts.control_plane);
    let mut backoff = opts.initial_backoff;
    loop {
        match client.open_stream(&opts.node_id).await {
            Ok(resp) => {
                backoff = opts.initial_backoff;
                read_stream(&shared.store, resp).await;
                warn!(node = %opts.node_id, "snapshot stream ended, reconnecting");
            }
            Err(err) if !err.is_transient() => {
                warn!(node = %opts.node_id, %err, "subscription rejected");
                return Err(ProxyError::Rejected(err));
            }
            Err(err) => warn!(node = %opts.node_id, %err, "control plane unavailable"),
        }
        tokio::time::sleep(backoff).await;
        backoff = (backoff * 2).min(opts.max_backoff);
    }
}

async fn read_stream(store: &ConfigStore, resp: reqwest::Response) {
    let mut chunks = resp.bytes_stream();
    let mut buf: Vec<u8> = Vec::new();
    while let Some(chunk) = chunks.next().await {
        let Ok(chunk) = chunk else { return };
        buf.extend_from_slice(&chunk);
        while let Some(pos) = buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match store.apply_line(line) {
                Ok(ApplyOutcome::Applied) => info!(version = store.version(), "snapshot applied"),
                Ok(ApplyOutcome::Ignored) => {}
                Err(err) => warn!(%err, "snapshot rejected"),
            }
        }
    }
}
