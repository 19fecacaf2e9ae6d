//! A minimal per-node orchestrator.
//!
//! It registers its node with the control plane, optionally runs the node's
//! proxy, and starts and stops service processes. A service is registered
//! only after it accepts TCP connections, and deregistered before its
//! process is stopped, so no snapshot ever routes to a process that is not
//! listening.

mod config;
mod reconcile;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::process::{Child, Command};
use tokio::sync::Mutex;
use tracing::{info, warn};

pub use config::{load_config, ConfigError, DeclaredRole, DeploymentConfig, NodeSection, ServiceEntry};
pub use reconcile::{plan, Action};

use crate::client::{ClientError, ControlPlaneClient};
use crate::model::{NodeId, ServiceInstance};
use crate::proxy::{ProxyError, ProxyHandle, ProxyOptions};
use crate::wire::{ErrorBody, NodeRegistration, ServiceRegistration};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("node registration failed: {0}")]
    NodeRegistration(ClientError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("service {0} is already managed")]
    AlreadyManaged(String),
    #[error("cannot start {name}: {source}")]
    Spawn {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{name} exited before becoming healthy ({status})")]
    ExitedEarly { name: String, status: String },
    #[error("{name} did not accept connections on port {port}")]
    NeverHealthy { name: String, port: u16 },
    #[error("registering {name} failed: {source}")]
    Registration {
        name: String,
        #[source]
        source: ClientError,
    },
    #[error("deregistering {name} failed: {source}")]
    Deregistration {
        name: String,
        #[source]
        source: ClientError,
    },
    #[error("{0} is not registered")]
    NotRegistered(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceState {
    Starting,
    Healthy,
    Registered,
    Draining,
    Stopped,
}

#[derive(Debug)]
pub struct ManagedService {
    pub spec: ServiceEntry,
    state: ServiceState,
    process: Option<Child>,
}

impl ManagedService {
    fn new(spec: ServiceEntry, process: Child) -> Self {
        ManagedService { spec, state: ServiceState::Starting, process: Some(process) }
    }

    pub fn state(&self) -> ServiceState {
        self.state
    }

    pub fn pid(&self) -> Option<u32> {
        self.process.as_ref().and_then(Child::id)
    }

    /// Lifecycle only moves forward, one step at a time.
    fn advance(&mut self, next: ServiceState) {
        debug_assert!(next > self.state, "{:?} -> {:?}", self.state, next);
        self.state = next;
    }

    async fn stop(&mut self) {
        if let Some(mut child) = self.process.take() {
            let _ = child.start_kill();
            let _ = child.wait().await;
        }
        self.state = ServiceState::Stopped;
    }
}

#[derive(Debug, Clone)]
pub struct Timing {
    pub probe_attempts: u32,
    pub probe_interval: Duration,
    pub drain: Duration,
    pub registration_attempts: u32,
    pub registration_backoff: Duration,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            probe_attempts: 20,
            probe_interval: Duration::from_millis(250),
            drain: Duration::from_millis(500),
            registration_attempts: 5,
            registration_backoff: Duration::from_millis(200),
        }
    }
}

/// Node identity and proxy placement used at bootstrap.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub registration: NodeRegistration,
    /// `(egress, ingress)` listen addresses; `None` runs no proxy.
    pub proxy: Option<(SocketAddr, SocketAddr)>,
}

impl NodeSetup {
    pub fn hpc(address: &str, egress_port: u16, ingress_port: u16) -> Self {
        NodeSetup {
            registration: NodeRegistration {
                ip: address.to_string(),
                kind: crate::model::NodeKind::Hpc,
                ingress_port: u64::from(ingress_port),
            },
            proxy: Some((
                SocketAddr::from((Ipv4Addr::LOCALHOST, egress_port)),
                SocketAddr::from((Ipv4Addr::UNSPECIFIED, ingress_port)),
            )),
        }
    }
}

#[derive(Debug)]
pub struct Orchestrator {
    client: ControlPlaneClient,
    node_id: NodeId,
    timing: Timing,
    services: BTreeMap<String, ManagedService>,
    proxy: Option<ProxyHandle>,
}

async fn with_retries<T, F, Fut>(attempts: u32, backoff: Duration, mut op: F) -> Result<T, ClientError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, ClientError>>,
{
    let mut delay = backoff;
    let mut attempt = 1;
    loop {
        match op().await {
            Err(err) if err.is_transient() && attempt < attempts => {
                warn!(%err, attempt, "control plane request failed, retrying");
                tokio::time::sleep(delay).await;
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

impl Orchestrator {
    /// Wraps an already registered node without a proxy.
    pub fn attach(client: ControlPlaneClient, node_id: NodeId, timing: Timing) -> Self {
        Orchestrator { client, node_id, timing, services: BTreeMap::new(), proxy: None }
    }

    /// Registers the node, then starts its proxy if one is configured.
    pub async fn bootstrap(control_plane: &str, setup: NodeSetup, timing: Timing) -> Result<Self, OrchestratorError> {
        let client = ControlPlaneClient::new(control_plane);
        let node_id = with_retries(timing.registration_attempts, timing.registration_backoff, || {
            client.register_node(&setup.registration)
        })
        .await
        .map_err(OrchestratorError::NodeRegistration)?;
        info!(node = %node_id, address = %setup.registration.ip, "node registered");

        let proxy = match setup.proxy {
            Some((egress_addr, ingress_addr)) => {
                let mut opts = ProxyOptions::new(control_plane, node_id.clone(), 0, 0);
                opts.egress_addr = egress_addr;
                opts.ingress_addr = ingress_addr;
                Some(ProxyHandle::start(opts).await?)
            }
            None => None,
        };
        Ok(Orchestrator { client, node_id, timing, services: BTreeMap::new(), proxy })
    }

    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn proxy(&self) -> Option<&ProxyHandle> {
        self.proxy.as_ref()
    }

    pub fn take_proxy(&mut self) -> Option<ProxyHandle> {
        self.proxy.take()
    }

    pub fn service(&self, name: &str) -> Option<&ManagedService> {
        self.services.get(name)
    }

    pub fn managed(&self) -> impl Iterator<Item = &ManagedService> {
        self.services.values()
    }

    /// Registry triples this orchestrator believes are registered.
    pub fn registered_instances(&self) -> Vec<ServiceInstance> {
        self.services
            .values()
            .filter(|s| s.state == ServiceState::Registered)
            .map(|s| ServiceInstance { name: s.spec.name.clone(), node: self.node_id.clone(), port: s.spec.port })
            .collect()
    }

    async fn await_healthy(&self, svc: &mut ManagedService) -> Result<(), OrchestratorError> {
        let name = &svc.spec.name;
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, svc.spec.port));
        for _ in 0..self.timing.probe_attempts {
            if let Some(child) = svc.process.as_mut() {
                if let Ok(Some(status)) = child.try_wait() {
                    return Err(OrchestratorError::ExitedEarly { name: name.clone(), status: status.to_string() });
                }
            }
            if TcpStream::connect(addr).await.is_ok() {
                return Ok(());
            }
            tokio::time::sleep(self.timing.probe_interval).await;
        }
        Err(OrchestratorError::NeverHealthy { name: name.clone(), port: svc.spec.port })
    }

    /// Starts the process, waits for it to listen, then registers it.
    pub async fn deploy(&mut self, spec: ServiceEntry) -> Result<(), OrchestratorError> {
        if self.services.contains_key(&spec.name) {
            return Err(OrchestratorError::AlreadyManaged(spec.name));
        }
        let child = Command::new(&spec.command)
            .args(&spec.args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .kill_on_drop(true)
            .spawn()
            .map_err(|source| OrchestratorError::Spawn { name: spec.name.clone(), source })?;
        let mut svc = ManagedService::new(spec, child);

        if let Err(err) = self.await_healthy(&mut svc).await {
            svc.stop().await;
            return Err(err);
        }
        svc.advance(ServiceState::Healthy);

        let reg = ServiceRegistration { name: svc.spec.name.clone(), port: u64::from(svc.spec.port) };
        let registered = with_retries(self.timing.registration_attempts, self.timing.registration_backoff, || {
            self.client.register_service(&self.node_id, &reg)
        })
        .await;
        if let Err(source) = registered {
            svc.stop().await;
            return Err(OrchestratorError::Registration { name: reg.name, source });
        }
        svc.advance(ServiceState::Registered);
        info!(service = %svc.spec.name, port = svc.spec.port, node = %self.node_id, "deployed");
        self.services.insert(svc.spec.name.clone(), svc);
        Ok(())
    }

    /// Deregisters, waits out the drain interval, then stops the process.
    /// If deregistration fails the process keeps running.
    pub async fn undeploy(&mut self, name: &str) -> Result<(), OrchestratorError> {
        let Some(svc) = self.services.get(name).filter(|s| s.state == ServiceState::Registered) else {
            return Err(OrchestratorError::NotRegistered(name.to_string()));
        };
        let reg = ServiceRegistration { name: svc.spec.name.clone(), port: u64::from(svc.spec.port) };
        with_retries(self.timing.registration_attempts, self.timing.registration_backoff, || {
            self.client.deregister_service(&self.node_id, &reg)
        })
        .await
        .map_err(|source| OrchestratorError::Deregistration { name: name.to_string(), source })?;

        let mut svc = self.services.remove(name).expect("checked above");
        svc.advance(ServiceState::Draining);
        tokio::time::sleep(self.timing.drain).await;
        svc.stop().await;
        info!(service = %name, node = %self.node_id, "undeployed");
        Ok(())
    }

    /// Brings the running set in line with `desired`, one action at a time.
    pub async fn reconcile(&mut self, desired: &DeploymentConfig) -> Vec<ActionResult> {
        let actions = plan(self.services.values().map(|s| &s.spec), desired);
        let mut results = Vec::with_capacity(actions.len());
        for action in actions {
            let outcome = match &action {
                Action::Deploy(entry) => self.deploy(entry.clone()).await,
                Action::Undeploy { name } => self.undeploy(name).await,
            };
            if let Err(err) = &outcome {
                warn!(?action, %err, "reconcile action failed");
            }
            results.push(ActionResult { action, error: outcome.err().map(|e| e.to_string()) });
        }
        results
    }

    /// Undeploys everything and stops the proxy.
    pub async fn shutdown(mut self) {
        let names: Vec<String> = self.services.keys().cloned().collect();
        for name in names {
            if let Err(err) = self.undeploy(&name).await {
                warn!(%err, "undeploy during shutdown failed");
            }
        }
        for svc in self.services.values_mut() {
            svc.stop().await;
        }
        if let Some(proxy) = self.proxy.take() {
            proxy.shutdown().await;
        }
    }

    /// Stops all processes and the proxy without touching the registry.
    pub async fn kill(mut self) {
        for svc in self.services.values_mut() {
            svc.stop().await;
        }
        if let Some(proxy) = self.proxy.take() {
            proxy.shutdown().await;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    #[serde(flatten)]
    pub action: Action,
    pub error: Option<String>,
}

/// Local admin API: `POST /admin/apply` with a replacement deployment file
/// as the body reconciles the running node against it.
pub fn admin_router(orchestrator: Arc<Mutex<Orchestrator>>) -> Router {
    Router::new().route("/admin/apply", post(apply)).with_state(orchestrator)
}

async fn apply(State(orch): State<Arc<Mutex<Orchestrator>>>, body: Bytes) -> Response {
    let text = String::from_utf8_lossy(&body);
    let desired = match DeploymentConfig::parse(&text) {
        Ok(cfg) => cfg,
        Err(err) => return (StatusCode::BAD_REQUEST, Json(ErrorBody::new(err.to_string()))).into_response(),
    };
    let results = orch.lock().await.reconcile(&desired).await;
    Json(results).into_response()
}
