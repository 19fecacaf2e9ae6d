use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use tracing::info;

use super::topology::{NodeSpec, PortAllocator, Topology};
use super::HarnessError;
use crate::client::ControlPlaneClient;
use crate::control_plane::{ControlPlane, ControlPlaneServer};
use crate::model::{ConfigSnapshot, Endpoint, NodeId, NodeRole};
use crate::orchestrator::{DeclaredRole, NodeSetup, Orchestrator, ServiceEntry, Timing};
use crate::proxy::ProxyHandle;

/// How long a proxy may take to apply a snapshot before the harness gives up.
pub const SYNC_TIMEOUT: Duration = Duration::from_secs(1);
const READY_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug)]
pub struct ClusterNode {
    pub spec: NodeSpec,
    pub orchestrator: Orchestrator,
}

impl ClusterNode {
    pub fn node_id(&self) -> &NodeId {
        self.orchestrator.node_id()
    }

    pub fn proxy(&self) -> Option<&ProxyHandle> {
        self.orchestrator.proxy()
    }

    pub fn snapshot(&self) -> Option<ConfigSnapshot> {
        self.proxy()?.store().load().map(|c| c.snapshot().as_ref().clone())
    }

    pub fn ingress_endpoint(&self) -> Endpoint {
        Endpoint::new(self.spec.address, self.spec.ingress_port)
    }
}

/// A control plane plus one orchestrator and proxy per topology node, all
/// inside the current process. Services run as child processes.
#[derive(Debug)]
pub struct Cluster {
    pub topology: Topology,
    control_plane: Option<ControlPlaneServer>,
    pub nodes: Vec<ClusterNode>,
    client: ControlPlaneClient,
    echo_bin: PathBuf,
    ports: PortAllocator,
    pub timing: Timing,
}

impl Cluster {
    /// Boots the control plane and every node (central first) and waits
    /// until each proxy has applied a snapshot.
    pub async fn start(topology: Topology, echo_bin: PathBuf) -> Result<Self, HarnessError> {
        Self::start_with(topology, echo_bin, Timing::default()).await
    }

    pub async fn start_with(topology: Topology, echo_bin: PathBuf, timing: Timing) -> Result<Self, HarnessError> {
        topology.validate()?;
        let plane = ControlPlane::new();
        let control_plane = plane.serve(topology.control_plane).await?;
        let cp_addr = control_plane.local_addr().to_string();
        let client = ControlPlaneClient::new(&cp_addr);

        let mut ports = PortAllocator::new();
        ports.reserve(topology.control_plane.port());
        let mut order: Vec<&NodeSpec> = topology.nodes.iter().collect();
        order.sort_by_key(|n| n.role != DeclaredRole::Central);

        let mut cluster = Cluster {
            topology: topology.clone(),
            control_plane: Some(control_plane),
            nodes: Vec::new(),
            client,
            echo_bin,
            ports,
            timing: timing.clone(),
        };
        for spec in order {
            cluster.ports.reserve(spec.egress_port);
            cluster.ports.reserve(spec.ingress_port);
            let setup = NodeSetup::hpc(&spec.address.to_string(), spec.egress_port, spec.ingress_port);
            let orchestrator = match Orchestrator::bootstrap(&cp_addr, setup, timing.clone()).await {
                Ok(o) => o,
                Err(err) => {
                    cluster.teardown().await;
                    return Err(err.into());
                }
            };
            cluster.nodes.push(ClusterNode { spec: spec.clone(), orchestrator });
        }

        if let Err(err) = cluster.check_ready().await {
            cluster.teardown().await;
            return Err(err);
        }
        info!(nodes = cluster.nodes.len(), cp = %cp_addr, "cluster ready");
        Ok(cluster)
    }

    async fn check_ready(&self) -> Result<(), HarnessError> {
        let state = self.plane().state();
        for node in &self.nodes {
            let proxy = node.proxy().expect("cluster nodes run a proxy");
            if !proxy.wait_for_version(1, READY_TIMEOUT).await {
                return Err(HarnessError::Readiness(node.spec.label.clone()));
            }
            let role = state.nodes[node.node_id()].role;
            let expected = match node.spec.role {
                DeclaredRole::Central => NodeRole::Central,
                DeclaredRole::Satellite => NodeRole::Satellite,
            };
            if role != expected {
                return Err(HarnessError::Topology(format!("{} was assigned role {role:?}", node.spec.label)));
            }
        }
        Ok(())
    }

    pub fn plane(&self) -> ControlPlane {
        self.control_plane.as_ref().expect("running").plane().clone()
    }

    pub fn client(&self) -> &ControlPlaneClient {
        &self.client
    }

    pub fn control_plane_addr(&self) -> SocketAddr {
        self.control_plane.as_ref().expect("running").local_addr()
    }

    pub fn index(&self, label: &str) -> Result<usize, HarnessError> {
        self.nodes
            .iter()
            .position(|n| n.spec.label == label)
            .ok_or_else(|| HarnessError::Topology(format!("no node labelled {label}")))
    }

    pub fn central(&self) -> usize {
        0
    }

    pub fn allocate_port(&mut self) -> Result<u16, HarnessError> {
        self.ports.claim()
    }

    pub fn echo_entry(&self, name: &str, port: u16) -> ServiceEntry {
        ServiceEntry {
            name: name.to_string(),
            port,
            command: self.echo_bin.to_string_lossy().into_owned(),
            args: vec!["--name".into(), name.into(), "--port".into(), port.to_string()],
        }
    }

    /// Deploys an echo service named `name` on node `idx`; returns its port.
    pub async fn deploy_echo(&mut self, idx: usize, name: &str) -> Result<u16, HarnessError> {
        let port = self.allocate_port()?;
        let entry = self.echo_entry(name, port);
        self.nodes[idx].orchestrator.deploy(entry).await?;
        Ok(port)
    }

    pub async fn undeploy(&mut self, idx: usize, name: &str) -> Result<(), HarnessError> {
        self.nodes[idx].orchestrator.undeploy(name).await?;
        Ok(())
    }

    /// Waits until every running proxy has applied the registry's current
    /// version; returns that version.
    pub async fn sync(&self) -> Result<u64, HarnessError> {
        let version = self.plane().version();
        for node in &self.nodes {
            if let Some(proxy) = node.proxy() {
                if !proxy.wait_for_version(version, SYNC_TIMEOUT).await {
                    return Err(HarnessError::Readiness(format!(
                        "{} stuck at version {} (want {version})",
                        node.spec.label,
                        proxy.version()
                    )));
                }
            }
        }
        Ok(version)
    }

    pub fn egress_url(&self, idx: usize, service: &str, tail: &str) -> String {
        format!("http://127.0.0.1:{}/s/{service}/{tail}", self.nodes[idx].spec.egress_port)
    }

    /// Stops the proxy of node `idx`, as if the node's data plane died.
    pub async fn kill_proxy(&mut self, idx: usize) {
        if let Some(proxy) = self.nodes[idx].orchestrator.take_proxy() {
            proxy.shutdown().await;
        }
    }

    /// Kills every service process and proxy, then the control plane.
    pub async fn teardown(mut self) {
        for node in self.nodes.drain(..) {
            node.orchestrator.kill().await;
        }
        if let Some(cp) = self.control_plane.take() {
            cp.shutdown().await;
        }
    }
}
