use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::LOOPBACK;
use crate::orchestrator::DeclaredRole;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub label: String,
    pub address: IpAddr,
    pub egress_port: u16,
    pub ingress_port: u16,
    pub role: DeclaredRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub address: IpAddr,
    pub port: u16,
}

/// Nodes simulated on one host. Each node gets its own loopback address
/// (127.0.1.x) so node addresses stay distinct from the 127.0.0.1 endpoints
/// of local views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub control_plane: SocketAddr,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub cloud: Option<CloudSpec>,
}

fn node_address(index: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(127, 0, 1, index as u8 + 1))
}

fn cloud_address() -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(127, 0, 2, 1))
}

fn label(index: usize) -> String {
    match index {
        0 => "central".to_string(),
        1 => "satellite".to_string(),
        n => format!("satellite-{n}"),
    }
}

impl Topology {
    /// Fixed-port layout: control plane on 15000, node `i` on egress
    /// `15001 + 10i` and ingress `15006 + 10i`, cloud gateway on 15080.
    pub fn standard(nodes: usize) -> Self {
        let nodes = (0..nodes)
            .map(|i| NodeSpec {
                label: label(i),
                address: node_address(i),
                egress_port: 15001 + 10 * i as u16,
                ingress_port: 15006 + 10 * i as u16,
                role: if i == 0 { DeclaredRole::Central } else { DeclaredRole::Satellite },
            })
            .collect();
        Topology {
            control_plane: SocketAddr::from((Ipv4Addr::LOCALHOST, 15000)),
            nodes,
            cloud: Some(CloudSpec { address: cloud_address(), port: 15080 }),
        }
    }

    /// Same shape as [`Topology::standard`] but on OS-assigned free ports,
    /// so several clusters can run side by side.
    pub fn ephemeral(nodes: usize, ports: &mut PortAllocator) -> Result<Self, HarnessError> {
        let mut topo = Topology::standard(nodes);
        topo.control_plane.set_port(ports.claim()?);
        for node in &mut topo.nodes {
            node.egress_port = ports.claim()?;
            node.ingress_port = ports.claim()?;
        }
        if let Some(cloud) = &mut topo.cloud {
            cloud.port = ports.claim()?;
        }
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Topology(format!("{}: {e}", path.display())))?;
        let topo: Topology = toml::from_str(&text).map_err(|e| HarnessError::Topology(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn central(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.role == DeclaredRole::Central)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.nodes.is_empty() {
            return Err(HarnessError::Topology("no nodes".into()));
        }
        let centrals = self.nodes.iter().filter(|n| n.role == DeclaredRole::Central).count();
        if centrals != 1 {
            return Err(HarnessError::Topology(format!("expected exactly one central node, found {centrals}")));
        }
        let mut labels = BTreeSet::new();
        let mut addresses = BTreeSet::new();
        for node in &self.nodes {
            if !labels.insert(node.label.as_str()) {
                return Err(HarnessError::Topology(format!("duplicate label {}", node.label)));
            }
            if node.address == LOOPBACK {
                return Err(HarnessError::Topology(format!(
                    "{}: {LOOPBACK} is reserved for local endpoints",
                    node.label
                )));
            }
            if !addresses.insert(node.address) {
                return Err(HarnessError::Topology(format!("duplicate address {}", node.address)));
            }
        }

        // Nodes share the host's port space: every listener needs its own port.
        let mut owners: BTreeMap<u16, String> = BTreeMap::new();
        let mut claim = |port: u16, owner: String| -> Result<(), HarnessError> {
            if port == 0 {
                return Err(HarnessError::Topology(format!("{owner} needs a fixed port")));
            }
            if let Some(prev) = owners.insert(port, owner.clone()) {
                return Err(HarnessError::PortConflict { port, detail: format!("{prev} and {owner}") });
            }
            Ok(())
        };
        claim(self.control_plane.port(), "control plane".into())?;
        for node in &self.nodes {
            claim(node.egress_port, format!("{} egress", node.label))?;
            claim(node.ingress_port, format!("{} ingress", node.label))?;
        }
        if let Some(cloud) = &self.cloud {
            claim(cloud.port, "cloud gateway".into())?;
        }
        Ok(())
    }
}

/// Hands out distinct free TCP ports on the loopback interface.
#[derive(Debug, Default)]
pub struct PortAllocator {
    handed_out: BTreeSet<u16>,
}

impl PortAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reserve(&mut self, port: u16) {
        self.handed_out.insert(port);
    }

    pub fn claim(&mut self) -> Result<u16, HarnessError> {
        for _ in 0..64 {
            let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))
                .map_err(|e| HarnessError::Topology(format!("no free port: {e}")))?;
            let port = listener.local_addr().map_err(|e| HarnessError::Topology(e.to_string()))?.port();
            if self.handed_out.insert(port) {
                return Ok(port);
            }
        }
        Err(HarnessError::Topology("port allocator exhausted".into()))
    }
}
