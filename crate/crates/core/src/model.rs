//! Registry state and the node-specific configuration views derived from it.
//!
//! Everything in this module is a pure function of a [`RegistryState`]. The
//! control plane owns the mutable state and calls into here whenever a
//! snapshot has to be regenerated; the proxy only ever sees the resulting
//! [`ConfigSnapshot`].
//!
//! Per node `N` two views are derived:
//!
//! * the [`LocalView`] maps every service hosted on `N` to a loopback
//!   endpoint on the port the service listens on;
//! * the [`GlobalView`] maps every service hosted elsewhere to the hosting
//!   node's address and ingress listener port. Names that `N` hosts itself
//!   are discarded, so a local instance shadows all remote ones.
//!
//! The egress table is the disjoint union of both views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Address used for every endpoint of a local view.
pub const LOOPBACK: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("node not registered")]
    NodeNotRegistered,
    #[error("no data plane on external node")]
    ExternalNode,
    #[error("invalid configuration: conflicting route for {0}")]
    ConflictingRoute(String),
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("invalid service name: {0:?}")]
    InvalidServiceName(String),
    #[error("invalid port: {0}")]
    InvalidPort(u64),
    #[error("not registered")]
    ServiceNotRegistered,
}

/// Opaque node identifier handed out by the node registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    /// Draws a fresh random identifier (UUIDv4, hyphenated lowercase).
    pub fn generate() -> Self {
        NodeId(uuid::Uuid::new_v4().hyphenated().to_string())
    }

    pub fn new(value: impl Into<String>) -> Self {
        NodeId(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Hpc,
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Central,
    Satellite,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub address: IpAddr,
    pub kind: NodeKind,
    pub role: NodeRole,
    pub ingress_port: u16,
}

impl NodeRecord {
    pub fn is_external(&self) -> bool {
        self.role == NodeRole::External
    }
}

/// One running instance of a named service on a node.
///
/// Ordering is `(name, node, port)`, which is also the iteration order of
/// [`RegistryState::services`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub name: String,
    pub node: NodeId,
    pub port: u16,
}

pub fn validate_service_name(name: &str) -> Result<(), ModelError> {
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(ModelError::InvalidServiceName(name.to_string()));
    }
    Ok(())
}

/// Checks that a wire-level integer is a usable port (1..=65535).
pub fn validate_port(port: u64) -> Result<u16, ModelError> {
    match u16::try_from(port) {
        Ok(p) if p != 0 => Ok(p),
        _ => Err(ModelError::InvalidPort(port)),
    }
}

pub fn parse_address(raw: &str) -> Result<IpAddr, ModelError> {
    IpAddr::from_str(raw.trim()).map_err(|_| ModelError::InvalidAddress(raw.to_string()))
}

/// Authoritative registry contents: nodes and the service instances they host.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryState {
    pub version: u64,
    pub nodes: BTreeMap<NodeId, NodeRecord>,
    pub services: BTreeSet<ServiceInstance>,
}

impl RegistryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: &NodeId) -> Result<&NodeRecord, ModelError> {
        self.nodes.get(id).ok_or(ModelError::NodeNotRegistered)
    }

    pub fn central(&self) -> Option<&NodeRecord> {
        self.nodes.values().find(|n| n.role == NodeRole::Central)
    }

    /// Registers a node under a freshly generated id.
    ///
    /// The first `hpc` node becomes central, later ones satellites; cloud
    /// endpoints are always external. Re-registering an address yields a
    /// second, distinct record.
    pub fn register_node(&mut self, address: IpAddr, kind: NodeKind, ingress_port: u16) -> NodeRecord {
        let role = match kind {
            NodeKind::Cloud => NodeRole::External,
            NodeKind::Hpc if self.central().is_none() => NodeRole::Central,
            NodeKind::Hpc => NodeRole::Satellite,
        };
        let mut id = NodeId::generate();
        while self.nodes.contains_key(&id) {
            id = NodeId::generate();
        }
        let record = NodeRecord { id, address, kind, role, ingress_port };
        self.insert_node(record.clone());
        record
    }

    /// Inserts a fully formed record and bumps the version.
    pub fn insert_node(&mut self, record: NodeRecord) {
        self.nodes.insert(record.id.clone(), record);
        self.version += 1;
    }

    /// Adds an instance. Returns `false` (and leaves the version alone) when
    /// the exact triple is already registered.
    pub fn add_service(&mut self, instance: ServiceInstance) -> Result<bool, ModelError> {
        validate_service_name(&instance.name)?;
        validate_port(u64::from(instance.port))?;
        self.node(&instance.node)?;
        if !self.services.insert(instance) {
            return Ok(false);
        }
        self.version += 1;
        Ok(true)
    }

    pub fn remove_service(&mut self, instance: &ServiceInstance) -> Result<(), ModelError> {
        if !self.services.remove(instance) {
            return Err(ModelError::ServiceNotRegistered);
        }
        self.version += 1;
        Ok(())
    }

    /// Nodes that run a proxy and therefore receive snapshots.
    pub fn data_plane_nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values().filter(|n| !n.is_external())
    }
}

/// A resolved forwarding target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(addr: IpAddr, port: u16) -> Self {
        Endpoint { addr, port }
    }

    pub fn loopback(port: u16) -> Self {
        Endpoint { addr: LOOPBACK, port }
    }

    pub fn is_loopback(&self) -> bool {
        self.addr == LOOPBACK
    }

    pub fn socket_addr(&self) -> std::net::SocketAddr {
        std::net::SocketAddr::new(self.addr, self.port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.socket_addr())
    }
}

pub type RouteMap = BTreeMap<String, Vec<Endpoint>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocalView {
    pub routes: RouteMap,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalView {
    pub routes: RouteMap,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EgressTable {
    pub routes: RouteMap,
}

/// Node-specific configuration pushed to a proxy.
///
/// Fields are declared in lexicographic order so that the derived
/// serialization is key-sorted at every level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub egress: EgressTable,
    pub ingress: LocalView,
    pub node: NodeId,
    pub version: u64,
}

impl ConfigSnapshot {
    /// Single-line canonical JSON, as sent on the snapshot stream.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serialization is infallible")
    }

    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Services hosted on `node`, mapped to loopback endpoints sorted by port.
pub fn compute_local_view(state: &RegistryState, node: &NodeId) -> Result<LocalView, ModelError> {
    state.node(node)?;
    let mut routes = RouteMap::new();
    for instance in state.services.iter().filter(|s| &s.node == node) {
        routes
            .entry(instance.name.clone())
            .or_default()
            .push(Endpoint::loopback(instance.port));
    }
    for endpoints in routes.values_mut() {
        endpoints.sort();
        endpoints.dedup();
    }
    Ok(LocalView { routes })
}

/// Services hosted only on other nodes, mapped to one ingress endpoint per
/// hosting node in node-id order.
pub fn compute_global_view(state: &RegistryState, node: &NodeId) -> Result<GlobalView, ModelError> {
    state.node(node)?;
    let local: BTreeSet<&str> = state
        .services
        .iter()
        .filter(|s| &s.node == node)
        .map(|s| s.name.as_str())
        .collect();

    let mut hosts: BTreeMap<&str, BTreeSet<&NodeId>> = BTreeMap::new();
    for instance in &state.services {
        if &instance.node == node || local.contains(instance.name.as_str()) {
            continue;
        }
        hosts.entry(&instance.name).or_default().insert(&instance.node);
    }

    let mut routes = RouteMap::new();
    for (name, node_ids) in hosts {
        let endpoints = node_ids
            .into_iter()
            .filter_map(|id| state.nodes.get(id))
            .map(|n| Endpoint::new(n.address, n.ingress_port))
            .collect();
        routes.insert(name.to_string(), endpoints);
    }
    Ok(GlobalView { routes })
}

/// Disjoint union of both views. An overlapping name would map one service
/// to both a local and a remote address and is rejected.
pub fn merge_views(local: &LocalView, global: &GlobalView) -> Result<EgressTable, ModelError> {
    let mut routes = local.routes.clone();
    for (name, endpoints) in &global.routes {
        if routes.contains_key(name) {
            return Err(ModelError::ConflictingRoute(name.clone()));
        }
        routes.insert(name.clone(), endpoints.clone());
    }
    Ok(EgressTable { routes })
}

pub fn build_snapshot(state: &RegistryState, node: &NodeId) -> Result<ConfigSnapshot, ModelError> {
    if state.node(node)?.is_external() {
        return Err(ModelError::ExternalNode);
    }
    let ingress = compute_local_view(state, node)?;
    let global = compute_global_view(state, node)?;
    let egress = merge_views(&ingress, &global)?;
    Ok(ConfigSnapshot { egress, ingress, node: node.clone(), version: state.version })
}
