//! The control plane hosted on the central node: node registry, service
//! registry and snapshot distribution to the connected proxies.
//!
//! All registry mutations go through one mutex. A mutation bumps the version,
//! and the snapshots for every subscribed node are rebuilt and queued while
//! the lock is still held, so each session observes versions in the same
//! total order the registry applied them.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use thiserror::Error;
use tokio::sync::mpsc;
use tracing::{debug, info};

use crate::model::{
    build_snapshot, parse_address, validate_port, validate_service_name, ConfigSnapshot,
    ModelError, NodeId, NodeRecord, RegistryState, ServiceInstance,
};
use crate::server::{bind, BindError, ServerHandle};
use crate::wire::{
    ErrorBody, NodeRegistered, NodeRegistration, ServiceRegistration, StateDump, NODE_ID_HEADER,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlPlaneError {
    #[error("unknown node identifier")]
    UnknownNode,
    #[error(transparent)]
    Invalid(ModelError),
    #[error("not registered")]
    NotRegistered,
    #[error("no data plane on external node")]
    ExternalNode,
}

impl From<ModelError> for ControlPlaneError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::ServiceNotRegistered => ControlPlaneError::NotRegistered,
            ModelError::ExternalNode => ControlPlaneError::ExternalNode,
            ModelError::NodeNotRegistered => ControlPlaneError::UnknownNode,
            other => ControlPlaneError::Invalid(other),
        }
    }
}

impl ControlPlaneError {
    pub fn status(&self) -> StatusCode {
        match self {
            ControlPlaneError::UnknownNode | ControlPlaneError::ExternalNode => StatusCode::FORBIDDEN,
            ControlPlaneError::Invalid(_) => StatusCode::BAD_REQUEST,
            ControlPlaneError::NotRegistered => StatusCode::NOT_FOUND,
        }
    }
}

impl IntoResponse for ControlPlaneError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody::new(self.to_string()))).into_response()
    }
}

#[derive(Debug)]
struct Session {
    serial: u64,
    last_sent_version: u64,
    tx: mpsc::UnboundedSender<Arc<ConfigSnapshot>>,
}

#[derive(Debug, Default)]
struct Inner {
    state: RegistryState,
    sessions: HashMap<NodeId, Session>,
    next_serial: u64,
}

impl Inner {
    /// Queues the current snapshot on every session; dead sessions are dropped.
    fn publish(&mut self) {
        let state = &self.state;
        self.sessions.retain(|node, session| {
            let Ok(snapshot) = build_snapshot(state, node) else {
                return false;
            };
            if snapshot.version <= session.last_sent_version {
                return true;
            }
            session.last_sent_version = snapshot.version;
            session.tx.send(Arc::new(snapshot)).is_ok()
        });
    }
}

/// Ordered snapshot feed for one node. Ends when the session is replaced by
/// a newer subscription for the same node or the control plane shuts down.
#[derive(Debug)]
pub struct Subscription {
    pub node: NodeId,
    rx: mpsc::UnboundedReceiver<Arc<ConfigSnapshot>>,
}

impl Subscription {
    pub async fn next(&mut self) -> Option<Arc<ConfigSnapshot>> {
        self.rx.recv().await
    }
}

#[derive(Debug, Clone, Default)]
pub struct ControlPlane {
    inner: Arc<Mutex<Inner>>,
}

impl ControlPlane {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn version(&self) -> u64 {
        self.lock().state.version
    }

    pub fn state(&self) -> RegistryState {
        self.lock().state.clone()
    }

    pub fn register_node(&self, req: &NodeRegistration) -> Result<NodeRecord, ControlPlaneError> {
        let address = parse_address(&req.ip)?;
        let ingress_port = validate_port(req.ingress_port)?;
        let mut inner = self.lock();
        let record = inner.state.register_node(address, req.kind, ingress_port);
        inner.publish();
        info!(node = %record.id, %address, role = ?record.role, "node registered");
        Ok(record)
    }

    /// Resolves a node-id header value to its record. A missing or empty
    /// header is treated like an unknown id.
    pub fn validate_node(&self, id: Option<&str>) -> Result<NodeRecord, ControlPlaneError> {
        let id = id.map(str::trim).filter(|s| !s.is_empty()).ok_or(ControlPlaneError::UnknownNode)?;
        self.lock()
            .state
            .nodes
            .get(&NodeId::new(id))
            .cloned()
            .ok_or(ControlPlaneError::UnknownNode)
    }

    fn instance(caller: &NodeRecord, reg: &ServiceRegistration) -> Result<ServiceInstance, ControlPlaneError> {
        validate_service_name(&reg.name)?;
        let port = validate_port(reg.port)?;
        Ok(ServiceInstance { name: reg.name.clone(), node: caller.id.clone(), port })
    }

    /// Returns whether the registry changed; exact duplicates are accepted
    /// without a version bump or push.
    pub fn register_service(&self, caller: Option<&str>, reg: &ServiceRegistration) -> Result<bool, ControlPlaneError> {
        let caller = self.validate_node(caller)?;
        let instance = Self::instance(&caller, reg)?;
        let mut inner = self.lock();
        // The caller may have been validated against an older state; the
        // model re-checks node existence under the lock.
        let changed = inner.state.add_service(instance.clone())?;
        if changed {
            inner.publish();
            info!(service = %instance.name, node = %instance.node, port = instance.port, version = inner.state.version, "service registered");
        }
        Ok(changed)
    }

    pub fn deregister_service(&self, caller: Option<&str>, reg: &ServiceRegistration) -> Result<(), ControlPlaneError> {
        let caller = self.validate_node(caller)?;
        let instance = Self::instance(&caller, reg)?;
        let mut inner = self.lock();
        inner.state.remove_service(&instance)?;
        inner.publish();
        info!(service = %instance.name, node = %instance.node, port = instance.port, version = inner.state.version, "service deregistered");
        Ok(())
    }

    /// Opens a snapshot feed for `caller`, replacing any previous session of
    /// the same node. The current snapshot is delivered first.
    pub fn subscribe(&self, caller: Option<&str>) -> Result<Subscription, ControlPlaneError> {
        let record = self.validate_node(caller)?;
        let mut inner = self.lock();
        let snapshot = build_snapshot(&inner.state, &record.id)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let version = snapshot.version;
        tx.send(Arc::new(snapshot)).expect("receiver held locally");
        inner.next_serial += 1;
        let serial = inner.next_serial;
        if let Some(old) = inner.sessions.insert(
            record.id.clone(),
            Session { serial, last_sent_version: version, tx },
        ) {
            debug!(node = %record.id, old = old.serial, new = serial, "replacing subscriber session");
        }
        Ok(Subscription { node: record.id, rx })
    }

    pub fn session_count(&self) -> usize {
        self.lock().sessions.len()
    }

    pub fn is_subscribed(&self, node: &NodeId) -> bool {
        self.lock().sessions.contains_key(node)
    }

    /// Ends every snapshot stream.
    pub fn close_sessions(&self) {
        self.lock().sessions.clear();
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/nodes", post(post_node))
            .route("/services", post(post_service).delete(delete_service))
            .route("/config/stream", get(config_stream))
            .route("/state", get(get_state))
            .with_state(self.clone())
    }

    pub async fn serve(&self, addr: SocketAddr) -> Result<ControlPlaneServer, BindError> {
        let listener = bind(addr).await?;
        let server = ServerHandle::spawn(listener, self.router()).map_err(|source| BindError {
            addr,
            port: addr.port(),
            source,
        })?;
        info!(addr = %server.local_addr(), "control plane listening");
        Ok(ControlPlaneServer { plane: self.clone(), server })
    }
}

#[derive(Debug)]
pub struct ControlPlaneServer {
    plane: ControlPlane,
    server: ServerHandle,
}

impl ControlPlaneServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn plane(&self) -> &ControlPlane {
        &self.plane
    }

    pub async fn shutdown(self) {
        self.plane.close_sessions();
        self.server.shutdown().await;
    }
}

fn node_header(headers: &HeaderMap) -> Option<&str> {
    headers.get(NODE_ID_HEADER).and_then(|v| v.to_str().ok())
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Box<Response>> {
    serde_json::from_slice(body).map_err(|err| {
        Box::new((StatusCode::BAD_REQUEST, Json(ErrorBody::new(format!("invalid body: {err}")))).into_response())
    })
}

async fn post_node(State(cp): State<ControlPlane>, body: Bytes) -> Response {
    let req: NodeRegistration = match parse_body(&body) {
        Ok(req) => req,
        Err(resp) => return *resp,
    };
    match cp.register_node(&req) {
        Ok(record) => (
            StatusCode::CREATED,
            Json(NodeRegistered { node_id: record.id.to_string() }),
        )
            .into_response(),
        Err(err) => err.into_response(),
    }
}

// Authorization is checked before the body is even parsed.
async fn post_service(State(cp): State<ControlPlane>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(err) = cp.validate_node(node_header(&headers)) {
        return err.into_response();
    }
    let reg: ServiceRegistration = match parse_body(&body) {
        Ok(reg) => reg,
        Err(resp) => return *resp,
    };
    match cp.register_service(node_header(&headers), &reg) {
        Ok(_) => StatusCode::NO_CONTENT.into_response(),
        Err(err) => err.into_response(),
    }
}

async fn delete_service(State(cp): State<ControlPlane>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(err) = cp.validate_node(node_header(&headers)) {
        return err.into_response();
    }
    let reg: ServiceRegistration = match parse_body(&body) {
        Ok(reg) => reg,
        Err(resp) => return *resp,
    };
    match cp.deregister_service(node_header(&headers), &reg) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(err) => err.into_response(),
    }
}

async fn config_stream(State(cp): State<ControlPlane>, headers: HeaderMap) -> Response {
    let subscription = match cp.subscribe(node_header(&headers)) {
        Ok(sub) => sub,
        Err(err) => return err.into_response(),
    };
    info!(node = %subscription.node, "proxy subscribed");
    let lines = futures::stream::unfold(subscription, |mut sub| async move {
        let snapshot = sub.next().await?;
        let mut line = snapshot.to_canonical_json();
        line.push('\n');
        Some((Ok::<_, Infallible>(Bytes::from(line)), sub))
    });
    Response::builder()
        .status(StatusCode::OK)
        .header("content-type", "application/x-ndjson")
        .header("cache-control", "no-cache")
        .body(Body::from_stream(lines))
        .expect("static response parts")
}

async fn get_state(State(cp): State<ControlPlane>) -> Json<StateDump> {
    let state = cp.state();
    Json(StateDump {
        version: state.version,
        nodes: state.nodes.into_values().collect(),
        services: state.services.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeKind, NodeRole};

    fn hpc(ip: &str) -> NodeRegistration {
        NodeRegistration { ip: ip.into(), kind: NodeKind::Hpc, ingress_port: 15006 }
    }

    fn reg(name: &str, port: u64) -> ServiceRegistration {
        ServiceRegistration { name: name.into(), port }
    }

    #[test]
    fn first_hpc_is_central_then_satellites() {
        let cp = ControlPlane::new();
        let a = cp.register_node(&hpc("192.168.0.10")).unwrap();
        let b = cp.register_node(&hpc("192.168.0.11")).unwrap();
        assert_eq!(a.role, NodeRole::Central);
        assert_eq!(b.role, NodeRole::Satellite);
        assert_ne!(a.id, b.id);
        assert_eq!(cp.state().nodes.len(), 2);
    }

    #[test]
    fn malformed_registration_rejected() {
        let cp = ControlPlane::new();
        let err = cp.register_node(&hpc("999.9.9.9")).unwrap_err();
        assert_eq!(err.status(), StatusCode::BAD_REQUEST);
        let mut bad_port = hpc("10.0.0.1");
        bad_port.ingress_port = 70000;
        assert!(cp.register_node(&bad_port).is_err());
        assert_eq!(cp.version(), 0);
    }

    #[test]
    fn validate_node_lookup() {
        let cp = ControlPlane::new();
        let a = cp.register_node(&hpc("10.0.0.1")).unwrap();
        assert_eq!(cp.validate_node(Some(a.id.as_str())).unwrap(), a);
        assert_eq!(cp.validate_node(Some(&NodeId::generate().to_string())), Err(ControlPlaneError::UnknownNode));
        assert_eq!(cp.validate_node(Some("")), Err(ControlPlaneError::UnknownNode));
        assert_eq!(cp.validate_node(None), Err(ControlPlaneError::UnknownNode));
    }

    #[test]
    fn register_and_deregister_services() {
        let cp = ControlPlane::new();
        let sat = cp.register_node(&hpc("10.0.0.2")).unwrap();
        let id = Some(sat.id.as_str());
        let v0 = cp.version();
        assert_eq!(cp.register_service(id, &reg("B", 7002)), Ok(true));
        assert_eq!(cp.version(), v0 + 1);
        assert_eq!(cp.register_service(id, &reg("B", 7002)), Ok(false));
        assert_eq!(cp.version(), v0 + 1);

        assert_eq!(cp.register_service(Some("nope"), &reg("B", 7002)), Err(ControlPlaneError::UnknownNode));
        assert!(matches!(cp.register_service(id, &reg("a/b", 1)), Err(ControlPlaneError::Invalid(_))));
        assert!(matches!(cp.register_service(id, &reg("B", 0)), Err(ControlPlaneError::Invalid(_))));
        assert_eq!(cp.version(), v0 + 1);

        assert_eq!(cp.deregister_service(id, &reg("B", 9999)), Err(ControlPlaneError::NotRegistered));
        cp.deregister_service(id, &reg("B", 7002)).unwrap();
        assert_eq!(cp.version(), v0 + 2);
        assert!(cp.state().services.is_empty());
    }

    #[tokio::test]
    async fn subscribe_delivers_current_then_ordered_updates() {
        let cp = ControlPlane::new();
        let central = cp.register_node(&hpc("10.0.0.1")).unwrap();
        let sat = cp.register_node(&hpc("10.0.0.2")).unwrap();
        let mut sub = cp.subscribe(Some(central.id.as_str())).unwrap();
        let first = sub.next().await.unwrap();
        assert_eq!(first.version, 2);
        assert_eq!(*first, build_snapshot(&cp.state(), &central.id).unwrap());

        cp.register_service(Some(sat.id.as_str()), &reg("B", 7002)).unwrap();
        cp.register_service(Some(central.id.as_str()), &reg("A", 7001)).unwrap();
        let s1 = sub.next().await.unwrap();
        let s2 = sub.next().await.unwrap();
        assert!(s1.version < s2.version);
        assert_eq!(*s2, build_snapshot(&cp.state(), &central.id).unwrap());
        assert!(s2.egress.routes.contains_key("B"));

        // duplicate registration pushes nothing
        cp.register_service(Some(sat.id.as_str()), &reg("B", 7002)).unwrap();
        assert!(sub.rx.try_recv().is_err());
    }

    #[tokio::test]
    async fn resubscribe_closes_previous_session() {
        let cp = ControlPlane::new();
        let central = cp.register_node(&hpc("10.0.0.1")).unwrap();
        let mut old = cp.subscribe(Some(central.id.as_str())).unwrap();
        let mut new = cp.subscribe(Some(central.id.as_str())).unwrap();
        assert!(old.next().await.is_some());
        assert!(old.next().await.is_none());
        assert!(new.next().await.is_some());
        assert_eq!(cp.session_count(), 1);
    }

    #[test]
    fn external_and_unknown_nodes_cannot_subscribe() {
        let cp = ControlPlane::new();
        let gw = cp
            .register_node(&NodeRegistration { ip: "203.0.113.5".into(), kind: NodeKind::Cloud, ingress_port: 8443 })
            .unwrap();
        assert_eq!(cp.subscribe(Some(gw.id.as_str())).unwrap_err(), ControlPlaneError::ExternalNode);
        assert_eq!(cp.subscribe(Some("unknown")).unwrap_err(), ControlPlaneError::UnknownNode);
        assert_eq!(cp.session_count(), 0);
    }
}
