use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use thiserror::Error;
use tokio::sync::watch;

use crate::model::{validate_service_name, ConfigSnapshot, Endpoint, NodeId, RouteMap};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("not configured")]
    NotConfigured,
    #[error("no route")]
    NoRoute,
    #[error("service not hosted on this node")]
    NotHosted,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("malformed snapshot: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Ignored,
}

/// Per-service rotation counters for one route table.
#[derive(Debug, Default)]
struct Rotation {
    counters: HashMap<String, Arc<AtomicUsize>>,
}

impl Rotation {
    /// Builds counters for `routes`, reusing the previous counter for every
    /// name whose endpoint list is unchanged.
    fn carry_over(routes: &RouteMap, prev: Option<(&RouteMap, &Rotation)>) -> Self {
        let counters = routes
            .iter()
            .map(|(name, endpoints)| {
                let kept = prev.and_then(|(prev_routes, prev_rot)| {
                    (prev_routes.get(name) == Some(endpoints))
                        .then(|| prev_rot.counters.get(name).cloned())
                        .flatten()
                });
                (name.clone(), kept.unwrap_or_default())
            })
            .collect();
        Rotation { counters }
    }

    fn pick(&self, routes: &RouteMap, name: &str) -> Option<Endpoint> {
        let endpoints = routes.get(name).filter(|e| !e.is_empty())?;
        let counter = self.counters.get(name)?;
        let n = counter.fetch_add(1, Ordering::Relaxed);
        Some(endpoints[n % endpoints.len()])
    }

    fn position(&self, name: &str) -> usize {
        self.counters.get(name).map_or(0, |c| c.load(Ordering::Relaxed))
    }
}

/// The configuration a proxy is currently serving. Both tables always come
/// from the same snapshot.
#[derive(Debug)]
pub struct ActiveConfig {
    snapshot: Arc<ConfigSnapshot>,
    egress_rr: Rotation,
    ingress_rr: Rotation,
}

impl ActiveConfig {
    pub fn new(snapshot: Arc<ConfigSnapshot>, prev: Option<&ActiveConfig>) -> Self {
        let egress_rr = Rotation::carry_over(
            &snapshot.egress.routes,
            prev.map(|p| (&p.snapshot.egress.routes, &p.egress_rr)),
        );
        let ingress_rr = Rotation::carry_over(
            &snapshot.ingress.routes,
            prev.map(|p| (&p.snapshot.ingress.routes, &p.ingress_rr)),
        );
        ActiveConfig { snapshot, egress_rr, ingress_rr }
    }

    pub fn version(&self) -> u64 {
        self.snapshot.version
    }

    pub fn snapshot(&self) -> &Arc<ConfigSnapshot> {
        &self.snapshot
    }

    /// Round-robin over the egress endpoints of `service`.
    pub fn resolve_egress(&self, service: &str) -> Result<Endpoint, RouteError> {
        self.egress_rr
            .pick(&self.snapshot.egress.routes, service)
            .ok_or(RouteError::NoRoute)
    }

    /// Round-robin over local instances; never consults the egress table.
    pub fn resolve_ingress(&self, service: &str) -> Result<Endpoint, RouteError> {
        self.ingress_rr
            .pick(&self.snapshot.ingress.routes, service)
            .ok_or(RouteError::NotHosted)
    }

    pub fn egress_position(&self, service: &str) -> usize {
        self.egress_rr.position(service)
    }
}

fn check_routes(routes: &RouteMap) -> Result<(), SnapshotError> {
    for (name, endpoints) in routes {
        validate_service_name(name).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
        if endpoints.is_empty() {
            return Err(SnapshotError::Invalid(format!("empty endpoint list for {name}")));
        }
    }
    Ok(())
}

/// Holds the active configuration and swaps it atomically.
///
/// Readers take a cheap `Arc` snapshot and keep using it for the whole
/// request, so a concurrent swap never shows them a mix of two versions.
#[derive(Debug)]
pub struct ConfigStore {
    node: Option<NodeId>,
    current: ArcSwapOption<ActiveConfig>,
    writer: Mutex<()>,
    version_tx: watch::Sender<u64>,
}

impl ConfigStore {
    /// `node` restricts accepted snapshots to ones addressed to that node.
    pub fn new(node: Option<NodeId>) -> Self {
        ConfigStore {
            node,
            current: ArcSwapOption::empty(),
            writer: Mutex::new(()),
            version_tx: watch::channel(0).0,
        }
    }

    pub fn load(&self) -> Option<Arc<ActiveConfig>> {
        self.current.load_full()
    }

    /// Version of the active config, 0 before the first snapshot.
    pub fn version(&self) -> u64 {
        self.current.load().as_ref().map_or(0, |c| c.version())
    }

    pub fn watch_version(&self) -> watch::Receiver<u64> {
        self.version_tx.subscribe()
    }

    pub fn apply_snapshot(&self, snapshot: ConfigSnapshot) -> Result<ApplyOutcome, SnapshotError> {
        if let Some(node) = &self.node {
            if &snapshot.node != node {
                return Err(SnapshotError::Invalid(format!("snapshot addressed to {}", snapshot.node)));
            }
        }
        check_routes(&snapshot.ingress.routes)?;
        check_routes(&snapshot.egress.routes)?;

        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let prev = self.current.load_full();
        if prev.as_ref().is_some_and(|p| snapshot.version <= p.version()) {
            return Ok(ApplyOutcome::Ignored);
        }
        let version = snapshot.version;
        let next = ActiveConfig::new(Arc::new(snapshot), prev.as_deref());
        self.current.store(Some(Arc::new(next)));
        self.version_tx.send_replace(version);
        Ok(ApplyOutcome::Applied)
    }

    /// Parses and applies one line of the snapshot stream. A malformed line
    /// leaves the active configuration untouched.
    pub fn apply_line(&self, line: &str) -> Result<ApplyOutcome, SnapshotError> {
        let snapshot = ConfigSnapshot::from_json(line)?;
        self.apply_snapshot(snapshot)
    }
}
