//! End-to-end validation harness.
//!
//! A [`Cluster`] runs the control plane and one orchestrator + proxy per
//! node inside the current process, with every node on its own loopback
//! address and port set. Services are real child processes (the
//! `carisma-echo` binary). Each scenario boots a fresh cluster, probes it,
//! and tears it down again.

mod cluster;
mod probe;
mod report;
pub mod scenarios;
mod topology;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

pub use cluster::{Cluster, ClusterNode, SYNC_TIMEOUT};
pub use probe::{ProbeOutcome, Prober};
pub use report::{Assertion, Expectation, ScenarioReport};
pub use topology::{CloudSpec, NodeSpec, PortAllocator, Topology};

use crate::client::ClientError;
use crate::orchestrator::OrchestratorError;
use crate::server::BindError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("port conflict on {port}: {detail}")]
    PortConflict { port: u16, detail: String },
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("readiness timeout: {0}")]
    Readiness(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("scenario aborted: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    SameNode,
    SameNodeUndeploy,
    CrossNode,
    CrossNodeProxyDown,
    Relocation,
    RelocationBreakBeforeMake,
    Balanced,
    BalancedInstanceDown,
    Cloud,
    CloudDeregistered,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 10] = [
        ScenarioId::SameNode,
        ScenarioId::SameNodeUndeploy,
        ScenarioId::CrossNode,
        ScenarioId::CrossNodeProxyDown,
        ScenarioId::Relocation,
        ScenarioId::RelocationBreakBeforeMake,
        ScenarioId::Balanced,
        ScenarioId::BalancedInstanceDown,
        ScenarioId::Cloud,
        ScenarioId::CloudDeregistered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::SameNode => "same-node",
            ScenarioId::SameNodeUndeploy => "same-node-undeploy",
            ScenarioId::CrossNode => "cross-node",
            ScenarioId::CrossNodeProxyDown => "cross-node-proxy-down",
            ScenarioId::Relocation => "relocation",
            ScenarioId::RelocationBreakBeforeMake => "relocation-break-before-make",
            ScenarioId::Balanced => "balanced",
            ScenarioId::BalancedInstanceDown => "balanced-instance-down",
            ScenarioId::Cloud => "cloud",
            ScenarioId::CloudDeregistered => "cloud-deregistered",
        }
    }

    /// Nodes the scenario needs.
    pub fn min_nodes(self) -> usize {
        match self {
            ScenarioId::SameNode | ScenarioId::SameNodeUndeploy | ScenarioId::Cloud | ScenarioId::CloudDeregistered => 1,
            ScenarioId::Balanced | ScenarioId::BalancedInstanceDown => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// Boots a cluster for `id`, runs the scenario and tears the cluster down,
/// also when the scenario aborts.
pub async fn run_scenario(id: ScenarioId, topology: &Topology, echo_bin: &Path) -> Result<ScenarioReport, HarnessError> {
    if topology.nodes.len() < id.min_nodes() {
        return Err(HarnessError::Topology(format!("{id} needs {} nodes", id.min_nodes())));
    }
    let started = Instant::now();
    let mut cluster = Cluster::start(topology.clone(), PathBuf::from(echo_bin)).await?;
    let result = match id {
        ScenarioId::SameNode => scenarios::same_node(&mut cluster, false).await,
        ScenarioId::SameNodeUndeploy => scenarios::same_node(&mut cluster, true).await,
        ScenarioId::CrossNode => scenarios::cross_node(&mut cluster, false).await,
        ScenarioId::CrossNodeProxyDown => scenarios::cross_node(&mut cluster, true).await,
        ScenarioId::Relocation => scenarios::relocation(&mut cluster, false).await,
        ScenarioId::RelocationBreakBeforeMake => scenarios::relocation(&mut cluster, true).await,
        ScenarioId::Balanced => scenarios::balanced(&mut cluster, false).await,
        ScenarioId::BalancedInstanceDown => scenarios::balanced(&mut cluster, true).await,
        ScenarioId::Cloud => scenarios::cloud(&mut cluster, false).await,
        ScenarioId::CloudDeregistered => scenarios::cloud(&mut cluster, true).await,
    };
    cluster.teardown().await;
    let mut report = result?;
    report.duration_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

/// Locates `carisma-echo` next to the running executable.
pub fn sibling_echo_binary() -> std::io::Result<PathBuf> {
    let exe = std::env::current_exe()?;
    Ok(exe.with_file_name(format!("carisma-echo{}", std::env::consts::EXE_SUFFIX)))
}
