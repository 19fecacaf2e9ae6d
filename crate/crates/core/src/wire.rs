//! JSON bodies and header names shared by the control plane, the proxies and
//! the orchestrator.

use serde::{Deserialize, Serialize};

use crate::model::{NodeKind, NodeRecord, ServiceInstance};

/// Header carrying the caller's node identifier on every registry request.
pub const NODE_ID_HEADER: &str = "X-Carisma-Node-Id";

/// `POST /nodes` body. Ports are carried as plain integers and range-checked
/// by the receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub ip: String,
    pub kind: NodeKind,
    pub ingress_port: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistered {
    pub node_id: String,
}

/// `POST /services` and `DELETE /services` body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRegistration {
    pub name: String,
    pub port: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>) -> Self {
        ErrorBody { error: error.into(), service: None }
    }

    pub fn for_service(error: impl Into<String>, service: impl Into<String>) -> Self {
        ErrorBody { error: error.into(), service: Some(service.into()) }
    }
}

/// `GET /state`: read-only registry dump used for version probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDump {
    pub version: u64,
    pub nodes: Vec<NodeRecord>,
    pub services: Vec<ServiceInstance>,
}
