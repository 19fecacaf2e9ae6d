//! HTTP client for the control plane API, used by proxies, orchestrators and
//! the harness.

use std::time::Duration;

use thiserror::Error;

use crate::model::NodeId;
use crate::wire::{ErrorBody, NodeRegistered, NodeRegistration, ServiceRegistration, StateDump, NODE_ID_HEADER};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("control plane unreachable: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("control plane rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Rejected { status, .. } => Some(*status),
            ClientError::Transport(_) => None,
        }
    }

    /// True for failures that may succeed when retried later.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Rejected { status, .. } => *status >= 500,
        }
    }
}

/// Accepts either `host:port` or a full `http://host:port` base URL.
pub fn normalize_base(addr: &str) -> String {
    let trimmed = addr.trim().trim_end_matches('/');
    if trimmed.starts_with("http://") || trimmed.starts_with("https://") {
        trimmed.to_string()
    } else {
        format!("http://{trimmed}")
    }
}

#[derive(Debug, Clone)]
pub struct ControlPlaneClient {
    base: String,
    http: reqwest::Client,
    stream_http: reqwest::Client,
}

impl ControlPlaneClient {
    pub fn new(addr: &str) -> Self {
        let http = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(2))
            .timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        let stream_http = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(2))
            .tcp_keepalive(Duration::from_secs(10))
            .build()
            .expect("http client");
        ControlPlaneClient { base: normalize_base(addr), http, stream_http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Rejected { status: status.as_u16(), message })
    }

    pub async fn register_node(&self, reg: &NodeRegistration) -> Result<NodeId, ClientError> {
        let resp = self.http.post(format!("{}/nodes", self.base)).json(reg).send().await?;
        let body: NodeRegistered = Self::check(resp).await?.json().await?;
        Ok(NodeId::new(body.node_id))
    }

    pub async fn register_service(&self, node: &NodeId, reg: &ServiceRegistration) -> Result<(), ClientError> {
        let resp = self
            .http
            .post(format!("{}/services", self.base))
            .header(NODE_ID_HEADER, node.as_str())
            .json(reg)
            .send()
            .await?;
        Self::check(resp).await.map(drop)
    }

    pub async fn deregister_service(&self, node: &NodeId, reg: &ServiceRegistration) -> Result<(), ClientError> {
        let resp = self
            .http
            .delete(format!("{}/services", self.base))
            .header(NODE_ID_HEADER, node.as_str())
            .json(reg)
            .send()
            .await?;
        Self::check(resp).await.map(drop)
    }

    pub async fn state(&self) -> Result<StateDump, ClientError> {
        let resp = self.http.get(format!("{}/state", self.base)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    /// Opens the long-lived snapshot stream; the caller reads lines from the
    /// returned response body.
    pub async fn open_stream(&self, node: &NodeId) -> Result<reqwest::Response, ClientError> {
        let resp = self
            .stream_http
            .get(format!("{}/config/stream", self.base))
            .header(NODE_ID_HEADER, node.as_str())
            .send()
            .await?;
        Self::check(resp).await
    }
}
