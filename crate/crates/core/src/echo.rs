//! Value-serving test service: `GET /value` returns its name, a per-process
//! instance tag and a request counter.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::server::{bind, BindError, ServerHandle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoReply {
    pub service: String,
    pub instance: String,
    pub value: u64,
}

#[derive(Debug)]
struct Echo {
    service: String,
    instance: String,
    counter: AtomicU64,
}

/// Tag that tells replicas of the same service apart.
pub fn instance_tag(service: &str) -> String {
    let random = uuid::Uuid::new_v4().simple().to_string();
    format!("{service}-{}-{}", std::process::id(), &random[..8])
}

pub fn router(service: &str, instance: String) -> Router {
    let echo = Arc::new(Echo { service: service.to_string(), instance, counter: AtomicU64::new(0) });
    Router::new().route("/value", get(value)).with_state(echo)
}

async fn value(State(echo): State<Arc<Echo>>) -> Json<EchoReply> {
    let value = echo.counter.fetch_add(1, Ordering::SeqCst) + 1;
    Json(EchoReply { service: echo.service.clone(), instance: echo.instance.clone(), value })
}

pub async fn serve(service: &str, addr: SocketAddr, instance: Option<String>) -> Result<ServerHandle, BindError> {
    let listener = bind(addr).await?;
    let instance = instance.unwrap_or_else(|| instance_tag(service));
    ServerHandle::spawn(listener, router(service, instance)).map_err(|source| BindError {
        addr,
        port: addr.port(),
        source,
    })
}
