use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::{header, HeaderName, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use tracing::debug;

use super::capture::{CapturedRequest, Listener, UpstreamLog};
use super::request::ServicePath;
use super::table::{ConfigStore, RouteError};
use crate::model::Endpoint;
use crate::wire::ErrorBody;

/// Path on the egress listener that returns the active snapshot.
pub const CONFIG_PATH: &str = "/_carisma/config";

const MAX_BODY: usize = 16 * 1024 * 1024;

#[derive(Debug)]
pub(crate) struct Shared {
    pub store: ConfigStore,
    pub log: UpstreamLog,
    pub http: reqwest::Client,
}

fn error(status: StatusCode, message: impl Into<String>, service: Option<&str>) -> Response {
    let body = match service {
        Some(s) => ErrorBody::for_service(message, s),
        None => ErrorBody::new(message),
    };
    (status, Json(body)).into_response()
}

fn route_error(err: RouteError, service: &str) -> Response {
    let status = match err {
        RouteError::NotConfigured | RouteError::NoRoute => StatusCode::SERVICE_UNAVAILABLE,
        RouteError::NotHosted => StatusCode::NOT_FOUND,
    };
    error(status, err.to_string(), Some(service))
}

fn is_hop_by_hop(name: &HeaderName) -> bool {
    matches!(
        name.as_str(),
        "connection"
            | "keep-alive"
            | "proxy-authenticate"
            | "proxy-authorization"
            | "proxy-connection"
            | "te"
            | "trailer"
            | "transfer-encoding"
            | "upgrade"
    )
}

pub(crate) async fn egress(State(shared): State<Arc<Shared>>, req: Request) -> Response {
    if req.uri().path() == CONFIG_PATH && req.method() == Method::GET {
        return match shared.store.load() {
            Some(cfg) => Json(cfg.snapshot().as_ref().clone()).into_response(),
            None => error(StatusCode::SERVICE_UNAVAILABLE, RouteError::NotConfigured.to_string(), None),
        };
    }
    route(shared, Listener::Egress, req).await
}

pub(crate) async fn ingress(State(shared): State<Arc<Shared>>, req: Request) -> Response {
    route(shared, Listener::Ingress, req).await
}

async fn route(shared: Arc<Shared>, listener: Listener, req: Request) -> Response {
    let path = req.uri().path().to_string();
    let Some(target) = ServicePath::parse(&path) else {
        return error(StatusCode::BAD_REQUEST, "expected /s/<service>/<path>", None);
    };
    // One config per request, even if a swap lands while it is in flight.
    let Some(config) = shared.store.load() else {
        return route_error(RouteError::NotConfigured, target.service);
    };
    let resolved = match listener {
        Listener::Egress => config.resolve_egress(target.service),
        Listener::Ingress => config.resolve_ingress(target.service),
    };
    let endpoint = match resolved {
        Ok(ep) => ep,
        Err(err) => return route_error(err, target.service),
    };
    let mut upstream_path = match listener {
        Listener::Egress => target.upstream_path(&endpoint),
        Listener::Ingress => target.local_path(),
    };
    if let Some(query) = req.uri().query() {
        upstream_path.push('?');
        upstream_path.push_str(query);
    }
    let service = target.service.to_string();
    forward(&shared, listener, &service, endpoint, upstream_path, req).await
}

async fn forward(
    shared: &Shared,
    listener: Listener,
    service: &str,
    endpoint: Endpoint,
    path: String,
    req: Request,
) -> Response {
    let (parts, body) = req.into_parts();
    let body = match axum::body::to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(err) => return error(StatusCode::BAD_REQUEST, format!("request body: {err}"), Some(service)),
    };

    shared.log.record(CapturedRequest {
        listener,
        method: parts.method.to_string(),
        authority: endpoint.to_string(),
        path: path.clone(),
    });
    let url = format!("http://{}{}", endpoint.socket_addr(), path);
    debug!(?listener, %url, "forwarding");

    let mut upstream = shared.http.request(parts.method, &url);
    for (name, value) in &parts.headers {
        if name != header::HOST && !is_hop_by_hop(name) {
            upstream = upstream.header(name, value);
        }
    }
    let resp = match upstream.body(body).send().await {
        Ok(resp) => resp,
        Err(err) => {
            return error(StatusCode::BAD_GATEWAY, format!("upstream {endpoint} failed: {err}"), Some(service));
        }
    };

    let mut out = Response::builder().status(resp.status());
    for (name, value) in resp.headers() {
        if !is_hop_by_hop(name) {
            out = out.header(name, value);
        }
    }
    out.body(Body::from_stream(resp.bytes_stream()))
        .unwrap_or_else(|err| error(StatusCode::BAD_GATEWAY, err.to_string(), Some(service)))
}
