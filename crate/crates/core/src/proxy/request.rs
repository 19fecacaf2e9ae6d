//! Service addressing: callers name their target with a `/s/<name>/<tail>`
//! path prefix on both listeners.

use crate::model::Endpoint;

pub const SERVICE_PREFIX: &str = "/s/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServicePath<'a> {
    pub service: &'a str,
    /// Remainder after the service segment, without its leading slash.
    pub tail: &'a str,
}

impl<'a> ServicePath<'a> {
    pub fn parse(path: &'a str) -> Option<Self> {
        let rest = path.strip_prefix(SERVICE_PREFIX)?;
        let (service, tail) = rest.split_once('/').unwrap_or((rest, ""));
        if service.is_empty() {
            return None;
        }
        Some(ServicePath { service, tail })
    }

    /// Path for a service listening on the local machine: prefix stripped.
    pub fn local_path(&self) -> String {
        format!("/{}", self.tail)
    }

    /// Path for a remote ingress listener: prefix kept so it can route.
    pub fn remote_path(&self) -> String {
        format!("{SERVICE_PREFIX}{}/{}", self.service, self.tail)
    }

    /// Upstream path for `endpoint`, choosing the local or remote form.
    pub fn upstream_path(&self, endpoint: &Endpoint) -> String {
        if endpoint.is_loopback() {
            self.local_path()
        } else {
            self.remote_path()
        }
    }
}
