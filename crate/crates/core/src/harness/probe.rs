use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::time::MissedTickBehavior;

use crate::echo::EchoReply;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Ok(EchoReply),
    /// HTTP status code, or `transport` when no response arrived.
    Failed(String),
}

impl ProbeOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, ProbeOutcome::Ok(_))
    }

    pub fn reply(&self) -> Option<&EchoReply> {
        match self {
            ProbeOutcome::Ok(r) => Some(r),
            ProbeOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prober {
    http: reqwest::Client,
}

impl Default for Prober {
    fn default() -> Self {
        Self::new()
    }
}

impl Prober {
    pub fn new() -> Self {
        let http = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(1))
            .timeout(Duration::from_secs(3))
            .build()
            .expect("http client");
        Prober { http }
    }

    /// A probe succeeds on a 200 carrying a reply from the expected service.
    pub async fn probe(&self, url: &str, service: &str) -> ProbeOutcome {
        let resp = match self.http.get(url).send().await {
            Ok(resp) => resp,
            Err(_) => return ProbeOutcome::Failed("transport".into()),
        };
        let status = resp.status();
        if !status.is_success() {
            return ProbeOutcome::Failed(status.as_u16().to_string());
        }
        match resp.json::<EchoReply>().await {
            Ok(reply) if reply.service == service => ProbeOutcome::Ok(reply),
            Ok(reply) => ProbeOutcome::Failed(format!("wrong service {}", reply.service)),
            Err(_) => ProbeOutcome::Failed("bad body".into()),
        }
    }

    pub async fn probe_n(&self, url: &str, service: &str, n: usize) -> Vec<ProbeOutcome> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.probe(url, service).await);
        }
        out
    }

    /// Probes at a fixed rate for `duration`, one request at a time.
    pub async fn probe_stream(&self, url: &str, service: &str, rate_per_sec: u32, duration: Duration) -> Vec<ProbeOutcome> {
        let mut ticker = tokio::time::interval(Duration::from_secs(1) / rate_per_sec);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let start = Instant::now();
        let mut out = Vec::new();
        while start.elapsed() < duration {
            ticker.tick().await;
            out.push(self.probe(url, service).await);
        }
        out
    }
}
