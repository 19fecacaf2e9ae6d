use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;

const CAPACITY: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Listener {
    Egress,
    Ingress,
}

/// One request line as sent upstream, e.g. `GET 127.0.0.1:7002/value`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedRequest {
    pub listener: Listener,
    pub method: String,
    pub authority: String,
    pub path: String,
}

impl fmt::Display for CapturedRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}{}", self.method, self.authority, self.path)
    }
}

/// Bounded record of the most recent upstream requests of one proxy.
#[derive(Debug, Default)]
pub struct UpstreamLog {
    entries: Mutex<VecDeque<CapturedRequest>>,
}

impl UpstreamLog {
    pub fn record(&self, entry: CapturedRequest) {
        let mut entries = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        if entries.len() == CAPACITY {
            entries.pop_front();
        }
        entries.push_back(entry);
    }

    pub fn entries(&self) -> Vec<CapturedRequest> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).iter().cloned().collect()
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).clear();
    }

    pub fn lines(&self, listener: Listener) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter(|e| e.listener == listener)
            .map(|e| e.to_string())
            .collect()
    }
}
