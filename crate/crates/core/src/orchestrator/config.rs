use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::validate_service_name;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed deployment config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate service name {0:?}")]
    DuplicateName(String),
    #[error("duplicate port {0}")]
    DuplicatePort(u16),
    #[error("invalid service entry {name:?}: {reason}")]
    InvalidEntry { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredRole {
    Central,
    Satellite,
}

/// One service the node should run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub name: String,
    pub port: u16,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

/// Where this node's proxy listens and how it announces itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSection {
    pub address: String,
    #[serde(default = "default_egress")]
    pub egress_port: u16,
    #[serde(default = "default_ingress")]
    pub ingress_port: u16,
}

fn default_egress() -> u16 {
    crate::proxy::DEFAULT_EGRESS_PORT
}

fn default_ingress() -> u16 {
    crate::proxy::DEFAULT_INGRESS_PORT
}

/// Node-specific deployment file.
///
/// ```toml
/// node_role = "satellite"
/// control_plane = "127.0.0.1:15000"
///
/// [node]
/// address = "127.0.1.2"
/// egress_port = 15011
/// ingress_port = 15016
///
/// [[services]]
/// name = "B"
/// port = 7002
/// command = "carisma-echo"
/// args = ["--name", "B", "--port", "7002"]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub node_role: DeclaredRole,
    pub control_plane: String,
    #[serde(default)]
    pub node: Option<NodeSection>,
    #[serde(default)]
    pub services: Vec<ServiceEntry>,
}

impl DeploymentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: DeploymentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = HashSet::new();
        let mut ports = HashSet::new();
        for entry in &self.services {
            validate_service_name(&entry.name).map_err(|e| ConfigError::InvalidEntry {
                name: entry.name.clone(),
                reason: e.to_string(),
            })?;
            if entry.port == 0 {
                return Err(ConfigError::InvalidEntry { name: entry.name.clone(), reason: "port 0".into() });
            }
            if entry.command.trim().is_empty() {
                return Err(ConfigError::InvalidEntry { name: entry.name.clone(), reason: "empty command".into() });
            }
            if !names.insert(entry.name.as_str()) {
                return Err(ConfigError::DuplicateName(entry.name.clone()));
            }
            if !ports.insert(entry.port) {
                return Err(ConfigError::DuplicatePort(entry.port));
            }
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<DeploymentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    DeploymentConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"
node_role = "central"
control_plane = "127.0.0.1:15000"

[[services]]
name = "A"
port = 7001
command = "carisma-echo"
args = ["--name", "A", "--port", "7001"]

[[services]]
name = "C"
port = 7003
command = "carisma-echo"
"#;

    #[test]
    fn parses_two_services() {
        let cfg = DeploymentConfig::parse(TWO).unwrap();
        assert_eq!(cfg.services.len(), 2);
        assert_eq!(cfg.node_role, DeclaredRole::Central);
        assert!(cfg.services[1].args.is_empty());
        assert!(cfg.node.is_none());
    }

    #[test]
    fn duplicate_port_rejected() {
        let text = TWO.replace("port = 7003", "port = 7001");
        assert!(matches!(DeploymentConfig::parse(&text), Err(ConfigError::DuplicatePort(7001))));
    }

    #[test]
    fn duplicate_name_rejected() {
        let text = TWO.replace("name = \"C\"", "name = \"A\"");
        assert!(matches!(DeploymentConfig::parse(&text), Err(ConfigError::DuplicateName(_))));
    }

    #[test]
    fn empty_services_is_valid() {
        let cfg = DeploymentConfig::parse("node_role = \"satellite\"\ncontrol_plane = \"cp:1\"\n").unwrap();
        assert!(cfg.services.is_empty());
    }

    #[test]
    fn malformed_entries() {
        assert!(matches!(DeploymentConfig::parse("node_role = 3"), Err(ConfigError::Parse(_))));
        let bad = TWO.replace("name = \"C\"", "name = \"x/y\"");
        assert!(matches!(DeploymentConfig::parse(&bad), Err(ConfigError::InvalidEntry { .. })));
        assert!(matches!(load_config("/nonexistent/carisma.toml"), Err(ConfigError::Io { .. })));
    }

    #[test]
    fn node_section_defaults() {
        let cfg = DeploymentConfig::parse(
            "node_role = \"central\"\ncontrol_plane = \"cp:1\"\n[node]\naddress = \"127.0.1.1\"\n",
        )
        .unwrap();
        let node = cfg.node.unwrap();
        assert_eq!((node.egress_port, node.ingress_port), (15001, 15006));
    }
}
