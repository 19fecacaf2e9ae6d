use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{DeploymentConfig, ServiceEntry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Deploy(ServiceEntry),
    Undeploy { name: String },
}

/// Actions that turn `current` into `desired`.
///
/// New services are deployed before anything is removed. Entries are
/// compared as a whole; since a name can only be managed once per node, a
/// changed entry is undeployed before its replacement is started.
pub fn plan<'a>(current: impl IntoIterator<Item = &'a ServiceEntry>, desired: &DeploymentConfig) -> Vec<Action> {
    let current: BTreeMap<&str, &ServiceEntry> = current.into_iter().map(|e| (e.name.as_str(), e)).collect();
    let wanted: BTreeMap<&str, &ServiceEntry> = desired.services.iter().map(|e| (e.name.as_str(), e)).collect();

    let mut deploys = Vec::new();
    let mut undeploys = Vec::new();
    let mut replacements = Vec::new();
    for (name, entry) in &wanted {
        match current.get(name) {
            None => deploys.push(Action::Deploy((*entry).clone())),
            Some(existing) if existing != entry => {
                replacements.push(Action::Undeploy { name: name.to_string() });
                replacements.push(Action::Deploy((*entry).clone()));
            }
            Some(_) => {}
        }
    }
    for name in current.keys() {
        if !wanted.contains_key(name) {
            undeploys.push(Action::Undeploy { name: name.to_string() });
        }
    }
    deploys.into_iter().chain(replacements).chain(undeploys).collect()
}
