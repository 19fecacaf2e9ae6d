//! Brute-force reference for the per-node views. Works on flat lists and
//! builds the JSON text by hand so nothing is shared with the code under
//! test apart from the input state.

use carisma_core::model::{RegistryState, LOOPBACK};

type Route = (String, Vec<(String, u16)>);

fn triples(state: &RegistryState) -> Vec<(String, String, u16)> {
    state.services.iter().map(|s| (s.name.clone(), s.node.as_str().to_string(), s.port)).collect()
}

fn all_names(state: &RegistryState) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (name, _, _) in triples(state) {
        if !names.contains(&name) {
            names.push(name);
        }
    }
    names.sort();
    names
}

pub fn local_routes(state: &RegistryState, node: &str) -> Vec<Route> {
    let mut routes = Vec::new();
    for name in all_names(state) {
        let mut ports: Vec<u16> = Vec::new();
        for (n, host, port) in triples(state) {
            if n == name && host == node && !ports.contains(&port) {
                ports.push(port);
            }
        }
        if ports.is_empty() {
            continue;
        }
        ports.sort();
        routes.push((name, ports.into_iter().map(|p| (LOOPBACK.to_string(), p)).collect()));
    }
    routes
}

pub fn global_routes(state: &RegistryState, node: &str) -> Vec<Route> {
    let mut routes = Vec::new();
    for name in all_names(state) {
        let hosted_here = triples(state).iter().any(|(n, host, _)| *n == name && host == node);
        if hosted_here {
            continue;
        }
        let mut hosts: Vec<String> = Vec::new();
        for (n, host, _) in triples(state) {
            if n == name && !hosts.contains(&host) {
                hosts.push(host);
            }
        }
        hosts.sort();
        let endpoints = hosts
            .iter()
            .map(|h| {
                let record = state.nodes.values().find(|r| r.id.as_str() == h).expect("hosting node exists");
                (record.address.to_string(), record.ingress_port)
            })
            .collect();
        routes.push((name, endpoints));
    }
    routes
}

pub fn egress_routes(state: &RegistryState, node: &str) -> Vec<Route> {
    let mut routes = local_routes(state, node);
    routes.extend(global_routes(state, node));
    routes.sort_by(|a, b| a.0.cmp(&b.0));
    routes
}

pub fn render(routes: &[Route]) -> String {
    let entries: Vec<String> = routes
        .iter()
        .map(|(name, endpoints)| {
            let eps: Vec<String> =
                endpoints.iter().map(|(addr, port)| format!("{{\"addr\":\"{addr}\",\"port\":{port}}}")).collect();
            format!("\"{name}\":[{}]", eps.join(","))
        })
        .collect();
    format!("{{{}}}", entries.join(","))
}

pub fn snapshot_json(state: &RegistryState, node: &str) -> String {
    format!(
        "{{\"egress\":{},\"ingress\":{},\"node\":\"{node}\",\"version\":{}}}",
        render(&egress_routes(state, node)),
        render(&local_routes(state, node)),
        state.version
    )
}
