//! Seeded random registry states.

use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carisma_core::model::{NodeId, NodeKind, NodeRecord, NodeRole, RegistryState, ServiceInstance};

pub const MAX_NODES: usize = 6;
pub const MAX_SERVICES: usize = 12;
pub const MAX_INSTANCES: usize = 3;

/// Up to 6 nodes (at most one of them cloud), up to 12 service names with
/// 1 to 3 instances each. Ports are drawn from a small range so that
/// duplicate triples and same-node replicas occur.
pub fn random_state(seed: u64) -> RegistryState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RegistryState::new();

    let node_count = rng.random_range(1..=MAX_NODES);
    let cloud_at = if node_count > 1 && rng.random_bool(0.3) { Some(node_count - 1) } else { None };
    let mut ids = Vec::new();
    for i in 0..node_count {
        let id = NodeId::new(format!("{:08x}-{i}", rng.random::<u32>()));
        let (kind, role) = match (Some(i) == cloud_at, i) {
            (true, _) => (NodeKind::Cloud, NodeRole::External),
            (false, 0) => (NodeKind::Hpc, NodeRole::Central),
            (false, _) => (NodeKind::Hpc, NodeRole::Satellite),
        };
        state.insert_node(NodeRecord {
            id: id.clone(),
            address: IpAddr::V4(Ipv4Addr::new(10, 0, rng.random_range(0..4), i as u8 + 1)),
            kind,
            role,
            ingress_port: rng.random_range(15000..15010),
        });
        ids.push(id);
    }

    let service_count = rng.random_range(0..=MAX_SERVICES);
    for s in 0..service_count {
        let name = format!("svc-{s}");
        for _ in 0..rng.random_range(1..=MAX_INSTANCES) {
            let node = ids[rng.random_range(0..ids.len())].clone();
            let port = rng.random_range(7000..7008);
            state.add_service(ServiceInstance { name: name.clone(), node, port }).expect("valid instance");
        }
    }
    state
}
