//! A per-node service mesh for clusters of in-vehicle compute nodes.
//!
//! One central node runs the [`control_plane`]; every node runs exactly one
//! [`proxy`] with an ingress and an egress listener. The [`orchestrator`]
//! starts services on a node and keeps the registry in sync, and the
//! [`harness`] boots whole clusters on one host to exercise the routing
//! scenarios end to end.

pub mod client;
pub mod control_plane;
pub mod echo;
pub mod harness;
pub mod model;
pub mod orchestrator;
pub mod proxy;
pub mod server;
pub mod wire;
