use std::net::SocketAddr;
use std::path::Path;
use std::process::Stdio;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::net::TcpStream;
use tokio::process::Command;
use tokio::sync::Mutex;

use carisma_core::client::ControlPlaneClient;
use carisma_core::control_plane::{ControlPlane, ControlPlaneServer};
use carisma_core::harness::{Cluster, PortAllocator, Prober, ProbeOutcome, Topology};
use carisma_core::model::{NodeId, ServiceInstance};
use carisma_core::orchestrator::{
    admin_router, Action, DeploymentConfig, NodeSetup, Orchestrator, OrchestratorError, ServiceEntry, ServiceState,
    Timing,
};
use carisma_core::server::{bind, ServerHandle};

const ECHO: &str = env!("CARGO_BIN_EXE_carisma-echo");
const ORCH: &str = env!("CARGO_BIN_EXE_carisma-orch");

fn fast() -> Timing {
    Timing {
        probe_attempts: 20,
        probe_interval: Duration::from_millis(50),
        drain: Duration::from_millis(300),
        registration_attempts: 3,
        registration_backoff: Duration::from_millis(50),
    }
}

fn echo_entry(name: &str, port: u16) -> ServiceEntry {
    ServiceEntry {
        name: name.into(),
        port,
        command: ECHO.into(),
        args: vec!["--name".into(), name.into(), "--port".into(), port.to_string()],
    }
}

async fn control_plane(ports: &mut PortAllocator) -> ControlPlaneServer {
    let port = ports.claim().unwrap();
    ControlPlane::new().serve(SocketAddr::from(([127, 0, 0, 1], port))).await.unwrap()
}

async fn node(cp: &ControlPlaneServer, address: &str, ports: &mut PortAllocator, timing: Timing) -> Orchestrator {
    let setup = NodeSetup::hpc(address, ports.claim().unwrap(), ports.claim().unwrap());
    Orchestrator::bootstrap(&cp.local_addr().to_string(), setup, timing).await.unwrap()
}

async fn listening(port: u16) -> bool {
    TcpStream::connect(("127.0.0.1", port)).await.is_ok()
}

fn registry_for(cp: &ControlPlaneServer, node: &NodeId) -> Vec<ServiceInstance> {
    cp.plane().state().services.into_iter().filter(|s| &s.node == node).collect()
}

#[tokio::test]
async fn deploy_registers_only_after_healthy() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    let port = ports.claim().unwrap();

    orch.deploy(echo_entry("B", port)).await.unwrap();
    assert_eq!(orch.service("B").unwrap().state(), ServiceState::Registered);
    assert!(listening(port).await);
    assert_eq!(registry_for(&cp, orch.node_id()), orch.registered_instances());
    let proxy = orch.proxy().unwrap();
    assert!(proxy.wait_for_version(cp.plane().version(), Duration::from_secs(1)).await);
    assert!(proxy.store().load().unwrap().snapshot().egress.routes.contains_key("B"));

    let err = orch.deploy(echo_entry("B", port)).await.unwrap_err();
    assert!(matches!(err, OrchestratorError::AlreadyManaged(_)));
    orch.shutdown().await;
    assert!(cp.plane().state().services.is_empty());
    cp.shutdown().await;
}

#[tokio::test]
async fn command_that_exits_immediately_leaves_registry_untouched() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    let version = cp.plane().version();

    let entry = ServiceEntry { name: "X".into(), port: ports.claim().unwrap(), command: "false".into(), args: vec![] };
    let err = orch.deploy(entry).await.unwrap_err();
    assert!(matches!(err, OrchestratorError::ExitedEarly { .. }), "{err}");
    assert!(orch.service("X").is_none());
    assert_eq!(cp.plane().version(), version);

    let missing = ServiceEntry { name: "Y".into(), port: 1, command: "/nonexistent/bin".into(), args: vec![] };
    assert!(matches!(orch.deploy(missing).await, Err(OrchestratorError::Spawn { .. })));
    assert_eq!(cp.plane().version(), version);
    orch.shutdown().await;
    cp.shutdown().await;
}

#[tokio::test]
async fn process_that_never_listens_is_stopped() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut timing = fast();
    timing.probe_attempts = 4;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, timing).await;
    let version = cp.plane().version();
    let entry =
        ServiceEntry { name: "S".into(), port: ports.claim().unwrap(), command: "sleep".into(), args: vec!["30".into()] };
    assert!(matches!(orch.deploy(entry).await, Err(OrchestratorError::NeverHealthy { .. })));
    assert_eq!(cp.plane().version(), version);
    orch.shutdown().await;
    cp.shutdown().await;
}

#[tokio::test]
async fn control_plane_down_fails_deploy_and_stops_process() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let node_id = cp.plane().register_node(&NodeSetup::hpc("127.0.1.1", 1, 2).registration).unwrap().id;
    let addr = cp.local_addr().to_string();
    let plane = cp.plane().clone();
    cp.shutdown().await;

    let mut orch = Orchestrator::attach(ControlPlaneClient::new(&addr), node_id, fast());
    let port = ports.claim().unwrap();
    let started = Instant::now();
    let err = orch.deploy(echo_entry("B", port)).await.unwrap_err();
    assert!(matches!(err, OrchestratorError::Registration { .. }), "{err}");
    assert!(started.elapsed() >= Duration::from_millis(150), "retried with backoff");
    assert!(orch.service("B").is_none());
    assert!(!listening(port).await, "process stopped after failed registration");
    assert!(plane.state().services.is_empty());
}

#[tokio::test]
async fn undeploy_requires_registration() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    assert!(matches!(orch.undeploy("B").await, Err(OrchestratorError::NotRegistered(_))));
    orch.shutdown().await;
    cp.shutdown().await;
}

#[tokio::test]
async fn failed_deregistration_keeps_process_running() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    let port = ports.claim().unwrap();
    orch.deploy(echo_entry("B", port)).await.unwrap();
    let plane = cp.plane().clone();
    cp.shutdown().await;

    let err = orch.undeploy("B").await.unwrap_err();
    assert!(matches!(err, OrchestratorError::Deregistration { .. }), "{err}");
    assert_eq!(orch.service("B").unwrap().state(), ServiceState::Registered);
    assert!(listening(port).await);
    assert_eq!(plane.state().services.len(), 1);
    orch.kill().await;
}

async fn two_node_cluster() -> Cluster {
    let mut ports = PortAllocator::new();
    let topology = Topology::ephemeral(2, &mut ports).unwrap();
    Cluster::start_with(topology, ECHO.into(), fast()).await.unwrap()
}

#[tokio::test]
async fn route_disappears_before_process_dies() {
    let mut cluster = two_node_cluster().await;
    let port = cluster.deploy_echo(1, "B").await.unwrap();
    cluster.sync().await.unwrap();

    let (caller, host) = cluster.nodes.split_at_mut(1);
    let store = caller[0].proxy().unwrap().store();
    assert!(store.load().unwrap().snapshot().egress.routes.contains_key("B"));
    let mut watch = store.watch_version();

    let undeploy_at = Instant::now();
    let route_gone = async {
        loop {
            watch.changed().await.unwrap();
            if !store.load().unwrap().snapshot().egress.routes.contains_key("B") {
                return undeploy_at.elapsed();
            }
        }
    };
    let process_gone = async {
        while listening(port).await {
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        undeploy_at.elapsed()
    };
    let orch = &mut host[0].orchestrator;
    let (route, death, result) = tokio::join!(route_gone, process_gone, orch.undeploy("B"));
    result.unwrap();
    assert!(route < death, "route removed at {route:?}, process gone at {death:?}");
    assert!(death - route >= Duration::from_millis(200), "drain interval observed: {route:?} -> {death:?}");
    cluster.teardown().await;
}

#[tokio::test]
async fn traffic_during_undeploy_never_hits_a_dead_process() {
    let mut cluster = two_node_cluster().await;
    cluster.deploy_echo(1, "B").await.unwrap();
    cluster.sync().await.unwrap();
    let url = cluster.egress_url(0, "B", "value");
    let prober = Prober::new();

    let probes = prober.probe_stream(&url, "B", 100, Duration::from_millis(1500));
    let undeploy = async {
        tokio::time::sleep(Duration::from_millis(300)).await;
        cluster.nodes[1].orchestrator.undeploy("B").await
    };
    let (outcomes, result) = tokio::join!(probes, undeploy);
    result.unwrap();
    assert!(outcomes.iter().any(ProbeOutcome::is_ok));
    let failures: Vec<_> = outcomes.iter().filter(|o| !o.is_ok()).collect();
    assert!(!failures.is_empty(), "route removal must eventually be visible");
    assert!(
        failures.iter().all(|f| *f == &ProbeOutcome::Failed("503".into())),
        "only no-route failures expected: {failures:?}"
    );
    cluster.teardown().await;
}

#[tokio::test]
async fn admin_apply_reconciles_running_node() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    let node_id = orch.node_id().clone();
    let shared = Arc::new(Mutex::new(orch));
    let admin = ServerHandle::spawn(bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap(), admin_router(shared.clone()))
        .unwrap();
    let url = format!("http://{}/admin/apply", admin.local_addr());
    let http = reqwest::Client::builder().no_proxy().build().unwrap();
    let (pa, pb) = (ports.claim().unwrap(), ports.claim().unwrap());
    let config = |entries: &[ServiceEntry]| {
        let cfg = DeploymentConfig {
            node_role: carisma_core::orchestrator::DeclaredRole::Central,
            control_plane: cp.local_addr().to_string(),
            node: None,
            services: entries.to_vec(),
        };
        toml::to_string(&cfg).unwrap()
    };

    let resp = http.post(&url).body(config(&[echo_entry("A", pa), echo_entry("B", pb)])).send().await.unwrap();
    assert!(resp.status().is_success());
    let results: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(results.as_array().unwrap().len(), 2);
    assert_eq!(registry_for(&cp, &node_id).len(), 2);

    let resp = http.post(&url).body(config(&[echo_entry("A", pa)])).send().await.unwrap();
    let results: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(results[0]["action"], "undeploy");
    assert_eq!(results[0]["name"], "B");
    assert!(results[0]["error"].is_null());
    assert_eq!(registry_for(&cp, &node_id), shared.lock().await.registered_instances());

    let resp = http.post(&url).body(config(&[echo_entry("A", pa)])).send().await.unwrap();
    assert_eq!(resp.json::<serde_json::Value>().await.unwrap(), serde_json::json!([]));

    let resp = http.post(&url).body("services = 3").send().await.unwrap();
    assert_eq!(resp.status(), reqwest::StatusCode::BAD_REQUEST);

    admin.shutdown().await;
    Arc::try_unwrap(shared).unwrap().into_inner().shutdown().await;
    assert!(cp.plane().state().services.is_empty());
    cp.shutdown().await;
}

#[tokio::test]
async fn reconcile_plan_expresses_replacement_as_undeploy_then_deploy() {
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let mut orch = node(&cp, "127.0.1.1", &mut ports, fast()).await;
    let (p1, p2) = (ports.claim().unwrap(), ports.claim().unwrap());
    let desired = |e: ServiceEntry| DeploymentConfig {
        node_role: carisma_core::orchestrator::DeclaredRole::Central,
        control_plane: cp.local_addr().to_string(),
        node: None,
        services: vec![e],
    };
    orch.reconcile(&desired(echo_entry("B", p1))).await;
    let results = orch.reconcile(&desired(echo_entry("B", p2))).await;
    let actions: Vec<_> = results.iter().map(|r| r.action.clone()).collect();
    assert_eq!(actions, [Action::Undeploy { name: "B".into() }, Action::Deploy(echo_entry("B", p2))]);
    assert!(results.iter().all(|r| r.error.is_none()));
    assert_eq!(registry_for(&cp, orch.node_id()), orch.registered_instances());
    assert_eq!(orch.registered_instances()[0].port, p2);
    orch.shutdown().await;
    cp.shutdown().await;
}

fn write_config(dir: &Path, file: &str, cp: &str, node: Option<(&str, u16, u16)>, services: &[ServiceEntry]) -> String {
    let cfg = DeploymentConfig {
        node_role: carisma_core::orchestrator::DeclaredRole::Central,
        control_plane: cp.to_string(),
        node: node.map(|(address, egress_port, ingress_port)| carisma_core::orchestrator::NodeSection {
            address: address.into(),
            egress_port,
            ingress_port,
        }),
        services: services.to_vec(),
    };
    let path = dir.join(file);
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

async fn run_orch(args: &[&str]) -> Option<i32> {
    let mut child = Command::new(ORCH)
        .args(args)
        .env("RUST_LOG", "off")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .unwrap();
    tokio::time::timeout(Duration::from_secs(20), child.wait()).await.expect("exits").unwrap().code()
}

#[tokio::test]
async fn binary_exit_codes_and_apply() {
    let dir = tempfile::tempdir().unwrap();
    let mut ports = PortAllocator::new();
    let cp = control_plane(&mut ports).await;
    let cp_addr = cp.local_addr().to_string();
    let admin = format!("127.0.0.1:{}", ports.claim().unwrap());
    let (egress, ingress) = (ports.claim().unwrap(), ports.claim().unwrap());
    let (pa, pb) = (ports.claim().unwrap(), ports.claim().unwrap());
    let node = Some(("127.0.1.1", egress, ingress));

    let dup = write_config(dir.path(), "dup.toml", &cp_addr, node, &[echo_entry("A", pa), echo_entry("B", pa)]);
    assert_eq!(run_orch(&["--config", &dup, "--admin", &admin]).await, Some(2));
    assert_eq!(run_orch(&["--config", "/nonexistent.toml", "--admin", &admin]).await, Some(1));

    let dead_cp = format!("127.0.0.1:{}", ports.claim().unwrap());
    let good = write_config(dir.path(), "good.toml", &cp_addr, node, &[echo_entry("A", pa)]);
    assert_eq!(run_orch(&["--config", &good, "--control-plane", &dead_cp, "--admin", &admin]).await, Some(1));
    assert_eq!(cp.plane().version(), 0);

    let mut daemon = Command::new(ORCH)
        .args(["--config", &good, "--admin", &admin])
        .env("RUST_LOG", "off")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while cp.plane().state().services.is_empty() || !listening_addr(&admin).await {
        assert!(Instant::now() < deadline, "daemon did not come up");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let node_id = cp.plane().state().nodes.keys().next().unwrap().clone();
    assert!(cp.plane().is_subscribed(&node_id), "daemon runs the node proxy");

    let both = write_config(dir.path(), "both.toml", &cp_addr, node, &[echo_entry("A", pa), echo_entry("B", pb)]);
    assert_eq!(run_orch(&["--apply", &both, "--admin", &admin]).await, Some(0));
    let names: Vec<String> = cp.plane().state().services.into_iter().map(|s| s.name).collect();
    assert_eq!(names, ["A", "B"]);
    assert_eq!(run_orch(&["--apply", &dup, "--admin", &admin]).await, Some(2));

    Command::new("kill").args(["-INT", &daemon.id().unwrap().to_string()]).status().await.unwrap();
    let status = tokio::time::timeout(Duration::from_secs(10), daemon.wait()).await.unwrap().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(cp.plane().state().services.is_empty(), "clean shutdown deregisters");
    assert!(!listening(pa).await && !listening(pb).await);
    cp.shutdown().await;
}

async fn listening_addr(addr: &str) -> bool {
    TcpStream::connect(addr).await.is_ok()
}
