use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};

use super::cluster::{Cluster, SYNC_TIMEOUT};
use super::probe::{ProbeOutcome, Prober};
use super::report::{Expectation, ScenarioReport};
use super::HarnessError;
use crate::echo::EchoReply;
use crate::model::{Endpoint, NodeKind};
use crate::proxy::{Listener, ServicePath};
use crate::server::{bind, ServerHandle};
use crate::wire::{NodeRegistration, ServiceRegistration};

pub const PROBES: usize = 100;
pub const RELOCATION_RATE: u32 = 20;
pub const RELOCATION_WINDOW: Duration = Duration::from_secs(10);
const RELOCATION_LEAD: Duration = Duration::from_secs(2);
pub const BALANCED_PROBES: usize = 1000;
pub const BALANCED_ODD_PROBES: usize = 999;

fn satellite(cluster: &Cluster) -> Result<usize, HarnessError> {
    if cluster.nodes.len() < 2 {
        return Err(HarnessError::Topology("scenario needs a satellite node".into()));
    }
    Ok(1)
}

fn all_ok(outcomes: &[ProbeOutcome]) -> (usize, usize) {
    (outcomes.iter().filter(|o| o.is_ok()).count(), outcomes.len())
}

fn sample(lines: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = lines.iter().collect();
    distinct.into_iter().take(8).cloned().collect()
}

/// A and B both on the central node; A calls B through the central egress.
/// With `undeploy_midway` B is removed after half the probes and not
/// replaced, which must make the scenario fail.
pub async fn same_node(cluster: &mut Cluster, undeploy_midway: bool) -> Result<ScenarioReport, HarnessError> {
    let expect = if undeploy_midway { Expectation::Fail } else { Expectation::Pass };
    let id = if undeploy_midway { "same-node-undeploy" } else { "same-node" };
    let mut report = ScenarioReport::new(id, expect);
    let central = cluster.central();
    let label = cluster.nodes[central].spec.label.clone();

    cluster.deploy_echo(central, "A").await?;
    let b_port = cluster.deploy_echo(central, "B").await?;
    report.place("A", &label);
    report.place("B", &label);
    report.versions_observed.push(cluster.sync().await?);

    let proxy = cluster.nodes[central].proxy().expect("central proxy");
    proxy.upstream_log().clear();
    let url = cluster.egress_url(central, "B", "value");
    let prober = Prober::new();
    let mut outcomes = prober.probe_n(&url, "B", PROBES / 2).await;
    if undeploy_midway {
        cluster.undeploy(central, "B").await?;
        report.versions_observed.push(cluster.sync().await?);
    }
    outcomes.extend(prober.probe_n(&url, "B", PROBES - PROBES / 2).await);
    report.tally(&outcomes);

    let (ok, n) = all_ok(&outcomes);
    report.check("all probes succeed", ok == n && n == PROBES, format!("{ok}/{n}"));

    let proxy = cluster.nodes[central].proxy().expect("central proxy");
    let lines = proxy.upstream_log().lines(Listener::Egress);
    let expected = format!("GET 127.0.0.1:{b_port}/value");
    let loopback = lines.iter().filter(|l| **l == expected).count();
    report.check(
        "egress forwards to loopback with prefix stripped",
        loopback == PROBES && lines.len() == PROBES,
        format!("{loopback}/{} upstream lines equal `{expected}`", lines.len()),
    );
    report.captures = sample(&lines);
    Ok(report)
}

/// A on central, B and C on the satellite. Probes for B must cross to the
/// satellite's ingress and never reach C. With `kill_satellite_proxy` the
/// satellite data plane is down and the probes must fail.
pub async fn cross_node(cluster: &mut Cluster, kill_satellite_proxy: bool) -> Result<ScenarioReport, HarnessError> {
    let expect = if kill_satellite_proxy { Expectation::Fail } else { Expectation::Pass };
    let id = if kill_satellite_proxy { "cross-node-proxy-down" } else { "cross-node" };
    let mut report = ScenarioReport::new(id, expect);
    let central = cluster.central();
    let sat = satellite(cluster)?;
    let central_label = cluster.nodes[central].spec.label.clone();
    let sat_label = cluster.nodes[sat].spec.label.clone();

    cluster.deploy_echo(central, "A").await?;
    let b_port = cluster.deploy_echo(sat, "B").await?;
    cluster.deploy_echo(sat, "C").await?;
    report.place("A", &central_label);
    report.place("B", &sat_label);
    report.place("C", &sat_label);
    report.versions_observed.push(cluster.sync().await?);

    let sat_ingress = cluster.nodes[sat].ingress_endpoint();
    cluster.nodes[central].proxy().expect("central proxy").upstream_log().clear();
    if let Some(p) = cluster.nodes[sat].proxy() {
        p.upstream_log().clear();
    }
    if kill_satellite_proxy {
        cluster.kill_proxy(sat).await;
    }

    let prober = Prober::new();
    let outcomes = prober.probe_n(&cluster.egress_url(central, "B", "value"), "B", PROBES).await;
    report.tally(&outcomes);
    let (ok, n) = all_ok(&outcomes);
    report.check("all probes to B succeed", ok == n && n == PROBES, format!("{ok}/{n}"));

    let reached_c = outcomes.iter().filter_map(ProbeOutcome::reply).filter(|r| r.service == "C").count();
    report.check("no probe for B reaches C", reached_c == 0, format!("{reached_c} replies from C"));

    let c_outcomes = prober.probe_n(&cluster.egress_url(central, "C", "value"), "C", 10).await;
    let (c_ok, c_n) = all_ok(&c_outcomes);
    report.check("probes for C reach C", c_ok == c_n, format!("{c_ok}/{c_n}"));

    let egress_lines = cluster.nodes[central].proxy().expect("central proxy").upstream_log().lines(Listener::Egress);
    let want_egress = format!("GET {sat_ingress}/s/B/value");
    let hop = egress_lines.iter().filter(|l| **l == want_egress).count();
    report.check(
        "central egress forwards to satellite ingress with prefix kept",
        hop == PROBES,
        format!("{hop}/{PROBES} upstream lines equal `{want_egress}`"),
    );
    let ingress_lines = cluster.nodes[sat]
        .proxy()
        .map(|p| p.upstream_log().lines(Listener::Ingress))
        .unwrap_or_default();
    let want_ingress = format!("GET 127.0.0.1:{b_port}/value");
    let local = ingress_lines.iter().filter(|l| **l == want_ingress).count();
    report.check(
        "satellite ingress forwards to local B with prefix stripped",
        local == PROBES,
        format!("{local}/{PROBES} upstream lines equal `{want_ingress}`"),
    );
    report.captures = sample(&egress_lines);
    report.captures.extend(sample(&ingress_lines));
    Ok(report)
}

/// Moves B from the satellite to the central node while A keeps probing it
/// through the central egress. Make-before-break must not drop a single
/// probe; the inverted order is the negative control.
pub async fn relocation(cluster: &mut Cluster, break_before_make: bool) -> Result<ScenarioReport, HarnessError> {
    let expect = if break_before_make { Expectation::Fail } else { Expectation::Pass };
    let id = if break_before_make { "relocation-break-before-make" } else { "relocation" };
    let mut report = ScenarioReport::new(id, expect);
    let central = cluster.central();
    let sat = satellite(cluster)?;
    let central_label = cluster.nodes[central].spec.label.clone();
    let sat_label = cluster.nodes[sat].spec.label.clone();

    cluster.deploy_echo(central, "A").await?;
    cluster.deploy_echo(sat, "B").await?;
    report.place("A", &central_label);
    report.versions_observed.push(cluster.sync().await?);

    let a_pid = cluster.nodes[central].orchestrator.service("A").and_then(|s| s.pid());
    let before = cluster.nodes[central].snapshot().and_then(|s| s.egress.routes.get("B").cloned());
    let sat_ingress = cluster.nodes[sat].ingress_endpoint();

    // A's only configuration is the egress URL it calls; it never changes.
    let url = cluster.egress_url(central, "B", "value");
    let probe_url = url.clone();
    let prober = Prober::new();
    let started = Instant::now();
    let stream = tokio::spawn(async move {
        prober.probe_stream(&probe_url, "B", RELOCATION_RATE, RELOCATION_WINDOW).await
    });

    tokio::time::sleep(RELOCATION_LEAD).await;
    if break_before_make {
        cluster.undeploy(sat, "B").await?;
        report.versions_observed.push(cluster.sync().await?);
        cluster.deploy_echo(central, "B").await?;
        report.versions_observed.push(cluster.sync().await?);
    } else {
        cluster.deploy_echo(central, "B").await?;
        // Confirmed once every proxy serves the new instance.
        report.versions_observed.push(cluster.sync().await?);
        cluster.undeploy(sat, "B").await?;
        report.versions_observed.push(cluster.sync().await?);
    }
    report.place("B", &format!("{sat_label} -> {central_label}"));
    let relocated_at = started.elapsed();

    let outcomes = stream.await.map_err(|e| HarnessError::Scenario(e.to_string()))?;
    report.tally(&outcomes);
    report.check(
        "zero failed probes",
        report.failures == 0,
        format!("{} failures over {} probes (relocated after {} ms)", report.failures, report.total_probes, relocated_at.as_millis()),
    );

    let tags: Vec<&str> = outcomes.iter().filter_map(ProbeOutcome::reply).map(|r| r.instance.as_str()).collect();
    let flipped = tags.first() != tags.last() && tags.len() >= 2;
    report.check(
        "serving instance changes",
        flipped,
        format!("first {:?}, last {:?}", tags.first(), tags.last()),
    );

    let a_pid_after = cluster.nodes[central].orchestrator.service("A").and_then(|s| s.pid());
    report.check(
        "A is not reconfigured",
        a_pid.is_some() && a_pid == a_pid_after && url == cluster.egress_url(central, "B", "value"),
        format!("A pid {a_pid:?} -> {a_pid_after:?}; target {url}"),
    );

    let after = cluster.nodes[central].snapshot().and_then(|s| s.egress.routes.get("B").cloned());
    let was_remote = before.as_deref() == Some(&[sat_ingress][..]);
    let is_local = after.as_ref().is_some_and(|eps| eps.len() == 1 && eps[0].is_loopback());
    report.check(
        "central egress entry for B flips from remote to loopback",
        was_remote && is_local,
        format!("{before:?} -> {after:?}"),
    );
    Ok(report)
}

/// Service S on two nodes, caller on a third: round-robin from one egress
/// listener splits exactly. With `kill_instance_node` one hosting node's
/// proxy is down and the split must fail.
pub async fn balanced(cluster: &mut Cluster, kill_instance_node: bool) -> Result<ScenarioReport, HarnessError> {
    let expect = if kill_instance_node { Expectation::Fail } else { Expectation::Pass };
    let id = if kill_instance_node { "balanced-instance-down" } else { "balanced" };
    let mut report = ScenarioReport::new(id, expect);
    if cluster.nodes.len() < 3 {
        return Err(HarnessError::Topology("balanced scenario needs three nodes".into()));
    }
    let (first, second, caller) = (0, 1, 2);
    let mut tags: BTreeMap<Endpoint, String> = BTreeMap::new();
    let prober = Prober::new();
    for idx in [first, second] {
        let port = cluster.deploy_echo(idx, "S").await?;
        report.place(&format!("S@{}", cluster.nodes[idx].spec.label), &cluster.nodes[idx].spec.label);
        let direct = prober.probe(&format!("http://127.0.0.1:{port}/value"), "S").await;
        let tag = direct.reply().map(|r| r.instance.clone()).ok_or_else(|| {
            HarnessError::Scenario(format!("S on {} does not answer", cluster.nodes[idx].spec.label))
        })?;
        tags.insert(cluster.nodes[idx].ingress_endpoint(), tag);
    }
    report.place("caller", &cluster.nodes[caller].spec.label.clone());
    report.versions_observed.push(cluster.sync().await?);

    let order: Vec<Endpoint> = cluster.nodes[caller]
        .snapshot()
        .and_then(|s| s.egress.routes.get("S").cloned())
        .unwrap_or_default();
    let order_tags: Vec<String> = order.iter().filter_map(|e| tags.get(e).cloned()).collect();
    report.check(
        "caller egress lists both instances",
        order_tags.len() == 2,
        format!("{order:?}"),
    );
    if kill_instance_node {
        cluster.kill_proxy(second).await;
    }

    let url = cluster.egress_url(caller, "S", "value");
    let count = |outcomes: &[ProbeOutcome], tag: &str| {
        outcomes.iter().filter_map(ProbeOutcome::reply).filter(|r| r.instance == tag).count()
    };
    let even = prober.probe_n(&url, "S", BALANCED_PROBES).await;
    let odd = prober.probe_n(&url, "S", BALANCED_ODD_PROBES).await;
    report.tally(&even);
    report.tally(&odd);

    if order_tags.len() == 2 {
        let split = (count(&even, &order_tags[0]), count(&even, &order_tags[1]));
        report.check("1000 probes split 500/500", split == (500, 500), format!("{split:?}"));
        let split = (count(&odd, &order_tags[0]), count(&odd, &order_tags[1]));
        report.check("999 probes split 500/499 in list order", split == (500, 499), format!("{split:?}"));
    }
    Ok(report)
}

#[derive(Debug, Default)]
struct Gateway {
    served: AtomicU64,
}

/// Stand-in for a cloud API gateway: answers any `/s/<name>/...` request
/// as service `<name>`.
async fn gateway(State(gw): State<Arc<Gateway>>, req: Request) -> Response {
    let Some(target) = ServicePath::parse(req.uri().path()) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let value = gw.served.fetch_add(1, Ordering::SeqCst) + 1;
    Json(EchoReply { service: target.service.to_string(), instance: "cloud-gateway".into(), value }).into_response()
}

/// Registers a stub gateway as a cloud node hosting W and calls W from an
/// HPC node. With `deregister` W is removed first and the probes must fail.
pub async fn cloud(cluster: &mut Cluster, deregister: bool) -> Result<ScenarioReport, HarnessError> {
    let expect = if deregister { Expectation::Fail } else { Expectation::Pass };
    let id = if deregister { "cloud-deregistered" } else { "cloud" };
    let mut report = ScenarioReport::new(id, expect);
    let spec = cluster
        .topology
        .cloud
        .clone()
        .ok_or_else(|| HarnessError::Topology("topology has no cloud gateway".into()))?;
    let listener = bind(SocketAddr::new(spec.address, spec.port)).await?;
    let router = Router::new().fallback(gateway).with_state(Arc::new(Gateway::default()));
    let stub = ServerHandle::spawn(listener, router).map_err(|e| HarnessError::Scenario(e.to_string()))?;

    let result = cloud_inner(cluster, &mut report, &spec, deregister).await;
    stub.shutdown().await;
    result.map(|()| report)
}

async fn cloud_inner(
    cluster: &mut Cluster,
    report: &mut ScenarioReport,
    spec: &super::topology::CloudSpec,
    deregister: bool,
) -> Result<(), HarnessError> {
    let client = cluster.client().clone();
    let cloud_id = client
        .register_node(&NodeRegistration {
            ip: spec.address.to_string(),
            kind: NodeKind::Cloud,
            ingress_port: u64::from(spec.port),
        })
        .await?;
    let w = ServiceRegistration { name: "W".into(), port: u64::from(spec.port) };
    client.register_service(&cloud_id, &w).await?;
    report.place("W", &format!("cloud {}:{}", spec.address, spec.port));
    report.versions_observed.push(cluster.sync().await?);

    let gw_endpoint = Endpoint::new(spec.address, spec.port);
    let everywhere = cluster.nodes.iter().all(|n| {
        n.snapshot()
            .and_then(|s| s.egress.routes.get("W").cloned())
            .is_some_and(|eps| eps == [gw_endpoint])
    });
    report.check("W in every HPC egress table", everywhere, format!("expected [{gw_endpoint}]"));

    let rejected = client.open_stream(&cloud_id).await.err().and_then(|e| e.status());
    let subscribed = cluster.plane().is_subscribed(&cloud_id);
    report.check(
        "cloud node cannot subscribe",
        rejected == Some(403) && !subscribed,
        format!("status {rejected:?}, session present: {subscribed}"),
    );

    if deregister {
        client.deregister_service(&cloud_id, &w).await?;
        report.versions_observed.push(cluster.sync().await?);
    }
    let central = cluster.central();
    let outcomes = Prober::new().probe_n(&cluster.egress_url(central, "W", "value"), "W", PROBES).await;
    report.tally(&outcomes);
    let (ok, n) = all_ok(&outcomes);
    report.check("all probes reach the gateway", ok == n && n == PROBES, format!("{ok}/{n}"));
    let lines = cluster.nodes[central].proxy().expect("central proxy").upstream_log().lines(Listener::Egress);
    report.captures = sample(&lines);
    Ok(())
}

/// Result of [`propagation`]: per mutation, the slowest proxy's apply delay.
#[derive(Debug, Clone)]
pub struct PropagationReport {
    pub delays: Vec<Option<Duration>>,
    pub bound: Duration,
}

impl PropagationReport {
    pub fn within_bound(&self) -> usize {
        self.delays.iter().filter(|d| d.is_some_and(|d| d <= self.bound)).count()
    }

    pub fn max_delay(&self) -> Option<Duration> {
        self.delays.iter().flatten().max().copied()
    }
}

/// Applies `mutations` registry changes through the HTTP API and measures,
/// for each, how long until every proxy has applied a snapshot at least as
/// new as the mutation.
pub async fn propagation(cluster: &mut Cluster, mutations: usize) -> Result<PropagationReport, HarnessError> {
    let sat = satellite(cluster).unwrap_or(0);
    let node = cluster.nodes[sat].node_id().clone();
    let client = cluster.client().clone();
    let port = cluster.allocate_port()?;
    let reg = ServiceRegistration { name: "propagation-probe".into(), port: u64::from(port) };
    let mut delays = Vec::with_capacity(mutations);
    for i in 0..mutations {
        let sent = Instant::now();
        if i % 2 == 0 {
            client.register_service(&node, &reg).await?;
        } else {
            client.deregister_service(&node, &reg).await?;
        }
        // Mutations are serialized, so the version read now covers this one.
        let version = cluster.plane().version();
        let mut slowest = Some(Duration::ZERO);
        for n in &cluster.nodes {
            let Some(proxy) = n.proxy() else { continue };
            if proxy.wait_for_version(version, SYNC_TIMEOUT * 2).await {
                slowest = slowest.map(|d| d.max(sent.elapsed()));
            } else {
                slowest = None;
            }
        }
        delays.push(slowest);
    }
    Ok(PropagationReport { delays, bound: SYNC_TIMEOUT })
}
