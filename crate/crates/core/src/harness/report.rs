use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::probe::ProbeOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Pass,
    /// Negative control: the scenario's own assertions must fail.
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one scenario run. Field order is stable for diffing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub expect: Expectation,
    pub placement: BTreeMap<String, String>,
    pub total_probes: u64,
    pub per_endpoint: BTreeMap<String, u64>,
    pub failures: u64,
    pub failure_kinds: BTreeMap<String, u64>,
    pub versions_observed: Vec<u64>,
    pub captures: Vec<String>,
    pub assertions: Vec<Assertion>,
    pub duration_ms: u64,
}

impl ScenarioReport {
    pub fn new(scenario: impl Into<String>, expect: Expectation) -> Self {
        ScenarioReport {
            scenario: scenario.into(),
            expect,
            placement: BTreeMap::new(),
            total_probes: 0,
            per_endpoint: BTreeMap::new(),
            failures: 0,
            failure_kinds: BTreeMap::new(),
            versions_observed: Vec::new(),
            captures: Vec::new(),
            assertions: Vec::new(),
            duration_ms: 0,
        }
    }

    pub fn place(&mut self, service: &str, node: &str) {
        self.placement.insert(service.to_string(), node.to_string());
    }

    pub fn tally<'a>(&mut self, outcomes: impl IntoIterator<Item = &'a ProbeOutcome>) {
        for outcome in outcomes {
            self.total_probes += 1;
            match outcome {
                ProbeOutcome::Ok(reply) => *self.per_endpoint.entry(reply.instance.clone()).or_default() += 1,
                ProbeOutcome::Failed(kind) => {
                    self.failures += 1;
                    *self.failure_kinds.entry(kind.clone()).or_default() += 1;
                }
            }
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> bool {
        self.assertions.push(Assertion { name: name.into(), passed, detail: detail.into() });
        passed
    }

    /// All of the scenario's own assertions held.
    pub fn passed(&self) -> bool {
        !self.assertions.is_empty() && self.assertions.iter().all(|a| a.passed)
    }

    /// The run behaved as expected: nominal scenarios passed, negative
    /// controls failed.
    pub fn as_expected(&self) -> bool {
        match self.expect {
            Expectation::Pass => self.passed(),
            Expectation::Fail => !self.passed(),
        }
    }

    /// Probe accounting is closed: every probe is a success or a failure.
    pub fn is_consistent(&self) -> bool {
        self.failures + self.per_endpoint.values().sum::<u64>() == self.total_probes
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.as_expected() { "ok" } else { "UNEXPECTED" };
        let outcome = if self.passed() { "pass" } else { "fail" };
        writeln!(
            f,
            "{} [{outcome}, expected {:?}] {verdict}: {} probes, {} failures, {} ms",
            self.scenario, self.expect, self.total_probes, self.failures, self.duration_ms
        )?;
        for a in &self.assertions {
            writeln!(f, "    [{}] {}: {}", if a.passed { "x" } else { " " }, a.name, a.detail)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::EchoReply;

    #[test]
    fn tally_and_expectations() {
        let ok = |tag: &str| ProbeOutcome::Ok(EchoReply { service: "B".into(), instance: tag.into(), value: 1 });
        let outcomes = vec![ok("b1"), ok("b2"), ok("b1"), ProbeOutcome::Failed("503".into())];
        let mut report = ScenarioReport::new("x", Expectation::Pass);
        assert!(!report.passed());
        report.tally(&outcomes);
        assert_eq!(report.total_probes, 4);
        assert_eq!(report.per_endpoint["b1"], 2);
        assert_eq!(report.failure_kinds["503"], 1);
        assert!(report.is_consistent());
        report.check("zero failures", report.failures == 0, "");
        assert!(!report.as_expected());
        report.expect = Expectation::Fail;
        assert!(report.as_expected());
    }
}
