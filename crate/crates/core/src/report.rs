//! Pass/fail checks and the run report written by the CLI.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::RunConfig;

/// Version tag of the JSON report layout.
pub const SCHEMA: &str = "current-rdm.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value <= limit + tolerance`
    AtMost,
    /// `value >= limit - tolerance`
    AtLeast,
    /// `|value - limit| <= tolerance`
    Within,
}

/// A single verified property with the tolerance it was judged against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub comparison: Comparison,
    pub value: f64,
    pub limit: f64,
    /// Absolute tolerance applied to `limit`.
    pub tolerance: f64,
    /// Whether the inequality itself holds.
    pub holds: bool,
    /// Set for demonstrations where the property is meant to break.
    pub expect_failure: bool,
    /// `holds` matches the expectation.
    pub passed: bool,
}

impl Check {
    fn build(
        name: impl Into<String>,
        comparison: Comparison,
        value: f64,
        limit: f64,
        tolerance: f64,
    ) -> Self {
        let holds = match comparison {
            Comparison::AtMost => value <= limit + tolerance,
            Comparison::AtLeast => value >= limit - tolerance,
            Comparison::Within => (value - limit).abs() <= tolerance,
        };
        Self {
            name: name.into(),
            comparison,
            value,
            limit,
            tolerance,
            holds,
            expect_failure: false,
            passed: holds,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, limit: f64, tolerance: f64) -> Self {
        Self::build(name, Comparison::AtMost, value, limit, tolerance)
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64, tolerance: f64) -> Self {
        Self::build(name, Comparison::AtLeast, value, limit, tolerance)
    }

    pub fn within(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Self::build(name, Comparison::Within, value, target, tolerance)
    }

    /// Relative closeness, `|value - target| <= rel * |target|`.
    pub fn within_rel(name: impl Into<String>, value: f64, target: f64, rel: f64) -> Self {
        Self::within(name, value, target, rel * target.abs())
    }

    /// A boolean property; `value` is 1 when it holds.
    pub fn flag(name: impl Into<String>, holds: bool) -> Self {
        Self::within(name, if holds { 1.0 } else { 0.0 }, 1.0, 0.0)
    }

    pub fn expecting_failure(mut self) -> Self {
        self.expect_failure = true;
        self.passed = !self.holds;
        self
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub passed: usize,
    pub failed: usize,
    pub failing: Vec<String>,
}

pub fn summarize(checks: &[Check]) -> Summary {
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    Summary {
        passed: checks.len() - failing.len(),
        failed: failing.len(),
        failing,
    }
}

/// Everything one CLI invocation produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub config: RunConfig,
    /// Flat scalar results keyed as documented in `docs/report-schema.md`.
    pub values: BTreeMap<String, f64>,
    /// Structured diagnostics (spectra summaries, ladders, probe tables).
    pub sections: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub summary: Summary,
    /// Files written next to the report.
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            schema: SCHEMA,
            command: command.to_string(),
            timestamp: None,
            config,
            values: BTreeMap::new(),
            sections: BTreeMap::new(),
            checks: Vec::new(),
            summary: Summary {
                passed: 0,
                failed: 0,
                failing: Vec::new(),
            },
            artifacts: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = Check>) {
        self.checks.extend(checks);
    }

    pub fn section(&mut self, key: &str, value: &impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.sections.insert(key.to_string(), v);
    }

    pub fn finish(&mut self) {
        self.summary = summarize(&self.checks);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }
}
