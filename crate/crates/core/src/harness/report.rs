use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{digest_bytes, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    /// SHA-256 of the model configuration's JSON form.
    pub config_hash: String,
}

impl Environment {
    pub fn new(seed: u64, config: &ModelConfig) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        Self {
            seed,
            config_hash: digest_bytes(&json).to_hex(),
        }
    }
}

/// Outcome of one experiment protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub environment: Environment,
    pub records: Vec<Value>,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    /// Wall-clock measurements; excluded from reproducibility comparisons.
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, environment: Environment) -> Self {
        Self {
            name: name.into(),
            environment,
            records: Vec::new(),
            summary: BTreeMap::new(),
            checks: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, value: impl Serialize) {
        self.records.push(serde_json::to_value(value).expect("record serializes"));
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary serializes"));
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn time(&mut self, key: &str, seconds: f64) {
        self.timings.insert(key.to_string(), seconds);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Equality ignoring timings.
    pub fn reproduces(&self, other: &Self) -> bool {
        self.name == other.name
            && self.environment == other.environment
            && self.records == other.records
            && self.summary == other.summary
            && self.checks == other.checks
    }

    /// One JSON object per line: environment, records, summary, checks, timings.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![json!({"type": "environment", "experiment": self.name, "seed": self.environment.seed, "config_hash": self.environment.config_hash})];
        lines.extend(self.records.iter().map(|r| json!({"type": "record", "data": r})));
        lines.push(json!({"type": "summary", "data": self.summary}));
        lines.extend(self.checks.iter().map(|c| json!({"type": "check", "data": c})));
        lines.push(json!({"type": "timings", "data": self.timings}));
        let mut out = String::new();
        for l in lines {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("== {} (seed {}) ==\n", self.name, self.environment.seed);
        let width = self
            .summary
            .keys()
            .chain(self.timings.keys())
            .map(String::len)
            .max()
            .unwrap_or(0);
        for (k, v) in &self.summary {
            let _ = writeln!(out, "  {k:<width$}  {v}");
        }
        for (k, v) in &self.timings {
            let _ = writeln!(out, "  {k:<width$}  {v:.6}");
        }
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "  [{mark}] {}: {}", c.name, c.detail);
        }
        out
    }
}
