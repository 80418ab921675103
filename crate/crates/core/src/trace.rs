//! JSONL trace records and the run digest.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::EpochSeconds;

pub const TRACE_VERSION: u32 = 1;

/// An untimed event emitted by a subsystem; the runner stamps the time.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub kind: String,
    pub subject: String,
    pub detail: Value,
}

impl TraceEvent {
    pub fn new(kind: &str, subject: impl Into<String>, detail: Value) -> Self {
        TraceEvent {
            kind: kind.to_string(),
            subject: subject.into(),
            detail,
        }
    }
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub v: u32,
    pub t: EpochSeconds,
    #[serde(rename = "type")]
    pub kind: String,
    pub subject: String,
    pub detail: Value,
}

impl TraceRecord {
    pub fn stamp(t: EpochSeconds, ev: TraceEvent) -> Self {
        TraceRecord {
            v: TRACE_VERSION,
            t,
            kind: ev.kind,
            subject: ev.subject,
            detail: ev.detail,
        }
    }

    /// Canonical line: fixed top-level field order, object keys sorted.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, t: EpochSeconds, ev: TraceEvent) {
        self.records.push(TraceRecord::stamp(t, ev));
    }

    pub fn extend(&mut self, t: EpochSeconds, evs: impl IntoIterator<Item = TraceEvent>) {
        for ev in evs {
            self.push(t, ev);
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }

    pub fn digest(&self) -> String {
        digest(&self.records)
    }
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// SHA-256 over the canonical lines, hex encoded.
pub fn digest(records: &[TraceRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.to_line().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lines_are_canonical_and_round_trip() {
        let mut trace = Trace::new();
        trace.push(5, TraceEvent::new("request", "webui", json!({"b": 1, "a": 2})));
        let line = trace.records()[0].to_line();
        assert_eq!(
            line,
            r#"{"v":1,"t":5,"type":"request","subject":"webui","detail":{"a":2,"b":1}}"#
        );
        let parsed = parse_jsonl(&trace.to_jsonl()).unwrap();
        assert_eq!(parsed, trace.records());
        assert_eq!(digest(&parsed), trace.digest());
    }
}
