//! Ordered event-sequence matching over indication events.
//!
//! A pattern `[s1, .., sn]` completes at an event matching `sn` when earlier,
//! not yet consumed events match `s1 .. s(n-1)` in order and the first of them
//! is at most `withinSeconds` older than the completing event. Among several
//! candidate embeddings the latest one is taken (each position as late as
//! possible, scanning backwards from the completing event); its events are
//! consumed and never reused.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::rules::Comparator;
use crate::clock::EpochSeconds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IndicationEvent {
    pub symbol: String,
    pub subject_id: String,
    pub at_time: EpochSeconds,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SymbolSpec {
    pub symbol: String,
    #[serde(default)]
    pub comparator: Option<Comparator>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl SymbolSpec {
    pub fn any(symbol: &str) -> Self {
        SymbolSpec {
            symbol: symbol.to_string(),
            comparator: None,
            threshold: None,
        }
    }

    pub fn accepts(&self, ev: &IndicationEvent) -> bool {
        ev.symbol == self.symbol
            && match (self.comparator, self.threshold) {
                (Some(c), Some(t)) => c.holds(ev.value, t),
                _ => true,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SequencePattern {
    pub name: String,
    pub symbols: Vec<SymbolSpec>,
    #[serde(default = "default_true")]
    pub per_subject: bool,
    pub within_seconds: i64,
    /// Strategy to request when the pattern completes.
    #[serde(default)]
    pub strategy: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMatch {
    pub pattern: String,
    pub subject_id: String,
    /// Contributing events in pattern order; the last one completed the match.
    pub events: Vec<IndicationEvent>,
}

#[derive(Debug, Clone)]
pub struct Matcher {
    pattern: SequencePattern,
    buffers: BTreeMap<String, VecDeque<IndicationEvent>>,
}

impl Matcher {
    pub fn new(pattern: SequencePattern) -> Self {
        Matcher {
            pattern,
            buffers: BTreeMap::new(),
        }
    }

    pub fn pattern(&self) -> &SequencePattern {
        &self.pattern
    }

    /// Unconsumed events currently held for `subject`.
    pub fn partial(&self, subject: &str) -> usize {
        self.buffers.get(subject).map_or(0, VecDeque::len)
    }

    pub fn feed(&mut self, ev: &IndicationEvent) -> Option<SequenceMatch> {
        let symbols = &self.pattern.symbols;
        if symbols.is_empty() || !symbols.iter().any(|s| s.accepts(ev)) {
            return None;
        }
        let key = if self.pattern.per_subject {
            ev.subject_id.clone()
        } else {
            String::new()
        };
        let within = self.pattern.within_seconds;
        let buf = self.buffers.entry(key).or_default();
        while buf.front().is_some_and(|e| ev.at_time - e.at_time > within) {
            buf.pop_front();
        }
        let n = symbols.len();
        if symbols[n - 1].accepts(ev) {
            let mut picked = Vec::with_capacity(n - 1);
            let mut upper = buf.len();
            for spec in symbols[..n - 1].iter().rev() {
                match (0..upper).rev().find(|&i| spec.accepts(&buf[i])) {
                    Some(i) => {
                        picked.push(i);
                        upper = i;
                    }
                    None => break,
                }
            }
            if picked.len() == n - 1 {
                picked.reverse();
                let mut events: Vec<IndicationEvent> = picked.iter().map(|&i| buf[i].clone()).collect();
                for &i in picked.iter().rev() {
                    buf.remove(i);
                }
                events.push(ev.clone());
                return Some(SequenceMatch {
                    pattern: self.pattern.name.clone(),
                    subject_id: ev.subject_id.clone(),
                    events,
                });
            }
        }
        buf.push_back(ev.clone());
        None
    }

    pub fn feed_all<'a>(&mut self, events: impl IntoIterator<Item = &'a IndicationEvent>) -> Vec<SequenceMatch> {
        events.into_iter().filter_map(|e| self.feed(e)).collect()
    }
}
