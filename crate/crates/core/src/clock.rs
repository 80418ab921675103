//! Logical clock with a time-ordered task queue.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Logical time in epoch seconds.
pub type EpochSeconds = i64;

#[derive(Debug, Clone)]
struct Entry<T> {
    at: EpochSeconds,
    seq: u64,
    task: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Tasks fire in (time, insertion order); time never moves backwards.
#[derive(Debug, Clone)]
pub struct SimClock<T> {
    now: EpochSeconds,
    seq: u64,
    pending: BinaryHeap<Reverse<Entry<T>>>,
}

impl<T> SimClock<T> {
    pub fn new(start: EpochSeconds) -> Self {
        SimClock {
            now: start,
            seq: 0,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> EpochSeconds {
        self.now
    }

    /// Schedules `task` at `at`, or at `now` when `at` is in the past.
    pub fn schedule(&mut self, at: EpochSeconds, task: T) {
        let at = at.max(self.now);
        self.seq += 1;
        self.pending.push(Reverse(Entry {
            at,
            seq: self.seq,
            task,
        }));
    }

    pub fn next_due(&self) -> Option<EpochSeconds> {
        self.pending.peek().map(|Reverse(e)| e.at)
    }

    /// Pops the next task due at or before `until`, advancing `now` to it.
    pub fn pop_until(&mut self, until: EpochSeconds) -> Option<(EpochSeconds, T)> {
        match self.pending.peek() {
            Some(Reverse(e)) if e.at <= until => {
                let Reverse(e) = self.pending.pop().expect("peeked");
                self.now = e.at;
                Some((e.at, e.task))
            }
            _ => None,
        }
    }

    /// Moves `now` forward to `until` once no earlier work is pending.
    pub fn advance_to(&mut self, until: EpochSeconds) {
        if until > self.now {
            self.now = until;
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}
