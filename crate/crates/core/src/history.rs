//! Cyclic retirement history walked backward by the slice walkers.

use crate::isa::RetiredEvent;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub event: RetiredEvent,
    /// Branch history in effect when this op retired (older branches only).
    pub bhr: u32,
}

#[derive(Clone, Debug)]
pub struct HistoryQueue {
    entries: Vec<HistoryEntry>,
    capacity: usize,
    /// Slot the next push writes.
    next: usize,
    len: usize,
}

impl HistoryQueue {
    pub fn new(capacity: usize) -> HistoryQueue {
        assert!(capacity > 0);
        HistoryQueue {
            entries: Vec::with_capacity(capacity),
            capacity,
            next: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.next] = entry;
        }
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Entry `age` steps back from the youngest (age 0).
    pub fn get(&self, age: usize) -> Option<&HistoryEntry> {
        if age >= self.len {
            return None;
        }
        let slot = (self.next + self.capacity - 1 - age) % self.capacity;
        Some(&self.entries[slot])
    }

    pub fn youngest(&self) -> Option<&HistoryEntry> {
        self.get(0)
    }

    /// Youngest-to-oldest iteration starting `from` steps back from the head.
    pub fn walk_backward(&self, from: usize) -> impl Iterator<Item = &HistoryEntry> + '_ {
        (from..self.len).map(move |age| self.get(age).expect("age within live window"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{MicroOp, Reg};
    use proptest::prelude::*;

    fn entry(i: u64) -> HistoryEntry {
        let op = MicroOp::mov_imm(i * 4, Reg::r(1), i as i64);
        HistoryEntry {
            event: RetiredEvent {
                op,
                result: Some(i),
                eff_addr: None,
                taken: None,
                retire_index: i,
            },
            bhr: 0,
        }
    }

    fn indices(q: &HistoryQueue, from: usize) -> Vec<u64> {
        q.walk_backward(from)
            .map(|e| e.event.retire_index)
            .collect()
    }

    #[test]
    fn push_and_overflow() {
        let mut q = HistoryQueue::new(128);
        assert!(indices(&q, 0).is_empty());
        q.push(entry(1));
        assert_eq!(q.len(), 1);
        for i in 2..=129 {
            q.push(entry(i));
        }
        assert_eq!(q.len(), 128);
        let walked = indices(&q, 0);
        assert_eq!(walked.first(), Some(&129));
        assert_eq!(walked.last(), Some(&2));
        assert_eq!(walked.len(), 128);
    }

    #[test]
    fn walk_starts_at_trigger() {
        let mut q = HistoryQueue::new(8);
        for i in 0..5 {
            q.push(entry(i));
        }
        assert_eq!(q.youngest().unwrap().event.retire_index, 4);
        assert_eq!(indices(&q, 0), vec![4, 3, 2, 1, 0]);
        assert_eq!(indices(&q, 2), vec![2, 1, 0]);
    }

    proptest! {
        #[test]
        fn ring_matches_unbounded_log(cap in 1usize..40, n in 0u64..200, from in 0usize..50) {
            let mut q = HistoryQueue::new(cap);
            let mut shadow = Vec::new();
            for i in 0..n {
                q.push(entry(i));
                shadow.push(i);
            }
            let live: Vec<u64> = shadow.iter().rev().take(cap).copied().collect();
            prop_assert_eq!(indices(&q, 0), live.clone());
            let tail: Vec<u64> = live.into_iter().skip(from).collect();
            prop_assert_eq!(indices(&q, from), tail);
        }
    }
}
