//! Prefetch queue for usefulness and timeliness tracking, and the
//! lookahead controller that normalizes hit depth.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::memsys::line_of;
use crate::pie::MAX_LOOKAHEAD;

pub const DEFAULT_QUEUE: usize = 64;
pub const ADAPT_PERIOD: u32 = 32;

/// Who issued a prefetch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Issuer {
    /// PIE slot index plus the context tag it held at issue time.
    Pie {
        index: usize,
        ip: u64,
        bhr: u32,
    },
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefetchRecord {
    pub addr: u64,
    pub issuer: Issuer,
    /// Load ip the prefetch was issued on behalf of.
    pub trigger_ip: u64,
    pub issue_cycle: u64,
    pub hit: bool,
}

impl PrefetchRecord {
    pub fn new(addr: u64, issuer: Issuer, trigger_ip: u64, issue_cycle: u64) -> PrefetchRecord {
        PrefetchRecord {
            addr,
            issuer,
            trigger_ip,
            issue_cycle,
            hit: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueHit {
    pub issuer: Issuer,
    pub trigger_ip: u64,
    /// Records issued after the matched one (0 = newest).
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct PrefetchQueue {
    records: VecDeque<PrefetchRecord>,
    capacity: usize,
    pub enqueued: u64,
    pub hits: u64,
    pub useless: u64,
}

impl PrefetchQueue {
    pub fn new(capacity: usize) -> PrefetchQueue {
        assert!(capacity > 0);
        PrefetchQueue {
            records: VecDeque::with_capacity(capacity),
            capacity,
            enqueued: 0,
            hits: 0,
            useless: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pushes `rec`; returns the evicted record if it was never hit.
    pub fn enqueue(&mut self, rec: PrefetchRecord) -> Option<PrefetchRecord> {
        self.enqueued += 1;
        let evicted = if self.records.len() == self.capacity {
            self.records.pop_front()
        } else {
            None
        };
        self.records.push_back(rec);
        let useless = evicted.filter(|r| !r.hit);
        if useless.is_some() {
            self.useless += 1;
        }
        useless
    }

    /// Marks the most recent un-hit record on the same line as `addr`.
    pub fn match_demand(&mut self, addr: u64) -> Option<QueueHit> {
        let line = line_of(addr);
        let n = self.records.len();
        let (pos, rec) = self
            .records
            .iter_mut()
            .enumerate()
            .rev()
            .find(|(_, r)| !r.hit && line_of(r.addr) == line)?;
        rec.hit = true;
        self.hits += 1;
        Some(QueueHit {
            issuer: rec.issuer,
            trigger_ip: rec.trigger_ip,
            depth: n - 1 - pos,
        })
    }

    /// Records still waiting for a hit or an eviction.
    pub fn pending(&self) -> usize {
        self.records.iter().filter(|r| !r.hit).count()
    }

    /// Hits over resolved prefetches; 0 when nothing has resolved.
    pub fn accuracy(&self) -> f64 {
        let resolved = self.hits + self.useless;
        if resolved == 0 {
            0.0
        } else {
            self.hits as f64 / resolved as f64
        }
    }

    pub fn reset_stats(&mut self) {
        self.enqueued = 0;
        self.hits = 0;
        self.useless = 0;
    }
}

/// 2 inside the useful-distance band `[q/8, 3q/4]`, 1 outside it.
pub fn reward(depth: usize, q: usize) -> u32 {
    if (q / 8..=3 * q / 4).contains(&depth) {
        2
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LookaheadPolicy {
    DynamicFrom1,
    DynamicFrom16,
    Fixed32,
}

impl LookaheadPolicy {
    pub fn initial(self) -> u32 {
        match self {
            LookaheadPolicy::DynamicFrom1 => 1,
            LookaheadPolicy::DynamicFrom16 => 16,
            LookaheadPolicy::Fixed32 => 32,
        }
    }

    pub fn is_dynamic(self) -> bool {
        self != LookaheadPolicy::Fixed32
    }

    pub fn name(self) -> &'static str {
        match self {
            LookaheadPolicy::DynamicFrom1 => "dynamic_from_1",
            LookaheadPolicy::DynamicFrom16 => "dynamic_from_16",
            LookaheadPolicy::Fixed32 => "fixed_32",
        }
    }
}

impl fmt::Display for LookaheadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LookaheadPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic_from_1" => Ok(LookaheadPolicy::DynamicFrom1),
            "dynamic_from_16" => Ok(LookaheadPolicy::DynamicFrom16),
            "fixed_32" => Ok(LookaheadPolicy::Fixed32),
            _ => Err(format!("unknown lookahead policy `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LookaheadController {
    pub policy: LookaheadPolicy,
    pub queue: usize,
    pub alpha: f64,
    pub period: u32,
}

impl Default for LookaheadController {
    fn default() -> Self {
        LookaheadController {
            policy: LookaheadPolicy::DynamicFrom1,
            queue: DEFAULT_QUEUE,
            alpha: 0.125,
            period: ADAPT_PERIOD,
        }
    }
}

impl LookaheadController {
    pub fn update_ewma(&self, ewma: Option<f64>, depth: usize) -> f64 {
        match ewma {
            None => depth as f64,
            Some(e) => e + self.alpha * (depth as f64 - e),
        }
    }

    /// Next lookahead for an EWMA hit depth.
    pub fn adapt_lookahead(&self, l: u32, ewma: f64) -> u32 {
        let low = (self.queue / 8) as f64;
        let high = (3 * self.queue / 4) as f64;
        if ewma < low {
            (2 * l).min(MAX_LOOKAHEAD)
        } else if ewma > high {
            l.saturating_sub(1).max(1)
        } else {
            l
        }
    }

    /// Applies one hit to the per-PIE controller state and returns the new lookahead.
    pub fn on_hit(
        &self,
        l: u32,
        ewma: &mut Option<f64>,
        hits_since: &mut u32,
        depth: usize,
    ) -> u32 {
        let e = self.update_ewma(*ewma, depth);
        *ewma = Some(e);
        *hits_since += 1;
        if !self.policy.is_dynamic() || *hits_since < self.period {
            return l;
        }
        *hits_since = 0;
        self.adapt_lookahead(l, e)
    }
}
