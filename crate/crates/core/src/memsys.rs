//! Inclusive three-level cache hierarchy with additive latencies.
//!
//! A miss at one level pays that level's latency plus everything below it.
//! Prefetches install lines everywhere with a future fill time; a demand that
//! arrives before the fill completes waits for the residual latency.

use serde::Serialize;
use thiserror::Error;

pub const LINE_SIZE: u64 = 64;
const LINE_BITS: u32 = 6;

#[inline]
pub fn line_of(addr: u64) -> u64 {
    addr >> LINE_BITS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LevelConfig {
    pub size: u64,
    pub ways: u64,
    pub latency: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    pub l1: LevelConfig,
    pub l2: LevelConfig,
    pub l3: LevelConfig,
    pub mem_latency: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            l1: LevelConfig {
                size: 32 * 1024,
                ways: 8,
                latency: 2,
            },
            l2: LevelConfig {
                size: 256 * 1024,
                ways: 4,
                latency: 12,
            },
            l3: LevelConfig {
                size: 4 * 1024 * 1024,
                ways: 16,
                latency: 40,
            },
            mem_latency: 200,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheConfigError {
    #[error("{level}: size {size} not divisible by ways*64 ({ways}*64)")]
    Geometry {
        level: &'static str,
        size: u64,
        ways: u64,
    },
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheConfigError> {
        for (level, c) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3)] {
            let way_bytes = c.ways * LINE_SIZE;
            if c.ways == 0 || c.size == 0 || c.size % way_bytes != 0 {
                return Err(CacheConfigError::Geometry {
                    level,
                    size: c.size,
                    ways: c.ways,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    DemandLoad,
    DemandStore,
    Prefetch,
}

impl AccessKind {
    pub fn is_demand(self) -> bool {
        !matches!(self, AccessKind::Prefetch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum HitLevel {
    L1,
    L2,
    L3,
    Mem,
    InFlight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub hit_level: HitLevel,
    pub latency: u64,
    /// Cycle at which the line is resident in L1.
    pub fill_time: u64,
    /// Demand access served by a line a prefetch brought in (timely or late).
    pub covered: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counter {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
}

impl Counter {
    fn record(&mut self, hit: bool) {
        self.accesses += 1;
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LevelStats {
    pub demand_load: Counter,
    pub demand_store: Counter,
    pub prefetch: Counter,
}

impl LevelStats {
    fn counter(&mut self, kind: AccessKind) -> &mut Counter {
        match kind {
            AccessKind::DemandLoad => &mut self.demand_load,
            AccessKind::DemandStore => &mut self.demand_store,
            AccessKind::Prefetch => &mut self.prefetch,
        }
    }

    pub fn demand_misses(&self) -> u64 {
        self.demand_load.misses + self.demand_store.misses
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub l1: LevelStats,
    pub l2: LevelStats,
    pub l3: LevelStats,
    /// Demand accesses that found a line brought in by a prefetch.
    pub covered: u64,
    /// Subset of `covered` where the fill was still in flight.
    pub late: u64,
    /// Prefetched lines evicted from L1 before any demand touched them.
    pub unused_prefetch_evictions: u64,
}

impl CacheStats {
    /// Covered demand misses over covered plus remaining demand misses.
    pub fn coverage(&self) -> f64 {
        let denom = self.covered + self.l1.demand_misses();
        if denom == 0 {
            0.0
        } else {
            self.covered as f64 / denom as f64
        }
    }
}

/// Demand L1 misses per thousand retired instructions.
pub fn mpki(stats: &CacheStats, retired: u64) -> f64 {
    assert!(retired > 0, "mpki needs at least one retired instruction");
    1000.0 * stats.l1.demand_misses() as f64 / retired as f64
}

#[derive(Clone, Copy, Debug, Default)]
struct Way {
    valid: bool,
    line: u64,
    stamp: u64,
    fill_time: u64,
    prefetched: bool,
}

#[derive(Clone, Debug)]
struct Level {
    sets: u64,
    ways: usize,
    latency: u64,
    slots: Vec<Way>,
}

impl Level {
    fn new(c: LevelConfig) -> Level {
        let sets = c.size / (c.ways * LINE_SIZE);
        Level {
            sets,
            ways: c.ways as usize,
            latency: c.latency,
            slots: vec![Way::default(); (sets * c.ways) as usize],
        }
    }

    fn set_range(&self, line: u64) -> std::ops::Range<usize> {
        let set = (line % self.sets) as usize;
        set * self.ways..(set + 1) * self.ways
    }

    fn find(&self, line: u64) -> Option<usize> {
        self.set_range(line)
            .find(|&i| self.slots[i].valid && self.slots[i].line == line)
    }

    /// Installs `line`, returning the evicted way if a valid one was replaced.
    fn install(&mut self, line: u64, stamp: u64, fill_time: u64, prefetched: bool) -> Option<Way> {
        let range = self.set_range(line);
        let victim = range
            .clone()
            .find(|&i| !self.slots[i].valid)
            .unwrap_or_else(|| {
                range
                    .min_by_key(|&i| self.slots[i].stamp)
                    .expect("non-empty set")
            });
        let old = self.slots[victim];
        self.slots[victim] = Way {
            valid: true,
            line,
            stamp,
            fill_time,
            prefetched,
        };
        old.valid.then_some(old)
    }

    fn invalidate(&mut self, line: u64) -> Option<Way> {
        let i = self.find(line)?;
        let old = self.slots[i];
        self.slots[i].valid = false;
        Some(old)
    }

    fn lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.iter().filter(|w| w.valid).map(|w| w.line)
    }
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    config: CacheConfig,
    levels: [Level; 3],
    stamp: u64,
    pub stats: CacheStats,
}

impl Hierarchy {
    pub fn new(config: CacheConfig) -> Result<Hierarchy, CacheConfigError> {
        config.validate()?;
        let levels = [
            Level::new(config.l1),
            Level::new(config.l2),
            Level::new(config.l3),
        ];
        Ok(Hierarchy {
            config,
            levels,
            stamp: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// True when the line is resident in L1 or its fill is already pending.
    pub fn l1_contains(&self, addr: u64) -> bool {
        self.levels[0].find(line_of(addr)).is_some()
    }

    fn level_stats(&mut self, i: usize) -> &mut LevelStats {
        match i {
            0 => &mut self.stats.l1,
            1 => &mut self.stats.l2,
            _ => &mut self.stats.l3,
        }
    }

    pub fn access(&mut self, addr: u64, kind: AccessKind, now: u64) -> AccessResult {
        self.stamp += 1;
        let line = line_of(addr);
        let stamp = self.stamp;

        if let Some(i) = self.levels[0].find(line) {
            let way = &mut self.levels[0].slots[i];
            way.stamp = stamp;
            let in_flight = way.fill_time > now;
            let covered = kind.is_demand() && way.prefetched;
            if kind.is_demand() {
                way.prefetched = false;
            }
            let fill_time = way.fill_time;
            self.stats.l1.counter(kind).record(true);
            if covered {
                self.stats.covered += 1;
                if in_flight {
                    self.stats.late += 1;
                }
            }
            return if in_flight {
                AccessResult {
                    hit_level: HitLevel::InFlight,
                    latency: fill_time - now,
                    fill_time,
                    covered,
                }
            } else {
                let latency = self.levels[0].latency;
                AccessResult {
                    hit_level: HitLevel::L1,
                    latency,
                    fill_time,
                    covered,
                }
            };
        }

        // Walk down until a level holds the line.
        let mut latency = self.levels[0].latency;
        self.stats.l1.counter(kind).record(false);
        let mut hit_level = HitLevel::Mem;
        let mut pending = 0;
        for lvl in 1..3 {
            latency += self.levels[lvl].latency;
            let found = self.levels[lvl].find(line);
            self.level_stats(lvl).counter(kind).record(found.is_some());
            if let Some(i) = found {
                let way = &mut self.levels[lvl].slots[i];
                way.stamp = stamp;
                pending = way.fill_time;
                hit_level = if lvl == 1 { HitLevel::L2 } else { HitLevel::L3 };
                break;
            }
        }
        if hit_level == HitLevel::Mem {
            latency += self.config.mem_latency;
        }
        let fill_time = (now + latency).max(pending);
        let latency = fill_time - now;

        // Inclusive allocation, outermost first so back-invalidation stays consistent.
        let depth = match hit_level {
            HitLevel::L2 => 1,
            HitLevel::L3 => 2,
            _ => 3,
        };
        for lvl in (0..depth).rev() {
            let prefetched = lvl == 0 && kind == AccessKind::Prefetch;
            if let Some(evicted) = self.levels[lvl].install(line, stamp, fill_time, prefetched) {
                self.evict_above(lvl, evicted);
            }
        }
        AccessResult {
            hit_level,
            latency,
            fill_time,
            covered: false,
        }
    }

    fn evict_above(&mut self, lvl: usize, evicted: Way) {
        if lvl == 0 && evicted.prefetched {
            self.stats.unused_prefetch_evictions += 1;
        }
        for upper in 0..lvl {
            if let Some(w) = self.levels[upper].invalidate(evicted.line) {
                if upper == 0 && w.prefetched {
                    self.stats.unused_prefetch_evictions += 1;
                }
            }
        }
    }

    /// Every L1 line is present in L2 and L3, and every L2 line in L3.
    pub fn check_inclusion(&self) -> bool {
        let inner_ok = |a: usize, b: usize| {
            self.levels[a]
                .lines()
                .all(|l| self.levels[b].find(l).is_some())
        };
        inner_ok(0, 1) && inner_ok(0, 2) && inner_ok(1, 2)
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> Hierarchy {
        Hierarchy::new(CacheConfig::default()).unwrap()
    }

    #[test]
    fn line_of_examples() {
        assert_eq!(line_of(0), 0);
        assert_eq!(line_of(63), 0);
        assert_eq!(line_of(64), 1);
    }

    #[test]
    fn cold_then_warm() {
        let mut h = defaults();
        let c = *h.config();
        let cold = h.access(0x1234, AccessKind::DemandLoad, 0);
        assert_eq!(cold.hit_level, HitLevel::Mem);
        let expected = c.mem_latency + c.l3.latency + c.l2.latency + c.l1.latency;
        assert_eq!(cold.latency, expected);
        assert_eq!(cold.latency, 254);
        let warm = h.access(0x1238, AccessKind::DemandLoad, 1000);
        assert_eq!(warm.hit_level, HitLevel::L1);
        assert_eq!(warm.latency, 2);
    }

    #[test]
    fn late_prefetch_reports_residual() {
        let mut h = defaults();
        let pf = h.access(0x8000, AccessKind::Prefetch, 100);
        assert_eq!(pf.hit_level, HitLevel::Mem);
        assert_eq!(pf.fill_time, 100 + 254);
        let d = h.access(0x8008, AccessKind::DemandLoad, 150);
        assert_eq!(d.hit_level, HitLevel::InFlight);
        assert_eq!(d.latency, pf.fill_time - 150);
        assert!(d.covered);
        assert_eq!(h.stats.late, 1);
        assert_eq!(h.stats.covered, 1);
    }

    #[test]
    fn prefetch_covered_once() {
        let mut h = defaults();
        h.access(0x8000, AccessKind::Prefetch, 0);
        let a = h.access(0x8000, AccessKind::DemandLoad, 1000);
        let b = h.access(0x8000, AccessKind::DemandLoad, 1001);
        assert!(a.covered && !b.covered);
        assert_eq!(h.stats.covered, 1);
        assert_eq!(h.stats.late, 0);
    }

    #[test]
    fn l2_hit_after_l1_eviction() {
        let mut h = defaults();
        // 9 lines mapping to the same L1 set evict the first from the 8-way L1.
        let l1_sets = 32 * 1024 / (8 * 64);
        for i in 0..9u64 {
            h.access(i * l1_sets * 64, AccessKind::DemandLoad, i * 1000);
        }
        let r = h.access(0, AccessKind::DemandLoad, 100_000);
        assert_eq!(r.hit_level, HitLevel::L2);
        assert_eq!(r.latency, 14);
        assert!(h.check_inclusion());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = CacheConfig::default();
        c.l1.size = 1000;
        assert!(Hierarchy::new(c).is_err());
    }

    #[test]
    fn mpki_examples() {
        let mut s = CacheStats::default();
        s.l1.demand_load.misses = 500;
        assert!((mpki(&s, 1_000_000) - 0.5).abs() < 1e-12);
        assert_eq!(mpki(&CacheStats::default(), 77), 0.0);
    }
}
