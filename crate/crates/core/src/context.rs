//! Load contexts and the flakiness detector.
//!
//! A load context is the pair (load ip, branch history). The pair is folded
//! into a PIE-array index; the full pair is kept as the tag so colliding
//! contexts never share a record.

use std::collections::BTreeSet;

use crate::pie::{PieArray, PieState};

/// 24-bit history of the last six branches, four bits each, newest in the
/// low nibble.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, PartialOrd, Ord)]
pub struct BranchHistory(u32);

impl BranchHistory {
    pub const BITS: u32 = 24;
    pub const SLOTS: u32 = 6;
    const MASK: u32 = (1 << Self::BITS) - 1;

    pub fn from_bits(bits: u32) -> BranchHistory {
        BranchHistory(bits & Self::MASK)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// Slot `i` counting from the newest (0) to the oldest (5).
    pub fn slot(self, i: u32) -> u8 {
        ((self.0 >> (4 * i)) & 0xF) as u8
    }

    pub fn update(self, branch_ip: u64, taken: bool) -> BranchHistory {
        let nibble = (branch_ip as u32 & 0xF) ^ taken as u32;
        BranchHistory(((self.0 << 4) | nibble) & Self::MASK)
    }

    /// Keeps the newest `context_bits` bits.
    pub fn masked(self, context_bits: u32) -> u32 {
        if context_bits >= 32 {
            self.0
        } else {
            self.0 & ((1u32 << context_bits) - 1)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContextKey {
    pub ip: u64,
    /// Branch history after masking to the configured context length.
    pub bhr: u32,
    pub index: usize,
}

impl PartialEq for ContextKey {
    fn eq(&self, other: &Self) -> bool {
        self.ip == other.ip && self.bhr == other.bhr
    }
}

impl Eq for ContextKey {}

impl ContextKey {
    pub fn tag(&self) -> (u64, u32) {
        (self.ip, self.bhr)
    }
}

/// XOR-folds `ip ^ (bhr << 1)` in chunks as wide as the table index.
pub fn fold_index(ip: u64, bhr: u32, table_size: usize) -> usize {
    assert!(
        table_size.is_power_of_two(),
        "table size must be a power of two"
    );
    let width = table_size.trailing_zeros().max(1);
    let mask = (1u64 << width) - 1;
    let mut x = ip ^ ((bhr as u64) << 1);
    let mut acc = 0u64;
    while x != 0 {
        acc ^= x & mask;
        x >>= width;
    }
    (acc as usize) & (table_size - 1)
}

pub fn context_of(
    load_ip: u64,
    bhr: BranchHistory,
    context_bits: u32,
    table_size: usize,
) -> ContextKey {
    let masked = bhr.masked(context_bits.min(BranchHistory::BITS));
    ContextKey {
        ip: load_ip,
        bhr: masked,
        index: fold_index(load_ip, masked, table_size),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlakinessRecord {
    pub appearances: u8,
    pub misses: u8,
    pub window_start: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorDecision {
    Ignore,
    AllocatePie,
    AdvanceToGen,
}

#[derive(Clone, Debug)]
pub struct FlakinessDetector {
    pub window: u64,
    pub hot_threshold: u8,
    pub miss_threshold: u8,
    /// Allocations refused because the slot held a protected entry.
    pub denied: u64,
    denied_keys: BTreeSet<(u64, u32)>,
    allocated_keys: BTreeSet<(u64, u32)>,
}

impl Default for FlakinessDetector {
    fn default() -> Self {
        FlakinessDetector::new(10_000)
    }
}

impl FlakinessDetector {
    pub fn new(window: u64) -> FlakinessDetector {
        FlakinessDetector {
            window,
            hot_threshold: 2,
            miss_threshold: 1,
            denied: 0,
            denied_keys: BTreeSet::new(),
            allocated_keys: BTreeSet::new(),
        }
    }

    /// Called for every retired load that probed L1.
    pub fn observe_load(
        &mut self,
        pies: &mut PieArray,
        key: ContextKey,
        l1_missed: bool,
        retired_index: u64,
        now: u64,
    ) -> DetectorDecision {
        if let Some(pie) = pies.get_mut_tagged(&key) {
            if pie.state != PieState::Active {
                return DetectorDecision::Ignore;
            }
            let rec = &mut pie.flakiness;
            if retired_index.saturating_sub(rec.window_start) > self.window {
                *rec = FlakinessRecord {
                    appearances: 0,
                    misses: 0,
                    window_start: retired_index,
                };
            }
            rec.appearances = rec.appearances.saturating_add(1);
            if l1_missed {
                rec.misses = rec.misses.saturating_add(1);
            }
            if rec.appearances >= self.hot_threshold && rec.misses >= self.miss_threshold {
                pies.qualify(key.index, now);
                return DetectorDecision::AdvanceToGen;
            }
            return DetectorDecision::Ignore;
        }
        if !l1_missed {
            return DetectorDecision::Ignore;
        }
        let rec = FlakinessRecord {
            appearances: 1,
            misses: 1,
            window_start: retired_index,
        };
        if pies.allocate(key, rec) {
            self.allocated_keys.insert(key.tag());
            DetectorDecision::AllocatePie
        } else {
            self.denied += 1;
            self.denied_keys.insert(key.tag());
            DetectorDecision::Ignore
        }
    }

    /// Contexts that were refused a PIE and never obtained one.
    pub fn starved(&self) -> Vec<(u64, u32)> {
        self.denied_keys
            .difference(&self.allocated_keys)
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pie::PieConfig;

    #[test]
    fn bhr_update_formula() {
        let h = BranchHistory::default().update(0b1010, true);
        assert_eq!(h.slot(0), 0b1011);
        let h = BranchHistory::default().update(0b1010, false);
        assert_eq!(h.slot(0), 0b1010);
    }

    #[test]
    fn bhr_holds_six_slots() {
        let mut h = BranchHistory::default().update(0x5, false);
        assert_eq!(h.slot(0), 5);
        for _ in 0..5 {
            h = h.update(0x2, false);
        }
        assert_eq!(h.slot(5), 5);
        h = h.update(0x2, false);
        assert!((0..6).all(|i| h.slot(i) == 2));
        assert!(h.bits() < 1 << 24);
    }

    #[test]
    fn zero_context_bits_ignore_history() {
        let a = context_of(0x400, BranchHistory::from_bits(0x123456), 0, 16);
        let b = context_of(0x400, BranchHistory::from_bits(0xABCDEF), 0, 16);
        assert_eq!(a, b);
        assert_eq!(a.index, b.index);
    }

    #[test]
    fn full_context_separates_outcomes() {
        let base = BranchHistory::default().update(0x40, true);
        let a = context_of(0x400, base.update(0x48, true), 24, 16);
        let b = context_of(0x400, base.update(0x48, false), 24, 16);
        assert_ne!(a, b);
    }

    /// Nibble-by-nibble fold over the hex digits, independent of the shift loop.
    fn fold_oracle(ip: u64, bhr: u32) -> usize {
        let x = ip ^ ((bhr as u64) << 1);
        format!("{x:016x}")
            .chars()
            .fold(0, |acc, c| acc ^ c.to_digit(16).unwrap() as usize)
    }

    #[test]
    fn fold_matches_oracle() {
        let idx = fold_index(0x40F3, 0x00ABCD, 16);
        assert_eq!(idx, fold_oracle(0x40F3, 0x00ABCD));
        assert_eq!(idx, 0x8);
        assert!(idx < 16);
        for ip in (0x400000u64..0x400400).step_by(4) {
            for bhr in [0, 1, 0xFFFFFF, 0x135790] {
                assert_eq!(fold_index(ip, bhr, 16), fold_oracle(ip, bhr));
            }
        }
    }

    #[test]
    fn detector_qualifies_after_two_appearances() {
        let mut pies = PieArray::new(PieConfig::default());
        let mut det = FlakinessDetector::default();
        let key = context_of(0x400, BranchHistory::default(), 24, 16);
        assert_eq!(
            det.observe_load(&mut pies, key, true, 0, 0),
            DetectorDecision::AllocatePie
        );
        assert_eq!(
            det.observe_load(&mut pies, key, false, 5, 5),
            DetectorDecision::AdvanceToGen
        );
        assert_eq!(pies.get_tagged(&key).unwrap().state, PieState::Gen);
    }

    #[test]
    fn always_hitting_load_is_ignored() {
        let mut pies = PieArray::new(PieConfig::default());
        let mut det = FlakinessDetector::default();
        let key = context_of(0x400, BranchHistory::default(), 24, 16);
        for i in 0..100 {
            assert_eq!(
                det.observe_load(&mut pies, key, false, i, i),
                DetectorDecision::Ignore
            );
        }
        assert!(pies.get_tagged(&key).is_none());
    }

    #[test]
    fn window_expiry_resets_counts() {
        let mut pies = PieArray::new(PieConfig::default());
        let mut det = FlakinessDetector::new(100);
        let key = context_of(0x400, BranchHistory::default(), 24, 16);
        det.observe_load(&mut pies, key, true, 0, 0);
        // Second appearance lands outside the window: counts restart and the
        // hit alone cannot qualify.
        assert_eq!(
            det.observe_load(&mut pies, key, false, 500, 500),
            DetectorDecision::Ignore
        );
        assert_eq!(
            det.observe_load(&mut pies, key, false, 510, 510),
            DetectorDecision::Ignore
        );
        assert_eq!(
            det.observe_load(&mut pies, key, true, 520, 520),
            DetectorDecision::AdvanceToGen
        );
    }
}
