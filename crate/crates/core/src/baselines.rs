//! Reference prefetchers: next-line and an IP-indexed stride table.

use crate::memsys::LINE_SIZE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StrideEntry {
    pub ip: u64,
    pub last_addr: u64,
    pub delta: i64,
    /// 0..=3; prefetches issue at 2 and above.
    pub confidence: u8,
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct StridePrefetcher {
    table: Vec<StrideEntry>,
    pub degree: u32,
}

impl StridePrefetcher {
    pub fn new(entries: usize, degree: u32) -> StridePrefetcher {
        assert!(entries > 0);
        StridePrefetcher {
            table: vec![StrideEntry::default(); entries],
            degree,
        }
    }

    pub fn entry(&self, ip: u64) -> Option<&StrideEntry> {
        let e = &self.table[self.slot(ip)];
        (e.valid && e.ip == ip).then_some(e)
    }

    fn slot(&self, ip: u64) -> usize {
        ((ip >> 2) % self.table.len() as u64) as usize
    }

    /// Trains on a retired demand load and returns the addresses to prefetch.
    pub fn observe_and_issue(&mut self, ip: u64, addr: u64) -> Vec<u64> {
        let slot = self.slot(ip);
        let e = &mut self.table[slot];
        if !e.valid || e.ip != ip {
            *e = StrideEntry {
                ip,
                last_addr: addr,
                delta: 0,
                confidence: 0,
                valid: true,
            };
            return Vec::new();
        }
        let delta = addr.wrapping_sub(e.last_addr) as i64;
        if delta == e.delta && delta != 0 {
            e.confidence = (e.confidence + 1).min(3);
        } else {
            e.delta = delta;
            e.confidence = 1;
        }
        e.last_addr = addr;
        if e.confidence < 2 {
            return Vec::new();
        }
        (1..=self.degree as i64)
            .map(|k| addr.wrapping_add(e.delta.wrapping_mul(k) as u64))
            .collect()
    }
}

pub fn next_line(addr: u64) -> u64 {
    (addr & !(LINE_SIZE - 1)).wrapping_add(LINE_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confirms_after_two_matching_deltas() {
        let mut s = StridePrefetcher::new(256, 3);
        assert!(s.observe_and_issue(0x400, 0).is_empty());
        assert!(s.observe_and_issue(0x400, 64).is_empty());
        assert_eq!(s.observe_and_issue(0x400, 128), vec![192, 256, 320]);
        assert_eq!(s.entry(0x400).unwrap().confidence, 2);
    }

    #[test]
    fn random_addresses_rarely_issue() {
        let mut s = StridePrefetcher::new(256, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let issued: usize = (0..10_000)
            .map(|_| {
                s.observe_and_issue(0x400, rng.gen_range(0..1u64 << 30) * 8)
                    .len()
            })
            .sum();
        assert_eq!(issued, 0);
    }

    #[test]
    fn next_line_examples() {
        assert_eq!(next_line(0), 64);
        assert_eq!(next_line(64), 128);
        assert_eq!(next_line(100), 128);
    }
}
