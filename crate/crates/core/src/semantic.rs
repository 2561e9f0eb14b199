//! The semantic prefetcher: detector, walkers, PIE lifecycle, injection and
//! feedback routing, driven once per retired op.

use crate::context::{context_of, BranchHistory, ContextKey, FlakinessDetector};
use crate::feedback::{reward, Issuer, LookaheadController, QueueHit};
use crate::history::{HistoryEntry, HistoryQueue};
use crate::injector::{execute_slice, try_trigger, InjectionMode, InjectionResult};
use crate::isa::{ArchState, MicroOp, RetiredEvent};
use crate::memsys::Hierarchy;
use crate::pie::{FeedbackOutcome, PieArray, PieConfig, PieState, RepeatCheck};
use crate::slicer::{
    annotate, trim, validate_pass, walk_generate, walk_occupancy, Consistency, WalkConfig,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticConfig {
    pub context_bits: u32,
    pub walkers: usize,
    pub history: usize,
    pub hotness_window: u64,
    pub mode: InjectionMode,
    pub walk: WalkConfig,
    pub pie: PieConfig,
    pub controller: LookaheadController,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            context_bits: 24,
            walkers: 2,
            history: 128,
            hotness_window: 10_000,
            mode: InjectionMode::Dedicated,
            walk: WalkConfig::default(),
            pie: PieConfig::default(),
            controller: LookaheadController::default(),
        }
    }
}

/// One injection, as seen by the driver.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub index: usize,
    pub key: ContextKey,
    pub lookahead: u32,
    pub result: InjectionResult,
    /// The repeat filter reset the entry; the address is not issued.
    pub suppressed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EngineCounters {
    pub injections: u64,
    pub injected_ops: u64,
    pub walks: u64,
    pub walks_deferred: u64,
    pub trims: u64,
    pub armed_events: u64,
}

#[derive(Clone, Debug)]
pub struct SemanticEngine {
    pub cfg: SemanticConfig,
    pub pies: PieArray,
    pub detector: FlakinessDetector,
    pub history: HistoryQueue,
    walker_busy_until: Vec<u64>,
    walk_end: u64,
    /// Cycles with at least one walker busy, over the whole run.
    pub walk_busy_cycles: u64,
    pub counters: EngineCounters,
}

impl SemanticEngine {
    pub fn new(cfg: SemanticConfig) -> SemanticEngine {
        assert!(cfg.walkers > 0, "at least one walker");
        let mut walk = cfg.walk;
        walk.context_bits = cfg.context_bits;
        SemanticEngine {
            cfg: SemanticConfig { walk, ..cfg },
            pies: PieArray::new(cfg.pie),
            detector: FlakinessDetector::new(cfg.hotness_window),
            history: HistoryQueue::new(cfg.history),
            walker_busy_until: vec![0; cfg.walkers],
            walk_end: 0,
            walk_busy_cycles: 0,
            counters: EngineCounters::default(),
        }
    }

    pub fn key(&self, load_ip: u64, bhr: BranchHistory) -> ContextKey {
        context_of(load_ip, bhr, self.cfg.context_bits, self.pies.len())
    }

    /// Runs the armed slice for `op`'s context, if any, on the pre-load state.
    pub fn try_inject(
        &mut self,
        op: &MicroOp,
        state: &ArchState,
        bhr: BranchHistory,
        mem: &mut Hierarchy,
        now: u64,
    ) -> Option<Injection> {
        let key = self.key(op.ip, bhr);
        let pie = try_trigger(&key, &self.pies)?;
        let lookahead = pie.lookahead;
        let result = execute_slice(&pie.slice, state, lookahead, Some(mem), now, self.cfg.mode);
        self.counters.injections += 1;
        self.counters.injected_ops += result.ops_executed as u64;
        self.pies
            .get_mut(key.index)
            .expect("armed entry")
            .injections += 1;
        let suppressed = self
            .pies
            .repeat_address_check(key.index, result.prefetch_addr)
            == RepeatCheck::Reset;
        Some(Injection {
            index: key.index,
            key,
            lookahead,
            result,
            suppressed,
        })
    }

    fn live_issuer(&self, issuer: Issuer) -> Option<usize> {
        match issuer {
            Issuer::Pie { index, ip, bhr } => self
                .pies
                .get(index)
                .filter(|p| p.key.ip == ip && p.key.bhr == bhr && p.state == PieState::Armed)
                .map(|_| index),
            Issuer::Baseline => None,
        }
    }

    pub fn on_sent(&mut self, issuer: Issuer) {
        if let Some(i) = self.live_issuer(issuer) {
            self.pies.record_feedback(i, FeedbackOutcome::Sent);
        }
    }

    pub fn on_useless(&mut self, issuer: Issuer) {
        if let Some(i) = self.live_issuer(issuer) {
            self.pies.record_feedback(i, FeedbackOutcome::Useless);
        }
    }

    pub fn on_hit(&mut self, hit: &QueueHit, queue_len: usize) {
        let Some(i) = self.live_issuer(hit.issuer) else {
            return;
        };
        self.pies.record_feedback(i, FeedbackOutcome::Hit);
        let ctl = self.cfg.controller;
        let pie = self.pies.get_mut(i).expect("live issuer");
        pie.last_reward = reward(hit.depth, queue_len);
        pie.lookahead = ctl.on_hit(
            pie.lookahead,
            &mut pie.hit_depth_ewma,
            &mut pie.hits_since_adapt,
            hit.depth,
        );
    }

    fn claim_walker(&mut self, now: u64, occupancy: u64) -> bool {
        let Some(w) = self.walker_busy_until.iter_mut().find(|b| **b <= now) else {
            self.counters.walks_deferred += 1;
            return false;
        };
        let end = now + occupancy;
        *w = end;
        self.walk_busy_cycles += end.saturating_sub(now.max(self.walk_end));
        self.walk_end = self.walk_end.max(end);
        self.counters.walks += 1;
        true
    }

    /// History, detection and lifecycle work for one retired op.
    pub fn after_retire(
        &mut self,
        ev: &RetiredEvent,
        pre_bhr: BranchHistory,
        l1_missed: Option<bool>,
        now: u64,
    ) {
        self.history.push(HistoryEntry {
            event: *ev,
            bhr: pre_bhr.bits(),
        });
        let Some(missed) = l1_missed else {
            return;
        };
        let key = self.key(ev.op.ip, pre_bhr);
        if let Some(p) = self.pies.get_mut_tagged(&key) {
            p.encounters += 1;
        }
        self.detector
            .observe_load(&mut self.pies, key, missed, ev.retire_index, now);
        let Some(state) = self.pies.get_tagged(&key).map(|p| p.state) else {
            return;
        };
        match state {
            PieState::Gen => {
                let walk = walk_generate(&self.history, &key, &self.cfg.walk);
                let scanned = match &walk {
                    Ok(d) => d.entries_scanned,
                    Err(_) => self.history.len(),
                };
                if !self.claim_walker(now, walk_occupancy(scanned)) {
                    return;
                }
                match walk {
                    Ok(draft) => self.pies.walk_done(key.index, draft),
                    Err(c) => self.pies.reset(key.index, c.into()),
                }
            }
            PieState::Validate => {
                let walk = walk_generate(&self.history, &key, &self.cfg.walk);
                let scanned = walk
                    .as_ref()
                    .map_or(self.history.len(), |d| d.entries_scanned);
                if !self.claim_walker(now, walk_occupancy(scanned)) {
                    return;
                }
                let fresh = match walk {
                    Ok(d) => d,
                    Err(c) => return self.pies.reset(key.index, c.into()),
                };
                let pie = self.pies.get_mut(key.index).expect("tagged entry");
                let stored = pie.draft.as_mut().expect("validating entries hold a draft");
                match validate_pass(stored, &fresh) {
                    Consistency::Consistent => self.pies.validation_passed(key.index),
                    Consistency::Inconsistent => self
                        .pies
                        .reset(key.index, crate::pie::ResetCause::Inconsistent),
                }
            }
            PieState::Trim => {
                let draft = self
                    .pies
                    .get(key.index)
                    .and_then(|p| p.draft.clone())
                    .expect("trim needs a draft");
                if !self.claim_walker(now, walk_occupancy(draft.entries_scanned)) {
                    return;
                }
                self.counters.trims += 1;
                match trim(&draft, &annotate(&draft), self.cfg.walk.max_temps) {
                    Ok(slice) => {
                        self.pies.trim_done(key.index, slice);
                        self.counters.armed_events += 1;
                    }
                    Err(c) => self.pies.reset(key.index, c.into()),
                }
            }
            _ => {}
        }
    }

    pub fn timeout_sweep(&mut self, now: u64) {
        self.pies.timeout_sweep(now);
    }

    pub fn reset_counters(&mut self) {
        self.counters = EngineCounters::default();
    }
}
