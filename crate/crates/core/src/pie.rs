//! Prefetch injection entries: lifecycle state machine, usefulness counters
//! and the reset/disable policy.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::context::{ContextKey, FlakinessRecord};
use crate::slicer::{AbortCause, SliceDraft, SliceOp};

pub const PIE_ENTRIES: usize = 16;
pub const MAX_LOOKAHEAD: u32 = 64;
pub const COUNTER_CAP: u32 = 64;
pub const REPEAT_LIMIT: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PieState {
    Active,
    Gen,
    Validate,
    Trim,
    Armed,
    Disabled,
}

impl PieState {
    pub const ALL: [PieState; 6] = [
        PieState::Active,
        PieState::Gen,
        PieState::Validate,
        PieState::Trim,
        PieState::Armed,
        PieState::Disabled,
    ];

    pub fn under_construction(self) -> bool {
        matches!(self, PieState::Gen | PieState::Validate | PieState::Trim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    QualifiedHotFlaky,
    WalkDone,
    Pass,
    Fail,
    TrimDone,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 5] = [
        LifecycleEvent::QualifiedHotFlaky,
        LifecycleEvent::WalkDone,
        LifecycleEvent::Pass,
        LifecycleEvent::Fail,
        LifecycleEvent::TrimDone,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetCause {
    Inconsistent,
    Timeout,
    TooLong,
    ComplexInstruction,
    TooManyTemps,
    HashCollision,
    LowUsefulness,
    RepeatedAddress,
}

impl ResetCause {
    pub const ALL: [ResetCause; 8] = [
        ResetCause::Inconsistent,
        ResetCause::Timeout,
        ResetCause::TooLong,
        ResetCause::ComplexInstruction,
        ResetCause::TooManyTemps,
        ResetCause::HashCollision,
        ResetCause::LowUsefulness,
        ResetCause::RepeatedAddress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResetCause::Inconsistent => "inconsistent",
            ResetCause::Timeout => "timeout",
            ResetCause::TooLong => "too_long",
            ResetCause::ComplexInstruction => "complex_instruction",
            ResetCause::TooManyTemps => "too_many_temps",
            ResetCause::HashCollision => "hash_collision",
            ResetCause::LowUsefulness => "low_usefulness",
            ResetCause::RepeatedAddress => "repeated_address",
        }
    }
}

impl From<AbortCause> for ResetCause {
    fn from(c: AbortCause) -> ResetCause {
        match c {
            AbortCause::Inconsistent => ResetCause::Inconsistent,
            AbortCause::Timeout => ResetCause::Timeout,
            AbortCause::TooLong => ResetCause::TooLong,
            AbortCause::ComplexInstruction => ResetCause::ComplexInstruction,
            AbortCause::TooManyTemps => ResetCause::TooManyTemps,
            AbortCause::HashCollision => ResetCause::HashCollision,
        }
    }
}

impl fmt::Display for ResetCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("illegal transition {event:?} from {state:?}")]
pub struct IllegalTransition {
    pub state: PieState,
    pub event: LifecycleEvent,
}

/// Successor state. `passes` is the validation count after a `Pass`.
/// `Fail` leads to `Active`; whether the entry is disabled instead is
/// decided by the reset policy, not the transition graph.
pub fn next_state(
    state: PieState,
    event: LifecycleEvent,
    passes: u8,
    rounds: u8,
) -> Result<PieState, IllegalTransition> {
    use LifecycleEvent as E;
    use PieState as S;
    match (state, event) {
        (S::Active, E::QualifiedHotFlaky) => Ok(S::Gen),
        (S::Gen, E::WalkDone) => Ok(S::Validate),
        (S::Validate, E::Pass) if passes < rounds => Ok(S::Validate),
        (S::Validate, E::Pass) => Ok(S::Trim),
        (S::Trim, E::TrimDone) => Ok(S::Armed),
        (S::Gen | S::Validate | S::Trim | S::Armed, E::Fail) => Ok(S::Active),
        _ => Err(IllegalTransition { state, event }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PieConfig {
    pub entries: usize,
    pub usefulness: f64,
    pub stale_resets: u32,
    pub timeout: u64,
    pub validation_rounds: u8,
    pub initial_lookahead: u32,
}

impl Default for PieConfig {
    fn default() -> Self {
        PieConfig {
            entries: PIE_ENTRIES,
            usefulness: 0.10,
            stale_resets: 25,
            timeout: 100_000,
            validation_rounds: 3,
            initial_lookahead: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pie {
    pub key: ContextKey,
    pub state: PieState,
    pub flakiness: FlakinessRecord,
    pub draft: Option<SliceDraft>,
    /// Draft as first generated, before validation rounds are appended.
    pub first_draft: Option<SliceDraft>,
    pub slice: Vec<SliceOp>,
    pub lookahead: u32,
    pub sent: u32,
    pub useless: u32,
    /// Set once the counters have seen enough traffic for the usefulness test.
    pub steady: bool,
    pub resets: u32,
    pub validations_passed: u8,
    pub last_addr: Option<u64>,
    /// Length of the current run of identical emitted addresses.
    pub repeat_count: u32,
    pub hit_depth_ewma: Option<f64>,
    pub hits_since_adapt: u32,
    pub last_reward: u32,
    pub gen_cycle: u64,
    /// Encounters of this context since allocation.
    pub encounters: u64,
    pub armed_at_encounter: Option<u64>,
    pub total_sent: u64,
    pub total_hits: u64,
    pub total_useless: u64,
    pub injections: u64,
}

impl Pie {
    pub fn new(key: ContextKey, flakiness: FlakinessRecord, initial_lookahead: u32) -> Pie {
        Pie {
            key,
            state: PieState::Active,
            flakiness,
            draft: None,
            first_draft: None,
            slice: Vec::new(),
            lookahead: initial_lookahead.clamp(1, MAX_LOOKAHEAD),
            sent: 0,
            useless: 0,
            steady: false,
            resets: 0,
            validations_passed: 0,
            last_addr: None,
            repeat_count: 0,
            hit_depth_ewma: None,
            hits_since_adapt: 0,
            last_reward: 0,
            gen_cycle: 0,
            encounters: 1,
            armed_at_encounter: None,
            total_sent: 0,
            total_hits: 0,
            total_useless: 0,
            injections: 0,
        }
    }

    pub fn usefulness(&self) -> f64 {
        if self.sent == 0 {
            1.0
        } else {
            1.0 - self.useless as f64 / self.sent as f64
        }
    }

    /// Right-shifts both counters once either exceeds the cap.
    fn maintain_counters(&mut self) {
        if self.sent > COUNTER_CAP || self.useless > COUNTER_CAP {
            self.sent >>= 1;
            self.useless >>= 1;
        }
        self.useless = self.useless.min(self.sent);
    }

    fn transition(&mut self, event: LifecycleEvent, rounds: u8) -> Result<(), IllegalTransition> {
        self.state = next_state(self.state, event, self.validations_passed, rounds)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackOutcome {
    Sent,
    Useless,
    Hit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepeatCheck {
    Ok,
    Reset,
}

#[derive(Clone, Debug)]
pub struct PieArray {
    entries: Vec<Option<Pie>>,
    pub cfg: PieConfig,
    pub reset_histogram: BTreeMap<ResetCause, u64>,
    pub validation_failures: u64,
    pub disabled_total: u64,
}

impl PieArray {
    pub fn new(cfg: PieConfig) -> PieArray {
        assert!(
            cfg.entries.is_power_of_two(),
            "PIE array size must be a power of two"
        );
        PieArray {
            entries: vec![None; cfg.entries],
            cfg,
            reset_histogram: ResetCause::ALL.iter().map(|&c| (c, 0)).collect(),
            validation_failures: 0,
            disabled_total: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Pie> {
        self.entries[index].as_ref()
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut Pie> {
        self.entries[index].as_mut()
    }

    pub fn get_tagged(&self, key: &ContextKey) -> Option<&Pie> {
        self.entries[key.index].as_ref().filter(|p| p.key == *key)
    }

    pub fn get_mut_tagged(&mut self, key: &ContextKey) -> Option<&mut Pie> {
        self.entries[key.index].as_mut().filter(|p| p.key == *key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Pie)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    /// Installs a new entry for `key` unless the slot holds an armed entry
    /// or a disabled entry for the same key.
    pub fn allocate(&mut self, key: ContextKey, flakiness: FlakinessRecord) -> bool {
        if let Some(old) = &self.entries[key.index] {
            match old.state {
                PieState::Armed => return false,
                PieState::Disabled if old.key == key => return false,
                s if s.under_construction() => {
                    *self
                        .reset_histogram
                        .get_mut(&ResetCause::HashCollision)
                        .unwrap() += 1
                }
                _ => {}
            }
        }
        self.entries[key.index] = Some(Pie::new(key, flakiness, self.cfg.initial_lookahead));
        true
    }

    pub fn qualify(&mut self, index: usize, now: u64) {
        let pie = self.entries[index].as_mut().expect("qualify on empty slot");
        pie.transition(
            LifecycleEvent::QualifiedHotFlaky,
            self.cfg.validation_rounds,
        )
        .expect("qualify from Active");
        pie.gen_cycle = now;
    }

    pub fn walk_done(&mut self, index: usize, draft: SliceDraft) {
        let rounds = self.cfg.validation_rounds;
        let pie = self.entries[index].as_mut().expect("walk on empty slot");
        pie.transition(LifecycleEvent::WalkDone, rounds)
            .expect("walk_done from Gen");
        pie.first_draft = Some(draft.clone());
        pie.draft = Some(draft);
        pie.validations_passed = 0;
    }

    pub fn validation_passed(&mut self, index: usize) {
        let rounds = self.cfg.validation_rounds;
        let pie = self.entries[index]
            .as_mut()
            .expect("validate on empty slot");
        pie.validations_passed += 1;
        pie.transition(LifecycleEvent::Pass, rounds)
            .expect("pass from Validate");
    }

    pub fn trim_done(&mut self, index: usize, slice: Vec<SliceOp>) {
        let rounds = self.cfg.validation_rounds;
        let pie = self.entries[index].as_mut().expect("trim on empty slot");
        pie.transition(LifecycleEvent::TrimDone, rounds)
            .expect("trim_done from Trim");
        pie.slice = slice;
        pie.armed_at_encounter = Some(pie.encounters);
        pie.last_addr = None;
        pie.repeat_count = 0;
    }

    /// Clears the entry back to `Active`, or disables it once it has been
    /// reset more than `stale_resets` times.
    pub fn reset(&mut self, index: usize, cause: ResetCause) {
        let cfg = self.cfg;
        let pie = self.entries[index].as_mut().expect("reset on empty slot");
        assert_ne!(pie.state, PieState::Disabled, "reset of a disabled entry");
        if pie.state != PieState::Active {
            pie.transition(LifecycleEvent::Fail, cfg.validation_rounds)
                .expect("fail edge");
        }
        *self.reset_histogram.get_mut(&cause).unwrap() += 1;
        if cause == ResetCause::Inconsistent {
            self.validation_failures += 1;
        }
        pie.resets += 1;
        pie.draft = None;
        pie.slice.clear();
        pie.sent = 0;
        pie.useless = 0;
        pie.steady = false;
        pie.validations_passed = 0;
        pie.last_addr = None;
        pie.repeat_count = 0;
        pie.hit_depth_ewma = None;
        pie.hits_since_adapt = 0;
        pie.lookahead = cfg.initial_lookahead.clamp(1, MAX_LOOKAHEAD);
        pie.flakiness = FlakinessRecord::default();
        if pie.resets > cfg.stale_resets {
            pie.state = PieState::Disabled;
            self.disabled_total += 1;
        }
    }

    /// Counter maintenance for one feedback event. Returns true if the
    /// entry was reset for low usefulness.
    pub fn record_feedback(&mut self, index: usize, outcome: FeedbackOutcome) -> bool {
        let threshold = self.cfg.usefulness;
        let pie = self.entries[index]
            .as_mut()
            .expect("feedback on empty slot");
        match outcome {
            FeedbackOutcome::Sent => {
                pie.sent += 1;
                pie.total_sent += 1;
                if pie.sent >= COUNTER_CAP / 2 {
                    pie.steady = true;
                }
            }
            FeedbackOutcome::Useless => {
                pie.useless += 1;
                pie.total_useless += 1;
            }
            FeedbackOutcome::Hit => {
                pie.total_hits += 1;
                return false;
            }
        }
        pie.maintain_counters();
        if pie.state == PieState::Armed && pie.steady && pie.usefulness() < threshold {
            self.reset(index, ResetCause::LowUsefulness);
            return true;
        }
        false
    }

    /// Tracks runs of identical emitted addresses; a run of `REPEAT_LIMIT`
    /// resets the entry.
    pub fn repeat_address_check(&mut self, index: usize, addr: u64) -> RepeatCheck {
        let pie = self.entries[index]
            .as_mut()
            .expect("repeat check on empty slot");
        if pie.last_addr == Some(addr) {
            pie.repeat_count += 1;
        } else {
            pie.last_addr = Some(addr);
            pie.repeat_count = 1;
        }
        if pie.repeat_count >= REPEAT_LIMIT {
            self.reset(index, ResetCause::RepeatedAddress);
            RepeatCheck::Reset
        } else {
            RepeatCheck::Ok
        }
    }

    /// Resets entries that stayed under construction longer than the timeout.
    pub fn timeout_sweep(&mut self, now: u64) -> usize {
        let timeout = self.cfg.timeout;
        let stale: Vec<usize> = self
            .iter()
            .filter(|(_, p)| {
                p.state.under_construction() && now.saturating_sub(p.gen_cycle) > timeout
            })
            .map(|(i, _)| i)
            .collect();
        for &i in &stale {
            self.reset(i, ResetCause::Timeout);
        }
        stale.len()
    }

    pub fn armed(&self) -> impl Iterator<Item = (usize, &Pie)> {
        self.iter().filter(|(_, p)| p.state == PieState::Armed)
    }
}
