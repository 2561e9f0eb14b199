//! Slice construction: the backward dependency walk, validation bookkeeping,
//! constant/stride classification and the trim pass that produces the final
//! side-effect-free slice.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::context::ContextKey;
use crate::history::HistoryQueue;
use crate::isa::{Kind, MemRef, MicroOp, Operand, Reg, NUM_TEMPS};

pub const MAX_SLICE_OPS: usize = 16;
pub const RENAME_SETS: usize = 4;
pub const RENAME_WAYS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCause {
    Inconsistent,
    Timeout,
    TooLong,
    ComplexInstruction,
    TooManyTemps,
    HashCollision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Annotation {
    Dynamic,
    Const(u64),
    Stride(i64),
}

/// Constant when every observation agrees, stride when every successive
/// delta agrees and is non-zero, dynamic otherwise.
pub fn classify_values(obs: &[u64]) -> Annotation {
    let Some(&first) = obs.first() else {
        return Annotation::Dynamic;
    };
    if obs.len() < 2 {
        return Annotation::Dynamic;
    }
    if obs.iter().all(|&v| v == first) {
        return Annotation::Const(first);
    }
    let delta = obs[1].wrapping_sub(obs[0]);
    if obs.windows(2).all(|w| w[1].wrapping_sub(w[0]) == delta) {
        Annotation::Stride(delta as i64)
    } else {
        Annotation::Dynamic
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DraftOp {
    /// Architectural form. Renamed store/load pairs appear as moves through a temporary.
    pub op: MicroOp,
    /// Destination value, one per observation round.
    pub values: Vec<u64>,
    /// The destination register is overwritten again before the trigger retires.
    pub clobbered: bool,
}

/// Load address to slice position map, 4 sets x 4 ways with FIFO replacement.
#[derive(Clone, Debug, Default)]
pub struct RenameCache {
    sets: [Vec<(u64, usize)>; RENAME_SETS],
}

impl RenameCache {
    fn set_of(addr: u64) -> usize {
        ((addr >> 3) as usize) % RENAME_SETS
    }

    pub fn insert(&mut self, addr: u64, pos: usize) {
        let set = &mut self.sets[Self::set_of(addr)];
        set.retain(|&(a, _)| a != addr);
        if set.len() == RENAME_WAYS {
            set.remove(0);
        }
        set.push((addr, pos));
    }

    /// Removes and returns the slice position recorded for `addr`.
    pub fn take(&mut self, addr: u64) -> Option<usize> {
        let set = &mut self.sets[Self::set_of(addr)];
        let i = set.iter().position(|&(a, _)| a == addr)?;
        Some(set.remove(i).1)
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SliceDraft {
    /// Program order, trigger load last.
    pub ops: Vec<DraftOp>,
    /// Registers still unresolved when the walk stopped. They are read live.
    pub source_bitmap: u32,
    pub rename_cache: RenameCache,
    pub temps_used: u8,
    pub entries_scanned: usize,
}

impl SliceDraft {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn rounds(&self) -> usize {
        self.ops.first().map_or(0, |o| o.values.len())
    }

    fn same_shape(&self, other: &SliceDraft) -> bool {
        self.ops.len() == other.ops.len()
            && self
                .ops
                .iter()
                .zip(&other.ops)
                .all(|(a, b)| a.op == b.op && a.clobbered == b.clobbered)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkConfig {
    pub max_ops: usize,
    pub max_temps: u8,
    /// Number of round trips through the trigger context the walk may make.
    pub loop_unroll: u32,
    pub context_bits: u32,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            max_ops: MAX_SLICE_OPS,
            max_temps: NUM_TEMPS,
            loop_unroll: 1,
            context_bits: 24,
        }
    }
}

/// Walker occupancy in cycles: eight entries per cycle, capped at 64.
pub fn walk_occupancy(entries_scanned: usize) -> u64 {
    (entries_scanned.div_ceil(8) as u64).clamp(1, 64)
}

/// Backward dependency walk from the youngest history entry, which must be
/// the trigger load of `key`.
pub fn walk_generate(
    hist: &HistoryQueue,
    key: &ContextKey,
    cfg: &WalkConfig,
) -> Result<SliceDraft, AbortCause> {
    let mut walk = hist.walk_backward(0);
    let trigger = walk.next().expect("walk needs the trigger in history");
    assert!(
        trigger.event.op.kind == Kind::Load && trigger.event.op.ip == key.ip,
        "youngest history entry is not the trigger load"
    );
    let ctx_mask = if cfg.context_bits >= 32 {
        u32::MAX
    } else {
        (1u32 << cfg.context_bits) - 1
    };

    let mut rev: Vec<DraftOp> = vec![DraftOp {
        op: trigger.event.op,
        values: vec![trigger.event.result.unwrap_or(0)],
        clobbered: false,
    }];
    let mut bitmap = trigger.event.op.addr_source_bitmap();
    let mut rename_cache = RenameCache::default();
    let mut temps_used = 0u8;
    let mut written_since = 0u32;
    let mut round_trips = 0;
    let mut scanned = 1;

    for entry in walk {
        if bitmap == 0 {
            break;
        }
        scanned += 1;
        let ev = &entry.event;
        let op = ev.op;

        if op.kind == Kind::Load && op.ip == key.ip && entry.bhr & ctx_mask == key.bhr {
            round_trips += 1;
            if round_trips >= cfg.loop_unroll {
                break;
            }
        }

        if op.kind == Kind::Store {
            let addr = ev.eff_addr.expect("stores carry an address");
            if let Some(pos) = rename_cache.take(addr) {
                if temps_used == cfg.max_temps {
                    return Err(AbortCause::TooManyTemps);
                }
                if rev.len() == cfg.max_ops {
                    return Err(AbortCause::TooLong);
                }
                let temp = Reg::t(temps_used);
                temps_used += 1;
                let load = rev[pos].op;
                let load_dest = load.dest.expect("loads have a destination");
                rev[pos].op = MicroOp::mov(load.ip, load_dest, Operand::Reg(temp));
                let data = op.src1.expect("stores carry data");
                if let Operand::Reg(r) = data {
                    if r.is_flags() {
                        return Err(AbortCause::ComplexInstruction);
                    }
                    bitmap |= r.bit();
                }
                let value = rev[pos].values[0];
                rev.push(DraftOp {
                    op: MicroOp::mov(op.ip, temp, data),
                    values: vec![value],
                    clobbered: false,
                });
            }
            continue;
        }

        let dests = op.dest_bitmap();
        if dests & bitmap == 0 {
            written_since |= dests;
            continue;
        }
        if !(matches!(op.kind, Kind::MovImm | Kind::Mov | Kind::Load) || op.kind.is_alu()) {
            return Err(AbortCause::ComplexInstruction);
        }
        if op.source_bitmap() & Reg::FLAGS.bit() != 0 {
            return Err(AbortCause::ComplexInstruction);
        }
        if rev.len() == cfg.max_ops {
            return Err(AbortCause::TooLong);
        }
        let clobbered = op.dest.is_some_and(|d| written_since & d.bit() != 0);
        bitmap &= !dests;
        bitmap |= op.source_bitmap();
        if op.kind == Kind::Load {
            rename_cache.insert(ev.eff_addr.expect("loads carry an address"), rev.len());
        }
        rev.push(DraftOp {
            op,
            values: vec![ev.result.unwrap_or(0)],
            clobbered,
        });
        written_since |= dests;
    }

    rev.reverse();
    Ok(SliceDraft {
        ops: rev,
        source_bitmap: bitmap,
        rename_cache,
        temps_used,
        entries_scanned: scanned,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    Consistent,
    Inconsistent,
}

/// Compares a fresh walk against the stored draft and, when they agree,
/// appends the fresh destination values to the stored log.
pub fn validate_pass(stored: &mut SliceDraft, fresh: &SliceDraft) -> Consistency {
    if !stored.same_shape(fresh) {
        return Consistency::Inconsistent;
    }
    for (s, f) in stored.ops.iter_mut().zip(&fresh.ops) {
        s.values.extend_from_slice(&f.values);
    }
    Consistency::Consistent
}

/// Per-op annotations over the observation log. The trigger is always dynamic.
pub fn annotate(draft: &SliceDraft) -> Vec<Annotation> {
    let n = draft.ops.len();
    draft
        .ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            if i + 1 == n {
                Annotation::Dynamic
            } else {
                classify_values(&op.values)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SliceSrc {
    /// Architectural register read at injection time.
    Live(Reg),
    Temp(u8),
    Imm(u64),
}

impl fmt::Display for SliceSrc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceSrc::Live(r) => write!(f, "{r}"),
            SliceSrc::Temp(t) => write!(f, "t{t}"),
            SliceSrc::Imm(v) => write!(f, "{}", *v as i64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SliceMem {
    pub base: Option<SliceSrc>,
    pub index: Option<SliceSrc>,
    pub scale: u8,
    pub disp: i64,
}

impl fmt::Display for SliceMem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(b) = self.base {
            parts.push(b.to_string());
        }
        if let Some(i) = self.index {
            parts.push(format!("{i}*{}", self.scale));
        }
        if parts.is_empty() || self.disp != 0 {
            parts.push(self.disp.to_string());
        }
        write!(f, "[{}]", parts.join(" + ").replace("+ -", "- "))
    }
}

/// One op of an armed slice. Destinations are temporaries only; the final
/// load has no destination and its address is the prefetch address.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceOp {
    pub ip: u64,
    pub kind: Kind,
    pub dest: Option<u8>,
    pub srcs: Vec<SliceSrc>,
    pub mem: Option<SliceMem>,
    pub annotation: Annotation,
}

impl SliceOp {
    pub fn temp_reads(&self) -> impl Iterator<Item = u8> + '_ {
        let mem = self
            .mem
            .iter()
            .flat_map(|m| m.base.into_iter().chain(m.index));
        self.srcs
            .iter()
            .copied()
            .chain(mem)
            .filter_map(|s| match s {
                SliceSrc::Temp(t) => Some(t),
                _ => None,
            })
    }

    pub fn live_reads(&self) -> impl Iterator<Item = Reg> + '_ {
        let mem = self
            .mem
            .iter()
            .flat_map(|m| m.base.into_iter().chain(m.index));
        self.srcs
            .iter()
            .copied()
            .chain(mem)
            .filter_map(|s| match s {
                SliceSrc::Live(r) => Some(r),
                _ => None,
            })
    }
}

impl fmt::Display for SliceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dest = self
            .dest
            .map_or_else(|| "-".to_string(), |t| format!("t{t}"));
        let mut args = vec![dest];
        args.extend(self.srcs.iter().map(|s| match (s, self.annotation) {
            (SliceSrc::Imm(v), Annotation::Stride(_)) => format!("{}*L", *v as i64),
            _ => s.to_string(),
        }));
        args.extend(self.mem.map(|m| m.to_string()));
        write!(f, "{:#x}: {} {}", self.ip, self.kind, args.join(", "))?;
        match self.annotation {
            Annotation::Const(_) => f.write_str("  # const"),
            Annotation::Stride(_) => f.write_str("  # stride"),
            Annotation::Dynamic if self.dest.is_none() => f.write_str("  # prefetch"),
            Annotation::Dynamic => Ok(()),
        }
    }
}

/// Intermediate op with architectural register references.
struct Kept {
    ip: u64,
    kind: Kind,
    dest: Option<Reg>,
    srcs: Vec<Operand>,
    mem: Option<MemRef>,
    annotation: Annotation,
    /// Registers in `srcs` that must be read live even if redefined earlier.
    force_live: bool,
}

/// Produces the final armed slice: constants become immediate moves,
/// strides become `dest + stride*L` anchored on the live register, the
/// dependency subtrees behind both are dropped and all destinations move
/// to temporaries.
pub fn trim(
    draft: &SliceDraft,
    annotations: &[Annotation],
    max_temps: u8,
) -> Result<Vec<SliceOp>, AbortCause> {
    assert_eq!(draft.ops.len(), annotations.len());
    let (trigger, body) = draft.ops.split_last().expect("draft holds the trigger");

    let mut needed = trigger.op.addr_source_bitmap();
    let mut kept: Vec<Kept> = Vec::new();
    for (d, &ann) in body.iter().zip(annotations).rev() {
        let op = d.op;
        let dests = op.dest_bitmap();
        if dests & needed == 0 {
            continue;
        }
        needed &= !dests;
        let dest = op.dest.expect("slice ops write a register");
        let ann = match ann {
            Annotation::Stride(_) if d.clobbered || dest.is_temp() => Annotation::Dynamic,
            a => a,
        };
        match ann {
            Annotation::Const(c) => kept.push(Kept {
                ip: op.ip,
                kind: Kind::MovImm,
                dest: Some(dest),
                srcs: vec![Operand::Imm(c as i64)],
                mem: None,
                annotation: ann,
                force_live: false,
            }),
            Annotation::Stride(s) => kept.push(Kept {
                ip: op.ip,
                kind: Kind::Add,
                dest: Some(dest),
                srcs: vec![Operand::Reg(dest), Operand::Imm(s)],
                mem: None,
                annotation: ann,
                force_live: true,
            }),
            Annotation::Dynamic => {
                needed |= op.source_bitmap();
                kept.push(Kept {
                    ip: op.ip,
                    kind: op.kind,
                    dest: Some(dest),
                    srcs: op.src1.into_iter().chain(op.src2).collect(),
                    mem: op.mem,
                    annotation: ann,
                    force_live: false,
                });
            }
        }
    }
    kept.reverse();
    kept.push(Kept {
        ip: trigger.op.ip,
        kind: Kind::Load,
        dest: None,
        srcs: Vec::new(),
        mem: trigger.op.mem,
        annotation: Annotation::Dynamic,
        force_live: false,
    });

    // Resolve every register read to the slice position defining it, or to a live read.
    #[derive(Clone, Copy)]
    enum Res {
        Def(usize),
        Live(Reg),
        Imm(u64),
    }
    let mut last_def: std::collections::HashMap<Reg, usize> = std::collections::HashMap::new();
    let mut resolved_srcs: Vec<Vec<Res>> = Vec::with_capacity(kept.len());
    let mut resolved_mem: Vec<Option<(Option<Res>, Option<Res>)>> = Vec::with_capacity(kept.len());
    let mut last_use: Vec<Option<usize>> = vec![None; kept.len()];
    for (i, k) in kept.iter().enumerate() {
        let mut resolve = |r: Reg, force_live: bool| -> Res {
            match last_def.get(&r) {
                Some(&d) if !force_live => {
                    last_use[d] = Some(i);
                    Res::Def(d)
                }
                _ => {
                    debug_assert!(!r.is_temp(), "dangling temporary read");
                    Res::Live(r)
                }
            }
        };
        let srcs = k
            .srcs
            .iter()
            .map(|&s| match s {
                Operand::Reg(r) => resolve(r, k.force_live),
                Operand::Imm(v) => Res::Imm(v as u64),
            })
            .collect();
        let mem = k.mem.map(|m| {
            (
                m.base.map(|r| resolve(r, false)),
                m.index.map(|r| resolve(r, false)),
            )
        });
        resolved_srcs.push(srcs);
        resolved_mem.push(mem);
        if let Some(d) = k.dest {
            last_def.insert(d, i);
        }
    }

    // Allocate temporaries, reusing one once its last reader has issued.
    let mut free: BTreeSet<u8> = (0..max_temps).collect();
    let mut live: Vec<(u8, usize)> = Vec::new();
    let mut temp_of: Vec<Option<u8>> = vec![None; kept.len()];
    let mut out = Vec::with_capacity(kept.len());
    for (i, k) in kept.iter().enumerate() {
        let to_src = |r: Res| match r {
            Res::Def(d) => SliceSrc::Temp(temp_of[d].expect("defined before use")),
            Res::Live(r) => SliceSrc::Live(r),
            Res::Imm(v) => SliceSrc::Imm(v),
        };
        let srcs: Vec<SliceSrc> = resolved_srcs[i].iter().map(|&r| to_src(r)).collect();
        let mem = k.mem.zip(resolved_mem[i]).map(|(m, (b, x))| SliceMem {
            base: b.map(to_src),
            index: x.map(to_src),
            scale: m.scale,
            disp: m.disp,
        });
        live.retain(|&(t, until)| {
            if until <= i {
                free.insert(t);
                false
            } else {
                true
            }
        });
        let dest = match k.dest {
            Some(_) => {
                let t = free.pop_first().ok_or(AbortCause::TooManyTemps)?;
                live.push((t, last_use[i].unwrap_or(i)));
                temp_of[i] = Some(t);
                Some(t)
            }
            None => None,
        };
        out.push(SliceOp {
            ip: k.ip,
            kind: k.kind,
            dest,
            srcs,
            mem,
            annotation: k.annotation,
        });
    }
    Ok(out)
}

/// Every temporary read is preceded by a write to it within the slice.
pub fn check_dependency_completeness(slice: &[SliceOp]) -> bool {
    let mut written = 0u32;
    for op in slice {
        if op.temp_reads().any(|t| written & (1 << t) == 0) {
            return false;
        }
        if let Some(t) = op.dest {
            written |= 1 << t;
        }
    }
    true
}

/// Side-effect freedom: no stores and nothing but temporaries written.
pub fn check_side_effect_free(slice: &[SliceOp]) -> bool {
    slice
        .iter()
        .all(|op| op.kind != Kind::Store && op.dest.is_none_or(|t| t < NUM_TEMPS))
        && slice
            .last()
            .is_some_and(|op| op.kind == Kind::Load && op.dest.is_none())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SliceShape {
    /// Longest chain of dependent loads, the final load included.
    pub load_depth: u32,
    /// Arithmetic ops (moves excluded).
    pub alu_ops: u32,
}

pub fn slice_shape(slice: &[SliceOp]) -> SliceShape {
    let mut depth_of_temp = [0u32; NUM_TEMPS as usize];
    let mut max_depth = 0;
    let mut alu_ops = 0;
    for op in slice {
        let input = op
            .temp_reads()
            .map(|t| depth_of_temp[t as usize])
            .max()
            .unwrap_or(0);
        let d = input + (op.kind == Kind::Load) as u32;
        max_depth = max_depth.max(d);
        if op.kind.is_alu() {
            alu_ops += 1;
        }
        if let Some(t) = op.dest {
            depth_of_temp[t as usize] = d;
        }
    }
    SliceShape {
        load_depth: max_depth,
        alu_ops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{context_of, BranchHistory};
    use crate::history::HistoryEntry;
    use crate::isa::{step, ArchState, Cond, Program};

    fn r(n: u8) -> Reg {
        Reg::r(n)
    }

    /// Runs `program` for `steps` ops, recording history, and returns the
    /// history positioned right after the `nth` retirement of `load_ip`.
    fn history_at(
        program: &Program,
        init: &[(u64, u64)],
        load_ip: u64,
        nth: usize,
    ) -> HistoryQueue {
        let mut st = ArchState::new(program.entry().unwrap());
        st.mem.load_image(init);
        let mut hist = HistoryQueue::new(128);
        let mut seen = 0;
        loop {
            let ev = step(&mut st, program).unwrap();
            hist.push(HistoryEntry { event: ev, bhr: 0 });
            if ev.op.ip == load_ip {
                seen += 1;
                if seen == nth {
                    return hist;
                }
            }
        }
    }

    fn key(ip: u64) -> ContextKey {
        context_of(ip, BranchHistory::default(), 24, 16)
    }

    fn stride_loop() -> Program {
        Program::new(vec![
            MicroOp::mov_imm(0x0, r(1), 0x1000),
            MicroOp::alu(0x4, Kind::Add, r(1), Operand::Reg(r(1)), Operand::Imm(8)),
            MicroOp::load(0x8, r(2), MemRef::base(r(1), 0)),
            MicroOp::alu(0xc, Kind::Add, r(3), Operand::Reg(r(3)), Operand::Reg(r(2))),
            MicroOp::br(
                0x10,
                Cond::Lt,
                Operand::Reg(r(1)),
                Operand::Imm(0x100000),
                0x4,
            ),
            MicroOp::halt(0x14),
        ])
        .unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_values(&[0x2000; 4]), Annotation::Const(0x2000));
        assert_eq!(classify_values(&[8, 16, 24, 32]), Annotation::Stride(8));
        assert_eq!(classify_values(&[3, 9, 4, 7]), Annotation::Dynamic);
        assert_eq!(classify_values(&[32, 24, 16, 8]), Annotation::Stride(-8));
    }

    #[test]
    fn straight_line_stride_walk() {
        // Hand walk over the 10 most recent ops: LOAD needs r1; the ADD at 0x4
        // produces it; the previous LOAD at 0x8 closes the round trip.
        let p = stride_loop();
        let hist = history_at(&p, &[], 0x8, 3);
        let d = walk_generate(&hist, &key(0x8), &WalkConfig::default()).unwrap();
        let ips: Vec<u64> = d.ops.iter().map(|o| o.op.ip).collect();
        assert_eq!(ips, vec![0x4, 0x8]);
        assert_eq!(d.ops[0].values, vec![0x1018]);
        assert_eq!(d.source_bitmap, r(1).bit());
        assert_eq!(d.entries_scanned, 5);
    }

    #[test]
    fn too_long_chain_aborts() {
        // r1 is rebuilt by 20 dependent adds before every load.
        let mut ops = vec![MicroOp::mov_imm(0x0, r(1), 0)];
        let mut ip = 0x4;
        for _ in 0..20 {
            ops.push(MicroOp::alu(
                ip,
                Kind::Add,
                r(1),
                Operand::Reg(r(1)),
                Operand::Imm(8),
            ));
            ip += 4;
        }
        let load_ip = ip;
        ops.push(MicroOp::load(load_ip, r(2), MemRef::base(r(1), 0)));
        ops.push(MicroOp::jmp(load_ip + 4, 0x4));
        let p = Program::new(ops).unwrap();
        let hist = history_at(&p, &[], load_ip, 2);
        assert_eq!(
            walk_generate(&hist, &key(load_ip), &WalkConfig::default()).unwrap_err(),
            AbortCause::TooLong
        );
    }

    #[test]
    fn store_load_pair_becomes_moves() {
        // r5 is spilled to the stack and reloaded before addressing.
        let p = Program::new(vec![
            MicroOp::mov_imm(0x0, r(7), 0x9000),
            MicroOp::mov_imm(0x4, r(5), 0x1000),
            MicroOp::alu(0x8, Kind::Add, r(5), Operand::Reg(r(5)), Operand::Imm(64)),
            MicroOp::store(0xc, MemRef::base(r(7), 0), Operand::Reg(r(5))),
            MicroOp::mov_imm(0x10, r(5), 0),
            MicroOp::load(0x14, r(6), MemRef::base(r(7), 0)),
            MicroOp::load(0x18, r(2), MemRef::base(r(6), 0)),
            MicroOp::alu(0x1c, Kind::Add, r(5), Operand::Reg(r(6)), Operand::Imm(0)),
            MicroOp::jmp(0x20, 0x8),
        ])
        .unwrap();
        let hist = history_at(&p, &[], 0x18, 3);
        let d = walk_generate(&hist, &key(0x18), &WalkConfig::default()).unwrap();
        let kinds: Vec<Kind> = d.ops.iter().map(|o| o.op.kind).collect();
        assert_eq!(d.temps_used, 1);
        assert!(d.ops.iter().all(|o| o.op.kind != Kind::Store));
        let store_mov = d.ops.iter().find(|o| o.op.ip == 0xc).unwrap();
        assert_eq!(store_mov.op.dest, Some(Reg::t(0)));
        let load_mov = d.ops.iter().find(|o| o.op.ip == 0x14).unwrap();
        assert_eq!(load_mov.op.kind, Kind::Mov);
        assert_eq!(load_mov.op.src1, Some(Operand::Reg(Reg::t(0))));
        assert_eq!(kinds.last(), Some(&Kind::Load));
    }

    #[test]
    fn trim_renames_and_drops_const_subtree() {
        // LOAD r2,[r7] (const) ; LOAD r3,[r2] (const) ; ADD r0,r0,1 (stride) ; LOAD r4,[r3+r0*8]
        let draft = SliceDraft {
            ops: vec![
                DraftOp {
                    op: MicroOp::load(0x0, r(2), MemRef::base(r(7), 16)),
                    values: vec![0x5000; 4],
                    clobbered: false,
                },
                DraftOp {
                    op: MicroOp::load(0x8, r(3), MemRef::base(r(2), 0)),
                    values: vec![0x8000; 4],
                    clobbered: false,
                },
                DraftOp {
                    op: MicroOp::alu(0xc, Kind::Add, r(0), Operand::Reg(r(0)), Operand::Imm(1)),
                    values: vec![4, 5, 6, 7],
                    clobbered: false,
                },
                DraftOp {
                    op: MicroOp::load(0x10, r(4), MemRef::indexed(r(3), r(0), 8, 0)),
                    values: vec![1, 2, 3, 4],
                    clobbered: false,
                },
            ],
            source_bitmap: r(7).bit(),
            rename_cache: RenameCache::default(),
            temps_used: 0,
            entries_scanned: 8,
        };
        let ann = annotate(&draft);
        let slice = trim(&draft, &ann, 8).unwrap();
        assert_eq!(slice.len(), 3);
        assert_eq!(slice[0].kind, Kind::MovImm);
        assert_eq!(slice[0].srcs, vec![SliceSrc::Imm(0x8000)]);
        assert_eq!(slice[1].kind, Kind::Add);
        assert_eq!(slice[1].srcs, vec![SliceSrc::Live(r(0)), SliceSrc::Imm(1)]);
        assert_eq!(slice[1].annotation, Annotation::Stride(1));
        assert_eq!(
            slice[2].mem,
            Some(SliceMem {
                base: Some(SliceSrc::Temp(0)),
                index: Some(SliceSrc::Temp(1)),
                scale: 8,
                disp: 0
            })
        );
        assert!(check_side_effect_free(&slice));
        assert!(check_dependency_completeness(&slice));
        assert_eq!(
            slice_shape(&slice),
            SliceShape {
                load_depth: 1,
                alu_ops: 1
            }
        );
    }

    #[test]
    fn all_const_slice_degenerates() {
        let draft = SliceDraft {
            ops: vec![
                DraftOp {
                    op: MicroOp::alu(0x0, Kind::Add, r(1), Operand::Reg(r(9)), Operand::Imm(8)),
                    values: vec![0x40; 4],
                    clobbered: false,
                },
                DraftOp {
                    op: MicroOp::load(0x4, r(2), MemRef::base(r(1), 0)),
                    values: vec![0; 4],
                    clobbered: false,
                },
            ],
            source_bitmap: r(9).bit(),
            rename_cache: RenameCache::default(),
            temps_used: 0,
            entries_scanned: 4,
        };
        let slice = trim(&draft, &annotate(&draft), 8).unwrap();
        assert_eq!(slice.len(), 2);
        assert_eq!(slice[0].kind, Kind::MovImm);
        assert_eq!(slice[1].kind, Kind::Load);
    }

    #[test]
    fn dynamic_chain_keeps_length() {
        // Linked-list step: next pointer then value field, nothing constant.
        let draft = SliceDraft {
            ops: vec![
                DraftOp {
                    op: MicroOp::load(0x8, r(1), MemRef::base(r(1), 0)),
                    values: vec![0x7100, 0x3300, 0x9940, 0x1200],
                    clobbered: false,
                },
                DraftOp {
                    op: MicroOp::load(0x0, r(2), MemRef::base(r(1), 8)),
                    values: vec![1, 2, 3, 4],
                    clobbered: false,
                },
            ],
            source_bitmap: r(1).bit(),
            rename_cache: RenameCache::default(),
            temps_used: 0,
            entries_scanned: 4,
        };
        let slice = trim(&draft, &annotate(&draft), 8).unwrap();
        assert_eq!(slice.len(), draft.len());
        assert_eq!(slice[0].dest, Some(0));
        assert_eq!(slice[0].mem.unwrap().base, Some(SliceSrc::Live(r(1))));
        assert_eq!(slice[1].mem.unwrap().base, Some(SliceSrc::Temp(0)));
    }

    #[test]
    fn trim_fails_past_temp_budget() {
        // Nine values all live at the final op need nine temporaries.
        let mut ops = Vec::new();
        for i in 0..9u8 {
            ops.push(DraftOp {
                op: MicroOp::load(i as u64 * 4, r(i), MemRef::base(r(15), i as i64 * 8)),
                values: vec![1, 5, 2, 9],
                clobbered: false,
            });
        }
        let mut acc = Vec::new();
        // Accumulate into r9 so every loaded value stays live until its add.
        let mut ip = 0x100;
        for i in 0..8u8 {
            let dst = r(9);
            let a = if i == 0 { r(0) } else { r(9) };
            acc.push(DraftOp {
                op: MicroOp::alu(ip, Kind::Add, dst, Operand::Reg(a), Operand::Reg(r(i + 1))),
                values: vec![3, 1, 4, 1],
                clobbered: false,
            });
            ip += 4;
        }
        // Reordering loads before the adds keeps all nine live simultaneously.
        ops.extend(acc);
        ops.push(DraftOp {
            op: MicroOp::load(0x200, r(10), MemRef::base(r(9), 0)),
            values: vec![0; 4],
            clobbered: false,
        });
        let draft = SliceDraft {
            ops,
            source_bitmap: r(15).bit(),
            rename_cache: RenameCache::default(),
            temps_used: 0,
            entries_scanned: 30,
        };
        assert_eq!(
            trim(&draft, &annotate(&draft), 8).unwrap_err(),
            AbortCause::TooManyTemps
        );
        assert!(trim(&draft, &annotate(&draft), 9).is_ok());
    }

    #[test]
    fn rename_cache_is_fifo_per_set() {
        let mut rc = RenameCache::default();
        // Addresses with the same (addr >> 3) % 4 share a set.
        for i in 0..5u64 {
            rc.insert(i * 32, i as usize);
        }
        assert_eq!(rc.len(), 4);
        assert_eq!(rc.take(0), None);
        assert_eq!(rc.take(32), Some(1));
        assert_eq!(rc.take(32), None);
    }

    #[test]
    fn occupancy_rounds_up_and_caps() {
        assert_eq!(walk_occupancy(1), 1);
        assert_eq!(walk_occupancy(8), 1);
        assert_eq!(walk_occupancy(9), 2);
        assert_eq!(walk_occupancy(128), 16);
        assert_eq!(walk_occupancy(10_000), 64);
    }
}
