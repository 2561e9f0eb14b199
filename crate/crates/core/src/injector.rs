//! Executes armed slices on a private temporary register file just before
//! the triggering load retires.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::context::ContextKey;
use crate::isa::{alu, ArchState, Kind, NUM_TEMPS};
use crate::memsys::{AccessKind, Hierarchy};
use crate::pie::{Pie, PieArray, PieState};
use crate::slicer::{Annotation, SliceMem, SliceOp, SliceSrc};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Separate execution engine; one allocation cycle per injection.
    Dedicated,
    /// Slice ops share the core and cost one cycle each.
    Shared,
}

impl FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dedicated" => Ok(InjectionMode::Dedicated),
            "shared" => Ok(InjectionMode::Shared),
            _ => Err(format!("unknown injection mode `{s}`")),
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectionMode::Dedicated => "dedicated",
            InjectionMode::Shared => "shared",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionResult {
    pub prefetch_addr: u64,
    pub ops_executed: usize,
    pub cost_cycles: u64,
    /// Earliest cycle the final address is known, after interior loads resolve.
    pub ready_cycle: u64,
    pub temps_final: [u64; NUM_TEMPS as usize],
}

/// The armed entry for `key`, if any. Tag mismatches and unarmed entries yield none.
pub fn try_trigger<'a>(key: &ContextKey, pies: &'a PieArray) -> Option<&'a Pie> {
    pies.get_tagged(key).filter(|p| p.state == PieState::Armed)
}

pub fn injection_cost(ops_executed: usize, mode: InjectionMode) -> u64 {
    match mode {
        InjectionMode::Dedicated => 1,
        InjectionMode::Shared => ops_executed as u64,
    }
}

fn read(src: SliceSrc, state: &ArchState, temps: &[u64]) -> u64 {
    match src {
        SliceSrc::Live(r) => state.reg(r),
        SliceSrc::Temp(t) => temps[t as usize],
        SliceSrc::Imm(v) => v,
    }
}

fn address(m: &SliceMem, state: &ArchState, temps: &[u64]) -> u64 {
    let base = m.base.map_or(0, |s| read(s, state, temps));
    let index = m.index.map_or(0, |s| read(s, state, temps));
    base.wrapping_add(index.wrapping_mul(m.scale as u64))
        .wrapping_add(m.disp as u64)
}

/// Runs `slice` against a read-only snapshot. Interior loads probe the
/// hierarchy as prefetches; the final load's address is returned and not
/// accessed here.
pub fn execute_slice(
    slice: &[SliceOp],
    state: &ArchState,
    lookahead: u32,
    mem: Option<&mut Hierarchy>,
    now: u64,
    mode: InjectionMode,
) -> InjectionResult {
    assert!(!slice.is_empty() && slice.len() <= 16);
    let mut temps = [0u64; NUM_TEMPS as usize];
    let mut ready = now;
    let mut mem = mem;
    let (last, body) = slice.split_last().unwrap();
    for op in body {
        let value = match op.kind {
            Kind::MovImm | Kind::Mov => read(op.srcs[0], state, &temps),
            Kind::Load => {
                let addr = address(op.mem.as_ref().expect("load has an address"), state, &temps);
                if let Some(h) = mem.as_deref_mut() {
                    ready = h.access(addr, AccessKind::Prefetch, ready).fill_time;
                }
                state.mem.read_u64(addr)
            }
            k => {
                let a = read(op.srcs[0], state, &temps);
                let b = match (op.annotation, op.srcs[1]) {
                    (Annotation::Stride(_), SliceSrc::Imm(s)) => s.wrapping_mul(lookahead as u64),
                    (_, s) => read(s, state, &temps),
                };
                alu(k, a, b)
            }
        };
        let t = op.dest.expect("interior slice ops write a temporary");
        temps[t as usize] = value;
    }
    let prefetch_addr = address(
        last.mem.as_ref().expect("final op is a load"),
        state,
        &temps,
    );
    InjectionResult {
        prefetch_addr,
        ops_executed: slice.len(),
        cost_cycles: injection_cost(slice.len(), mode),
        ready_cycle: ready,
        temps_final: temps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Reg;

    fn stride_slice(stride: u64) -> Vec<SliceOp> {
        vec![
            SliceOp {
                ip: 0x4,
                kind: Kind::Add,
                dest: Some(0),
                srcs: vec![SliceSrc::Live(Reg::r(1)), SliceSrc::Imm(stride)],
                mem: None,
                annotation: Annotation::Stride(stride as i64),
            },
            SliceOp {
                ip: 0x8,
                kind: Kind::Load,
                dest: None,
                srcs: vec![],
                mem: Some(SliceMem {
                    base: Some(SliceSrc::Temp(0)),
                    index: None,
                    scale: 1,
                    disp: 0,
                }),
                annotation: Annotation::Dynamic,
            },
        ]
    }

    #[test]
    fn stride_scales_with_lookahead() {
        let mut st = ArchState::new(0);
        st.regs[1] = 0x10000;
        for l in [1u32, 4, 64] {
            let r = execute_slice(&stride_slice(64), &st, l, None, 0, InjectionMode::Shared);
            assert_eq!(r.prefetch_addr, 0x10000 + 64 * l as u64);
            assert_eq!(r.cost_cycles, 2);
        }
        let r = execute_slice(&stride_slice(64), &st, 1, None, 0, InjectionMode::Dedicated);
        assert_eq!(r.cost_cycles, 1);
    }

    #[test]
    fn interior_load_reads_memory_and_delays_ready() {
        let mut st = ArchState::new(0);
        st.regs[1] = 0x2000;
        st.mem.write_u64(0x2000, 0x9000);
        let slice = vec![
            SliceOp {
                ip: 0x0,
                kind: Kind::Load,
                dest: Some(0),
                srcs: vec![],
                mem: Some(SliceMem {
                    base: Some(SliceSrc::Live(Reg::r(1))),
                    index: None,
                    scale: 1,
                    disp: 0,
                }),
                annotation: Annotation::Dynamic,
            },
            SliceOp {
                ip: 0x4,
                kind: Kind::Load,
                dest: None,
                srcs: vec![],
                mem: Some(SliceMem {
                    base: Some(SliceSrc::Temp(0)),
                    index: None,
                    scale: 1,
                    disp: 8,
                }),
                annotation: Annotation::Dynamic,
            },
        ];
        let mut h = Hierarchy::new(Default::default()).unwrap();
        let r = execute_slice(&slice, &st, 1, Some(&mut h), 100, InjectionMode::Dedicated);
        assert_eq!(r.prefetch_addr, 0x9008);
        assert_eq!(r.ready_cycle, 100 + 254);
        assert_eq!(r.temps_final[0], 0x9000);
        assert!(h.l1_contains(0x2000));
    }

    #[test]
    fn unmapped_interior_load_reads_zero() {
        let mut st = ArchState::new(0);
        st.regs[1] = 0xdead_0000;
        let slice = vec![
            SliceOp {
                ip: 0x0,
                kind: Kind::Load,
                dest: Some(0),
                srcs: vec![],
                mem: Some(SliceMem {
                    base: Some(SliceSrc::Live(Reg::r(1))),
                    index: None,
                    scale: 1,
                    disp: 0,
                }),
                annotation: Annotation::Dynamic,
            },
            SliceOp {
                ip: 0x4,
                kind: Kind::Load,
                dest: None,
                srcs: vec![],
                mem: Some(SliceMem {
                    base: Some(SliceSrc::Temp(0)),
                    index: None,
                    scale: 1,
                    disp: 16,
                }),
                annotation: Annotation::Dynamic,
            },
        ];
        let r = execute_slice(&slice, &st, 1, None, 0, InjectionMode::Shared);
        assert_eq!(r.prefetch_addr, 16);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(injection_cost(3, InjectionMode::Shared), 3);
        assert_eq!(injection_cost(3, InjectionMode::Dedicated), 1);
        assert_eq!(injection_cost(16, InjectionMode::Shared), 16);
    }
}
