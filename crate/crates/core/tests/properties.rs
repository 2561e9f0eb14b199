use proptest::prelude::*;

use semprefetch::context::{context_of, BranchHistory};
use semprefetch::feedback::{LookaheadController, LookaheadPolicy};
use semprefetch::injector::{execute_slice, InjectionMode};
use semprefetch::isa::{step, ArchState, Kind, RetiredEvent};
use semprefetch::memsys::{AccessKind, CacheConfig, Hierarchy};
use semprefetch::pie::MAX_LOOKAHEAD;
use semprefetch::slicer::{check_dependency_completeness, check_side_effect_free, slice_shape};
use semprefetch::workloads::{generate, WorkloadKind, WorkloadSpec};
use semprefetch::{PrefetcherKind, RunConfig, Simulation};

fn small_config(kind: WorkloadKind, prefetcher: PrefetcherKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("workload.kind", kind.name()).unwrap();
    let size = match kind {
        WorkloadKind::NestedTwoPhase => "3000",
        _ => "6000",
    };
    cfg.set("workload.size", size).unwrap();
    cfg.set("sim.warmup", "2000").unwrap();
    cfg.prefetcher = prefetcher;
    cfg
}

fn finished(cfg: &RunConfig) -> Simulation {
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run().unwrap();
    sim
}

fn events(kind: WorkloadKind, limit: usize) -> (Vec<RetiredEvent>, ArchState) {
    let w = generate(&WorkloadSpec {
        size: 500,
        ..WorkloadSpec::new(kind)
    })
    .unwrap();
    let mut state = ArchState::new(w.program.entry().unwrap());
    state.mem.load_image(&w.memory);
    let mut out = Vec::new();
    while !state.halted && out.len() < limit {
        out.push(step(&mut state, &w.program).unwrap());
    }
    (out, state)
}

#[test]
fn execution_is_deterministic() {
    for kind in WorkloadKind::GENERATED {
        let (a, sa) = events(kind, 20_000);
        let (b, sb) = events(kind, 20_000);
        assert_eq!(a, b, "{}", kind.name());
        assert!(sa.program_visible_eq(&sb));
    }
}

/// Re-executes each retired op from its recorded inputs and checks the
/// recorded result, then compares the final register file.
#[test]
fn retired_stream_replays() {
    for kind in WorkloadKind::GENERATED {
        let (evs, fin) = events(kind, 20_000);
        let w = generate(&WorkloadSpec {
            size: 500,
            ..WorkloadSpec::new(kind)
        })
        .unwrap();
        let mut regs = [0u64; 16];
        let mut mem = std::collections::HashMap::<u64, u64>::new();
        let image: std::collections::HashMap<u64, u64> = w.memory.iter().copied().collect();
        for ev in &evs {
            let op = ev.op;
            let read = |o: semprefetch::isa::Operand, regs: &[u64; 16]| match o {
                semprefetch::isa::Operand::Reg(r) if r.is_gpr() => regs[r.index()],
                semprefetch::isa::Operand::Reg(_) => unreachable!("programs read only gprs here"),
                semprefetch::isa::Operand::Imm(v) => v as u64,
            };
            match op.kind {
                Kind::Load => {
                    let a = ev.eff_addr.unwrap();
                    let v = mem.get(&a).or(image.get(&a)).copied().unwrap_or(0);
                    assert_eq!(Some(v), ev.result, "{} load at {:#x}", kind.name(), op.ip);
                    regs[op.dest.unwrap().index()] = v;
                }
                Kind::Store => {
                    mem.insert(ev.eff_addr.unwrap(), read(op.src1.unwrap(), &regs));
                }
                Kind::MovImm | Kind::Mov => {
                    regs[op.dest.unwrap().index()] = read(op.src1.unwrap(), &regs);
                }
                k if k.is_alu() => {
                    let v = semprefetch::isa::alu(
                        k,
                        read(op.src1.unwrap(), &regs),
                        read(op.src2.unwrap(), &regs),
                    );
                    assert_eq!(Some(v), ev.result);
                    regs[op.dest.unwrap().index()] = v;
                }
                _ => {}
            }
        }
        for (i, &v) in regs.iter().enumerate() {
            assert_eq!(v, fin.regs[i], "{} r{i}", kind.name());
        }
    }
}

#[test]
fn prefetchers_are_architecturally_transparent() {
    for kind in WorkloadKind::GENERATED {
        let base = finished(&small_config(kind, PrefetcherKind::None));
        for p in [
            PrefetcherKind::Nextline,
            PrefetcherKind::Stride,
            PrefetcherKind::Semantic,
        ] {
            let sim = finished(&small_config(kind, p));
            assert!(
                sim.state.program_visible_eq(&base.state),
                "{} with {p}",
                kind.name()
            );
        }
    }
}

#[test]
fn reports_are_reproducible_and_seed_dependent() {
    let cfg = small_config(WorkloadKind::BfsCsr, PrefetcherKind::Semantic);
    let a = finished(&cfg).report().to_json();
    let b = finished(&cfg).report().to_json();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.set("sim.seed", "7").unwrap();
    assert_ne!(a, finished(&other).report().to_json());
}

#[test]
fn report_schema_is_stable() {
    fn keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        if let serde_json::Value::Object(m) = v {
            for (k, v) in m {
                let path = format!("{prefix}.{k}");
                out.push(path.clone());
                if !matches!(
                    k.as_str(),
                    "reset_causes" | "slice_size_histogram" | "per_trigger"
                ) {
                    keys(v, &path, out);
                }
            }
        }
    }
    let mut schemas = Vec::new();
    for kind in WorkloadKind::GENERATED {
        for p in PrefetcherKind::ALL {
            let json: serde_json::Value =
                serde_json::from_str(&finished(&small_config(kind, p)).report().to_json()).unwrap();
            let mut k = Vec::new();
            keys(&json, "", &mut k);
            schemas.push(k);
        }
    }
    for w in schemas.windows(2) {
        assert_eq!(w[0], w[1]);
    }
}

#[test]
fn armed_slices_are_complete_and_side_effect_free() {
    for kind in WorkloadKind::GENERATED {
        let sim = finished(&small_config(kind, PrefetcherKind::Semantic));
        let engine = sim.engine.as_ref().unwrap();
        for (_, pie) in engine.pies.armed() {
            assert!(check_dependency_completeness(&pie.slice), "{}", kind.name());
            assert!(check_side_effect_free(&pie.slice), "{}", kind.name());
            assert!(slice_shape(&pie.slice).load_depth >= 1);
        }
    }
}

/// Runs a workload until its oracle load is armed, then checks that the
/// slice at L = 1 predicts the address of the next encounter.
fn replay_at_unit_lookahead(kind: WorkloadKind) -> (usize, usize) {
    let cfg = small_config(kind, PrefetcherKind::Semantic);
    let mut sim = Simulation::new(&cfg).unwrap();
    let load_ip = sim.oracle.as_ref().unwrap().load_ip;
    let mut bhr = BranchHistory::default();
    let mut predicted: Option<u64> = None;
    let (mut checked, mut matched) = (0, 0);
    while !sim.done() && checked < 500 {
        let op = *sim.program.fetch(sim.state.ip).unwrap();
        if op.ip == load_ip {
            let addr = semprefetch::isa::effective_address(&op, &sim.state);
            if let Some(p) = predicted.take() {
                checked += 1;
                matched += (p == addr) as usize;
            }
            let engine = sim.engine.as_ref().unwrap();
            let key = context_of(op.ip, bhr, engine.cfg.context_bits, engine.pies.len());
            if let Some(pie) = engine.pies.get_tagged(&key).filter(|p| !p.slice.is_empty()) {
                let r = execute_slice(&pie.slice, &sim.state, 1, None, 0, InjectionMode::Dedicated);
                predicted = Some(r.prefetch_addr);
            }
        }
        if op.kind == Kind::Br {
            let mut probe = sim.state.clone();
            let ev = step(&mut probe, &sim.program).unwrap();
            bhr = bhr.update(op.ip, ev.taken.unwrap());
        }
        sim.step_one().unwrap();
    }
    (checked, matched)
}

#[test]
fn armed_slice_replays_next_iteration() {
    for kind in [
        WorkloadKind::Stride,
        WorkloadKind::Indirect,
        WorkloadKind::LinkedList,
        WorkloadKind::DoubleDerefFig6,
    ] {
        let (checked, matched) = replay_at_unit_lookahead(kind);
        assert!(checked > 100, "{}: only {checked} checks", kind.name());
        assert_eq!(checked, matched, "{}", kind.name());
    }
}

#[test]
fn lookahead_is_linear_on_affine_slices() {
    for kind in [WorkloadKind::Stride, WorkloadKind::DoubleDerefFig6] {
        let sim = finished(&small_config(kind, PrefetcherKind::Semantic));
        let engine = sim.engine.as_ref().unwrap();
        let (_, pie) = engine
            .pies
            .armed()
            .find(|(_, p)| p.key.ip == sim.oracle.as_ref().unwrap().load_ip)
            .unwrap();
        let at = |l| {
            execute_slice(&pie.slice, &sim.state, l, None, 0, InjectionMode::Dedicated)
                .prefetch_addr
        };
        let delta = at(2).wrapping_sub(at(1));
        assert_ne!(delta, 0);
        for l in 1..=MAX_LOOKAHEAD {
            assert_eq!(
                at(l).wrapping_sub(at(1)),
                delta.wrapping_mul(u64::from(l - 1)),
                "{} L={l}",
                kind.name()
            );
        }
    }
}

fn small_hierarchy(mem_latency: u64) -> Hierarchy {
    let mut c = CacheConfig::default();
    c.l1.size = 1024;
    c.l1.ways = 2;
    c.l2.size = 4096;
    c.l2.ways = 4;
    c.l3.size = 16384;
    c.l3.ways = 4;
    c.mem_latency = mem_latency;
    Hierarchy::new(c).unwrap()
}

fn access_kind(k: u8) -> AccessKind {
    match k % 3 {
        0 => AccessKind::DemandLoad,
        1 => AccessKind::DemandStore,
        _ => AccessKind::Prefetch,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_stays_inclusive(seq in prop::collection::vec((0u64..512, 0u8..3, 0u64..300), 1..400)) {
        let mut h = small_hierarchy(200);
        let mut now = 0;
        for (line, k, gap) in seq {
            now += gap;
            h.access(line * 64, access_kind(k), now);
            prop_assert!(h.check_inclusion());
        }
    }

    #[test]
    fn lower_memory_latency_never_slows_an_access(
        seq in prop::collection::vec((0u64..512, 0u8..3, 0u64..300), 1..400),
        fast in 1u64..200,
        extra in 0u64..300,
    ) {
        let mut a = small_hierarchy(fast);
        let mut b = small_hierarchy(fast + extra);
        let mut now = 0;
        for (line, k, gap) in seq {
            now += gap;
            let ra = a.access(line * 64, access_kind(k), now);
            let rb = b.access(line * 64, access_kind(k), now);
            prop_assert!(ra.latency <= rb.latency);
        }
    }

    /// Closed-loop model of one strided PIE: one prefetch per iteration of
    /// `c` cycles, so a hit lands at depth L and the line is filled iff
    /// L * c >= m. When the miss latency fits under the band's lower edge,
    /// the controller settles on a timely L within 10k iterations.
    #[test]
    fn controller_settles_timely(c in 1u64..16, ratio in 1u64..=8, policy in 0usize..2) {
        let m = c * ratio;
        let policy = [LookaheadPolicy::DynamicFrom1, LookaheadPolicy::DynamicFrom16][policy];
        let ctl = LookaheadController { policy, ..LookaheadController::default() };
        let (mut l, mut ewma, mut since) = (policy.initial(), None, 0);
        let mut settled_at = None;
        for it in 0..20_000u64 {
            let timely = u64::from(l) * c >= m;
            match (timely, settled_at) {
                (true, None) => settled_at = Some(it),
                (false, Some(_)) => prop_assert!(false, "untimely again at iteration {it} with L={l}"),
                _ => {}
            }
            let depth = (l as usize).min(ctl.queue - 1);
            l = ctl.on_hit(l, &mut ewma, &mut since, depth);
            prop_assert!((1..=MAX_LOOKAHEAD).contains(&l));
        }
        prop_assert!(settled_at.is_some_and(|i| i <= 10_000));
    }
}
