//! Synthetic programs with closed-form oracles for their critical load.
//!
//! Every generator places code at `CODE_BASE` with 4-byte op spacing and
//! returns the demand-address stream of one designated load, computed from
//! the memory layout without running the program.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::isa::{Cond, Kind, MemRef, MicroOp, Operand, Program, Reg};

pub const CODE_BASE: u64 = 0x400000;
const DATA_BASE: u64 = 0x1000_0000;
const REGION: u64 = 0x1000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Stride,
    Indirect,
    LinkedList,
    BfsCsr,
    DoubleDerefFig6,
    NestedTwoPhase,
    File,
}

impl WorkloadKind {
    pub const GENERATED: [WorkloadKind; 6] = [
        WorkloadKind::Stride,
        WorkloadKind::Indirect,
        WorkloadKind::LinkedList,
        WorkloadKind::BfsCsr,
        WorkloadKind::DoubleDerefFig6,
        WorkloadKind::NestedTwoPhase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Stride => "stride",
            WorkloadKind::Indirect => "indirect",
            WorkloadKind::LinkedList => "linked_list",
            WorkloadKind::BfsCsr => "bfs_csr",
            WorkloadKind::DoubleDerefFig6 => "double_deref_fig6",
            WorkloadKind::NestedTwoPhase => "nested_two_phase",
            WorkloadKind::File => "file",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::GENERATED
            .into_iter()
            .chain([WorkloadKind::File])
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown workload `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Elements, nodes, vertices or outer iterations depending on the kind.
    pub size: usize,
    /// Out-degree for the graph workload.
    pub degree: usize,
    /// Element spacing in bytes for the stride workload.
    pub stride: u64,
    /// Inner trip count for the nested workload.
    pub inner: usize,
    pub seed: u64,
    /// Program text for `File` workloads.
    pub path: Option<String>,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind) -> WorkloadSpec {
        let size = match kind {
            WorkloadKind::Stride => 60_000,
            WorkloadKind::Indirect => 100_000,
            WorkloadKind::LinkedList => 100_000,
            WorkloadKind::BfsCsr => 65_536,
            WorkloadKind::DoubleDerefFig6 => 100_000,
            WorkloadKind::NestedTwoPhase => 20_000,
            WorkloadKind::File => 0,
        };
        WorkloadSpec {
            kind,
            size,
            degree: 4,
            stride: 64,
            inner: 4,
            seed: 1,
            path: None,
        }
    }
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec::new(WorkloadKind::Stride)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid workload parameter: {0}")]
    Invalid(String),
    #[error("file workloads are loaded by the driver")]
    NotGenerated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExpectedShape {
    pub load_depth: u32,
    pub alu_min: u32,
    pub alu_max: u32,
}

#[derive(Clone, Debug)]
pub struct Oracle {
    pub load_ip: u64,
    /// Demand addresses of `load_ip` in retirement order.
    pub stream: Vec<u64>,
    /// Distance in the stream between consecutive encounters of one context.
    pub period: usize,
    /// False when the slice only reaches one step ahead regardless of L.
    pub lookahead_sensitive: bool,
    pub shape: ExpectedShape,
    /// Further loads whose misses count as critical for coverage.
    pub critical_ips: Vec<u64>,
}

impl Oracle {
    /// Expected prefetch address for an injection just before encounter `i`.
    pub fn future_address(&self, i: usize, lookahead: u32) -> Option<u64> {
        let steps = if self.lookahead_sensitive {
            lookahead as usize
        } else {
            1
        };
        self.stream.get(i + self.period * steps).copied()
    }

    /// None when the stream does not reach far enough to judge.
    pub fn check(&self, prefetch_addr: u64, i: usize, lookahead: u32) -> Option<bool> {
        self.future_address(i, lookahead)
            .map(|a| a == prefetch_addr)
    }
}

#[derive(Clone, Debug)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub program: Program,
    pub memory: Vec<(u64, u64)>,
    pub oracle: Option<Oracle>,
}

/// Appends ops at consecutive addresses.
struct Builder {
    ops: Vec<MicroOp>,
}

impl Builder {
    fn new() -> Builder {
        Builder { ops: Vec::new() }
    }

    fn here(&self) -> u64 {
        CODE_BASE + 4 * self.ops.len() as u64
    }

    fn emit(&mut self, f: impl FnOnce(u64) -> MicroOp) -> u64 {
        let ip = self.here();
        self.ops.push(f(ip));
        ip
    }

    fn patch_target(&mut self, ip: u64, target: u64) {
        let op = &mut self.ops[((ip - CODE_BASE) / 4) as usize];
        op.branch.as_mut().expect("patching a branch").target = target;
    }

    fn finish(self) -> Program {
        Program::new(self.ops).expect("generated programs are well formed")
    }
}

fn r(n: u8) -> Reg {
    Reg::r(n)
}

fn reg(n: u8) -> Operand {
    Operand::Reg(Reg::r(n))
}

fn imm(v: i64) -> Operand {
    Operand::Imm(v)
}

pub fn generate(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    if spec.kind == WorkloadKind::File {
        return Err(WorkloadError::NotGenerated);
    }
    if spec.size < 2 {
        return Err(WorkloadError::Invalid("size must be at least 2".into()));
    }
    let (program, memory, oracle) = match spec.kind {
        WorkloadKind::Stride => stride(spec)?,
        WorkloadKind::Indirect => indirect(spec),
        WorkloadKind::LinkedList => linked_list(spec),
        WorkloadKind::BfsCsr => bfs_csr(spec)?,
        WorkloadKind::DoubleDerefFig6 => double_deref(spec),
        WorkloadKind::NestedTwoPhase => nested_two_phase(spec)?,
        WorkloadKind::File => unreachable!(),
    };
    Ok(Workload {
        spec: spec.clone(),
        program,
        memory,
        oracle: Some(oracle),
    })
}

type Generated = (Program, Vec<(u64, u64)>, Oracle);

/// `for i in 0..n { acc += a[i] }` with configurable element spacing.
fn stride(spec: &WorkloadSpec) -> Result<Generated, WorkloadError> {
    if spec.stride == 0 || !spec.stride.is_multiple_of(8) {
        return Err(WorkloadError::Invalid(
            "stride must be a non-zero multiple of 8".into(),
        ));
    }
    let n = spec.size as u64;
    let base = DATA_BASE;
    let last = base + spec.stride * (n - 1);
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(1), (base - spec.stride) as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(8), last as i64));
    let top = b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(1), reg(1), imm(spec.stride as i64)));
    let load_ip = b.emit(|ip| MicroOp::load(ip, r(2), MemRef::base(r(1), 0)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(3), reg(3), reg(2)));
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(1), reg(8), top));
    b.emit(MicroOp::halt);
    let memory = (0..n).map(|i| (base + spec.stride * i, i)).collect();
    let stream = (0..n).map(|i| base + spec.stride * i).collect();
    let oracle = Oracle {
        load_ip,
        stream,
        period: 1,
        lookahead_sensitive: true,
        shape: ExpectedShape {
            load_depth: 1,
            alu_min: 1,
            alu_max: 1,
        },
        critical_ips: vec![load_ip],
    };
    Ok((b.finish(), memory, oracle))
}

/// `for i in 0..n { acc += A[B[i]] }` with B uniform over a 2^20-word A.
fn indirect(spec: &WorkloadSpec) -> Generated {
    const A_WORDS: u64 = 1 << 20;
    let n = spec.size as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b_base = DATA_BASE;
    let a_base = DATA_BASE + REGION;
    let idx: Vec<u64> = (0..n).map(|_| rng.gen_range(0..A_WORDS)).collect();
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(1), (b_base - 8) as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(6), a_base as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(8), (b_base + 8 * (n - 1)) as i64));
    let top = b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(1), reg(1), imm(8)));
    b.emit(|ip| MicroOp::load(ip, r(2), MemRef::base(r(1), 0)));
    let load_ip = b.emit(|ip| MicroOp::load(ip, r(3), MemRef::indexed(r(6), r(2), 8, 0)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(4), reg(4), reg(3)));
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(1), reg(8), top));
    b.emit(MicroOp::halt);
    let memory = idx
        .iter()
        .enumerate()
        .map(|(i, &v)| (b_base + 8 * i as u64, v))
        .collect();
    let stream = idx.iter().map(|&v| a_base + 8 * v).collect();
    let oracle = Oracle {
        load_ip,
        stream,
        period: 1,
        lookahead_sensitive: true,
        shape: ExpectedShape {
            load_depth: 2,
            alu_min: 1,
            alu_max: 2,
        },
        critical_ips: vec![load_ip],
    };
    (b.finish(), memory, oracle)
}

/// Node addresses of the list in traversal order: a seeded shuffle of
/// 64-byte slots in an arena four times the node count.
pub fn list_layout(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<u64> = (0..4 * n as u64).collect();
    slots.shuffle(&mut rng);
    slots.truncate(n);
    slots.into_iter().map(|s| DATA_BASE + 64 * s).collect()
}

/// Walks a singly linked list summing the value field at offset 8.
fn linked_list(spec: &WorkloadSpec) -> Generated {
    let nodes = list_layout(spec.size, spec.seed);
    let mut memory = Vec::with_capacity(2 * nodes.len());
    for (i, &node) in nodes.iter().enumerate() {
        let next = nodes.get(i + 1).copied().unwrap_or(0);
        memory.push((node, next));
        memory.push((node + 8, i as u64));
    }
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(1), nodes[0] as i64));
    let top = b.emit(|ip| MicroOp::load(ip, r(2), MemRef::base(r(1), 8)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(3), reg(3), reg(2)));
    b.emit(|ip| MicroOp::load(ip, r(1), MemRef::base(r(1), 0)));
    b.emit(|ip| MicroOp::br(ip, Cond::Ne, reg(1), imm(0), top));
    b.emit(MicroOp::halt);
    let oracle = Oracle {
        load_ip: top,
        stream: nodes.iter().map(|&a| a + 8).collect(),
        period: 1,
        lookahead_sensitive: false,
        shape: ExpectedShape {
            load_depth: 2,
            alu_min: 0,
            alu_max: 0,
        },
        critical_ips: vec![top],
    };
    (b.finish(), memory, oracle)
}

/// Random graph with fixed out-degree and the BFS visit order from vertex 0.
/// Unreached vertices follow in index order.
pub fn bfs_graph(n: usize, degree: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adj: Vec<u64> = (0..n * degree)
        .map(|_| rng.gen_range(0..n as u64))
        .collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        order.push(v as u64);
        for &w in &adj[v * degree..(v + 1) * degree] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                queue.push_back(w as usize);
            }
        }
    }
    order.extend((0..n).filter(|&v| !seen[v]).map(|v| v as u64));
    (order, adj)
}

/// CSR traversal in BFS order:
/// `for v in vlist { for e in xoff[v]..xoff[v+1] { acc += depth[adj[e]] } }`.
/// Each `depth[adj[e]]` load sits at the end of a four-deep load chain.
fn bfs_csr(spec: &WorkloadSpec) -> Result<Generated, WorkloadError> {
    if spec.degree == 0 || spec.degree > 8 {
        return Err(WorkloadError::Invalid("degree must be in 1..=8".into()));
    }
    let (n, d) = (spec.size, spec.degree);
    let (vlist, adj) = bfs_graph(n, d, spec.seed);
    let vlist_base = DATA_BASE;
    let xoff_base = DATA_BASE + REGION;
    let adj_base = DATA_BASE + 2 * REGION;
    let depth_base = DATA_BASE + 3 * REGION;

    let mut memory = Vec::with_capacity(2 * n + n * d + 1);
    memory.extend(
        vlist
            .iter()
            .enumerate()
            .map(|(i, &v)| (vlist_base + 8 * i as u64, v)),
    );
    memory.extend((0..=n).map(|v| (xoff_base + 8 * v as u64, (v * d) as u64)));
    memory.extend(
        adj.iter()
            .enumerate()
            .map(|(e, &w)| (adj_base + 8 * e as u64, w)),
    );
    memory.extend((0..n).map(|v| (depth_base + 8 * v as u64, (v % 7) as u64)));

    // The neighbour loop is unrolled over the fixed degree; copy k reads adj[xoff[v] + k].
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(1), (vlist_base - 8) as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(6), xoff_base as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(7), adj_base as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(9), depth_base as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(12), (vlist_base + 8 * (n as u64 - 1)) as i64));
    let outer = b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(1), reg(1), imm(8)));
    b.emit(|ip| MicroOp::load(ip, r(2), MemRef::base(r(1), 0)));
    b.emit(|ip| MicroOp::load(ip, r(3), MemRef::indexed(r(6), r(2), 8, 0)));
    let mut critical_ips = Vec::with_capacity(d);
    for k in 0..d as i64 {
        b.emit(|ip| MicroOp::load(ip, r(5), MemRef::indexed(r(7), r(3), 8, 8 * k)));
        critical_ips.push(b.emit(|ip| MicroOp::load(ip, r(10), MemRef::indexed(r(9), r(5), 8, 0))));
        b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(11), reg(11), reg(10)));
    }
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(1), reg(12), outer));
    b.emit(MicroOp::halt);

    let stream = vlist
        .iter()
        .map(|&v| depth_base + 8 * adj[v as usize * d])
        .collect();
    let oracle = Oracle {
        load_ip: critical_ips[0],
        stream,
        period: 1,
        lookahead_sensitive: true,
        shape: ExpectedShape {
            load_depth: 4,
            alu_min: 1,
            alu_max: 1,
        },
        critical_ips,
    };
    Ok((b.finish(), memory, oracle))
}

/// The double-dereference loop with an unrelated multiply in between:
/// `p = *(sp+16); q = *p; i++; x = q[i]`.
fn double_deref(spec: &WorkloadSpec) -> Generated {
    let n = spec.size as u64;
    let stack = 0x7fff_0000u64;
    let p_cell = DATA_BASE;
    let array = DATA_BASE + REGION;
    let mut memory = vec![(stack + 16, p_cell), (p_cell, array)];
    memory.extend((0..n).map(|i| (array + 8 * i, i * 3)));
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(7), stack as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(0), -1));
    b.emit(|ip| MicroOp::mov_imm(ip, r(8), n as i64 - 1));
    b.emit(|ip| MicroOp::mov_imm(ip, r(10), 3));
    let top = b.emit(|ip| MicroOp::load(ip, r(2), MemRef::base(r(7), 16)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Mul, r(9), reg(9), reg(10)));
    b.emit(|ip| MicroOp::load(ip, r(3), MemRef::base(r(2), 0)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(0), reg(0), imm(1)));
    let load_ip = b.emit(|ip| MicroOp::load(ip, r(4), MemRef::indexed(r(3), r(0), 8, 0)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(5), reg(5), reg(4)));
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(0), reg(8), top));
    b.emit(MicroOp::halt);
    let oracle = Oracle {
        load_ip,
        stream: (0..n).map(|i| array + 8 * i).collect(),
        period: 1,
        lookahead_sensitive: true,
        shape: ExpectedShape {
            load_depth: 1,
            alu_min: 1,
            alu_max: 1,
        },
        critical_ips: vec![load_ip],
    };
    (b.finish(), memory, oracle)
}

/// One load fed from two different producers depending on the parity of
/// the outer iteration:
/// `for j { for k in 0..inner { p = j odd ? (b += 128) : (a += 64); acc += *p } }`.
fn nested_two_phase(spec: &WorkloadSpec) -> Result<Generated, WorkloadError> {
    if spec.inner == 0 || spec.inner > 6 {
        return Err(WorkloadError::Invalid(
            "inner trip count must be in 1..=6".into(),
        ));
    }
    let (outer_n, inner) = (spec.size as u64, spec.inner as u64);
    let a_base = DATA_BASE;
    let b_base = DATA_BASE + REGION;
    let mut b = Builder::new();
    b.emit(|ip| MicroOp::mov_imm(ip, r(1), (a_base - 64) as i64));
    b.emit(|ip| MicroOp::mov_imm(ip, r(2), (b_base - 128) as i64));
    let outer = b.emit(|ip| MicroOp::alu(ip, Kind::And, r(11), reg(10), imm(1)));
    b.emit(|ip| MicroOp::mov_imm(ip, r(12), 0));
    let inner_top = b.emit(|ip| MicroOp::br(ip, Cond::Ne, reg(11), imm(0), 0));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(1), reg(1), imm(64)));
    b.emit(|ip| MicroOp::mov(ip, r(5), reg(1)));
    let skip = b.emit(|ip| MicroOp::jmp(ip, 0));
    let path_b = b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(2), reg(2), imm(128)));
    b.emit(|ip| MicroOp::mov(ip, r(5), reg(2)));
    let load_ip = b.emit(|ip| MicroOp::load(ip, r(3), MemRef::base(r(5), 0)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(0), reg(0), reg(3)));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(12), reg(12), imm(1)));
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(12), imm(inner as i64), inner_top));
    b.emit(|ip| MicroOp::alu(ip, Kind::Add, r(10), reg(10), imm(1)));
    b.emit(|ip| MicroOp::br(ip, Cond::Lt, reg(10), imm(outer_n as i64), outer));
    b.emit(MicroOp::halt);
    b.patch_target(inner_top, path_b);
    b.patch_target(skip, load_ip);

    let (mut a, mut bb) = (a_base, b_base);
    let mut stream = Vec::with_capacity((outer_n * inner) as usize);
    for j in 0..outer_n {
        for _ in 0..inner {
            if j % 2 == 0 {
                stream.push(a);
                a += 64;
            } else {
                stream.push(bb);
                bb += 128;
            }
        }
    }
    let memory = stream.iter().map(|&addr| (addr, addr >> 6)).collect();
    let oracle = Oracle {
        load_ip,
        stream,
        period: 2 * spec.inner,
        lookahead_sensitive: true,
        shape: ExpectedShape {
            load_depth: 1,
            alu_min: 1,
            alu_max: 1,
        },
        critical_ips: vec![load_ip],
    };
    Ok((b.finish(), memory, oracle))
}
