//! Micro-op ISA, architectural state and the single-stepping functional executor.
//!
//! The register universe is flat: `r0..r15` are general purpose, `t0..t7` are
//! temporaries reserved for injected slices and `f` holds the flags written by
//! every ALU op. That gives a 25-entry set which fits a `u32` bitmap.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const NUM_GPRS: u8 = 16;
pub const NUM_TEMPS: u8 = 8;
pub const NUM_REGS: usize = 25;

/// Register id. `0..16` are `r0..r15`, `16..24` are `t0..t7`, `24` is `f`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Reg(u8);

impl Reg {
    pub const FLAGS: Reg = Reg(24);

    pub const fn r(n: u8) -> Reg {
        assert!(n < NUM_GPRS);
        Reg(n)
    }

    pub const fn t(n: u8) -> Reg {
        assert!(n < NUM_TEMPS);
        Reg(NUM_GPRS + n)
    }

    pub fn from_index(idx: usize) -> Option<Reg> {
        (idx < NUM_REGS).then_some(Reg(idx as u8))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn bit(self) -> u32 {
        1 << self.0
    }

    pub fn is_gpr(self) -> bool {
        self.0 < NUM_GPRS
    }

    pub fn is_temp(self) -> bool {
        (NUM_GPRS..NUM_GPRS + NUM_TEMPS).contains(&self.0)
    }

    pub fn is_flags(self) -> bool {
        self == Reg::FLAGS
    }

    /// Temporary number for `t0..t7`.
    pub fn temp_index(self) -> Option<u8> {
        self.is_temp().then(|| self.0 - NUM_GPRS)
    }

    /// Iterates the registers whose bits are set in `bitmap`.
    pub fn iter_bitmap(bitmap: u32) -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8)
            .filter(move |i| bitmap & (1 << i) != 0)
            .map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_gpr() {
            write!(f, "r{}", self.0)
        } else if self.is_temp() {
            write!(f, "t{}", self.0 - NUM_GPRS)
        } else {
            f.write_str("f")
        }
    }
}

impl std::str::FromStr for Reg {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "f" {
            return Ok(Reg::FLAGS);
        }
        let (class, num) = s.split_at(1.min(s.len()));
        let n: u8 = num.parse().map_err(|_| ())?;
        match class {
            "r" if n < NUM_GPRS => Ok(Reg::r(n)),
            "t" if n < NUM_TEMPS => Ok(Reg::t(n)),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

impl Operand {
    pub fn reg(self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Kind {
    MovImm,
    Mov,
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Load,
    Store,
    Br,
    Jmp,
    Halt,
}

impl Kind {
    pub const ALL: [Kind; 15] = [
        Kind::MovImm,
        Kind::Mov,
        Kind::Add,
        Kind::Sub,
        Kind::Mul,
        Kind::And,
        Kind::Or,
        Kind::Xor,
        Kind::Shl,
        Kind::Shr,
        Kind::Load,
        Kind::Store,
        Kind::Br,
        Kind::Jmp,
        Kind::Halt,
    ];

    /// Two-operand arithmetic/logic ops. These also write `f`.
    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Kind::Add
                | Kind::Sub
                | Kind::Mul
                | Kind::And
                | Kind::Or
                | Kind::Xor
                | Kind::Shl
                | Kind::Shr
        )
    }

    pub fn is_mem(self) -> bool {
        matches!(self, Kind::Load | Kind::Store)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Kind::MovImm => "MOV_IMM",
            Kind::Mov => "MOV",
            Kind::Add => "ADD",
            Kind::Sub => "SUB",
            Kind::Mul => "MUL",
            Kind::And => "AND",
            Kind::Or => "OR",
            Kind::Xor => "XOR",
            Kind::Shl => "SHL",
            Kind::Shr => "SHR",
            Kind::Load => "LOAD",
            Kind::Store => "STORE",
            Kind::Br => "BR",
            Kind::Jmp => "JMP",
            Kind::Halt => "HALT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.mnemonic() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// `base + index*scale + disp`, all wrapping.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct MemRef {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: i64,
}

impl MemRef {
    pub fn base(base: Reg, disp: i64) -> MemRef {
        MemRef {
            base: Some(base),
            index: None,
            scale: 1,
            disp,
        }
    }

    pub fn indexed(base: Reg, index: Reg, scale: u8, disp: i64) -> MemRef {
        MemRef {
            base: Some(base),
            index: Some(index),
            scale,
            disp,
        }
    }

    pub fn absolute(disp: i64) -> MemRef {
        MemRef {
            base: None,
            index: None,
            scale: 1,
            disp,
        }
    }

    pub fn regs(&self) -> impl Iterator<Item = Reg> {
        self.base.into_iter().chain(self.index)
    }

    /// Address from already-resolved register values.
    pub fn compute(&self, base: u64, index: u64) -> u64 {
        base.wrapping_add(index.wrapping_mul(self.scale as u64))
            .wrapping_add(self.disp as u64)
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(b) = self.base {
            parts.push(b.to_string());
        }
        if let Some(i) = self.index {
            parts.push(format!("{i}*{}", self.scale));
        }
        f.write_str("[")?;
        f.write_str(&parts.join(" + "))?;
        if parts.is_empty() {
            write!(f, "{:#x}", self.disp)?;
        } else if self.disp > 0 {
            write!(f, " + {}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, " - {}", self.disp.unsigned_abs())?;
        }
        f.write_str("]")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl Cond {
    /// Signed comparison of `a` against `b`.
    pub fn holds(self, a: u64, b: u64) -> bool {
        let (a, b) = (a as i64, b as i64);
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => a < b,
            Cond::Ge => a >= b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
        }
    }

    pub fn from_name(s: &str) -> Option<Cond> {
        [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Ge]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Branch {
    /// `None` for JMP.
    pub cond: Option<Cond>,
    pub target: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct MicroOp {
    pub ip: u64,
    pub kind: Kind,
    pub dest: Option<Reg>,
    pub src1: Option<Operand>,
    pub src2: Option<Operand>,
    pub mem: Option<MemRef>,
    pub branch: Option<Branch>,
}

impl MicroOp {
    fn bare(ip: u64, kind: Kind) -> MicroOp {
        MicroOp {
            ip,
            kind,
            dest: None,
            src1: None,
            src2: None,
            mem: None,
            branch: None,
        }
    }

    pub fn mov_imm(ip: u64, dest: Reg, imm: i64) -> MicroOp {
        MicroOp {
            dest: Some(dest),
            src1: Some(Operand::Imm(imm)),
            ..Self::bare(ip, Kind::MovImm)
        }
    }

    pub fn mov(ip: u64, dest: Reg, src: Operand) -> MicroOp {
        MicroOp {
            dest: Some(dest),
            src1: Some(src),
            ..Self::bare(ip, Kind::Mov)
        }
    }

    pub fn alu(ip: u64, kind: Kind, dest: Reg, a: Operand, b: Operand) -> MicroOp {
        debug_assert!(kind.is_alu());
        MicroOp {
            dest: Some(dest),
            src1: Some(a),
            src2: Some(b),
            ..Self::bare(ip, kind)
        }
    }

    pub fn load(ip: u64, dest: Reg, mem: MemRef) -> MicroOp {
        MicroOp {
            dest: Some(dest),
            mem: Some(mem),
            ..Self::bare(ip, Kind::Load)
        }
    }

    pub fn store(ip: u64, mem: MemRef, data: Operand) -> MicroOp {
        MicroOp {
            src1: Some(data),
            mem: Some(mem),
            ..Self::bare(ip, Kind::Store)
        }
    }

    pub fn br(ip: u64, cond: Cond, a: Operand, b: Operand, target: u64) -> MicroOp {
        MicroOp {
            src1: Some(a),
            src2: Some(b),
            branch: Some(Branch {
                cond: Some(cond),
                target,
            }),
            ..Self::bare(ip, Kind::Br)
        }
    }

    pub fn jmp(ip: u64, target: u64) -> MicroOp {
        MicroOp {
            branch: Some(Branch { cond: None, target }),
            ..Self::bare(ip, Kind::Jmp)
        }
    }

    pub fn halt(ip: u64) -> MicroOp {
        Self::bare(ip, Kind::Halt)
    }

    /// Bitmap of every register this op writes, including the implicit flags.
    pub fn dest_bitmap(&self) -> u32 {
        let mut bits = self.dest.map_or(0, Reg::bit);
        if self.kind.is_alu() {
            bits |= Reg::FLAGS.bit();
        }
        bits
    }

    /// Bitmap of registers used to form the effective address.
    pub fn addr_source_bitmap(&self) -> u32 {
        self.mem
            .map_or(0, |m| m.regs().fold(0, |acc, r| acc | r.bit()))
    }

    /// Bitmap of every register this op reads.
    pub fn source_bitmap(&self) -> u32 {
        let ops = self
            .src1
            .into_iter()
            .chain(self.src2)
            .filter_map(Operand::reg);
        ops.fold(self.addr_source_bitmap(), |acc, r| acc | r.bit())
    }

    /// Checks the structural invariants of the op encoding.
    pub fn validate(&self) -> Result<(), String> {
        let has_mem = self.mem.is_some();
        let has_target = self.branch.is_some();
        if has_mem != self.kind.is_mem() {
            return Err(format!(
                "{}: memory operand only allowed on LOAD/STORE",
                self.kind
            ));
        }
        if has_target != matches!(self.kind, Kind::Br | Kind::Jmp) {
            return Err(format!(
                "{}: branch target only allowed on BR/JMP",
                self.kind
            ));
        }
        if let Some(m) = self.mem {
            if !matches!(m.scale, 1 | 2 | 4 | 8) {
                return Err(format!("scale {} not in {{1,2,4,8}}", m.scale));
            }
        }
        let need_dest =
            matches!(self.kind, Kind::MovImm | Kind::Mov | Kind::Load) || self.kind.is_alu();
        if need_dest != self.dest.is_some() {
            return Err(format!("{}: destination register mismatch", self.kind));
        }
        let srcs = match self.kind {
            Kind::MovImm | Kind::Mov | Kind::Store => 1,
            Kind::Br => 2,
            k if k.is_alu() => 2,
            _ => 0,
        };
        let have = self.src1.is_some() as usize + self.src2.is_some() as usize;
        if have != srcs || (srcs == 1 && self.src1.is_none()) {
            return Err(format!("{}: expected {srcs} source operand(s)", self.kind));
        }
        if self.kind == Kind::MovImm && !matches!(self.src1, Some(Operand::Imm(_))) {
            return Err("MOV_IMM takes an immediate".into());
        }
        if matches!(self.kind, Kind::Br) && self.branch.and_then(|b| b.cond).is_none() {
            return Err("BR requires a condition".into());
        }
        Ok(())
    }

    /// Program-legal ops never name temporaries and never write `f` directly.
    pub fn validate_program_op(&self) -> Result<(), String> {
        self.validate()?;
        let named = self.source_bitmap() | self.dest.map_or(0, Reg::bit);
        if Reg::iter_bitmap(named).any(Reg::is_temp) {
            return Err("temporary registers t0..t7 are reserved".into());
        }
        if self.dest == Some(Reg::FLAGS) {
            return Err("f is written implicitly by ALU ops only".into());
        }
        Ok(())
    }
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}: {}", self.ip, self.kind)?;
        let mut args: Vec<String> = Vec::new();
        match self.kind {
            Kind::Store => {
                args.push(self.mem.map(|m| m.to_string()).unwrap_or_default());
                args.extend(self.src1.map(|s| s.to_string()));
            }
            Kind::Br => {
                let b = self.branch.expect("BR carries a target");
                let cond = b.cond.map_or("", Cond::name);
                write!(f, " {cond}")?;
                args.extend(self.src1.map(|s| s.to_string()));
                args.extend(self.src2.map(|s| s.to_string()));
                args.push(format!("{:#x}", b.target));
            }
            Kind::Jmp => args.push(format!(
                "{:#x}",
                self.branch.expect("JMP carries a target").target
            )),
            _ => {
                args.extend(self.dest.map(|d| d.to_string()));
                args.extend(self.src1.map(|s| s.to_string()));
                args.extend(self.src2.map(|s| s.to_string()));
                args.extend(self.mem.map(|m| m.to_string()));
            }
        }
        if !args.is_empty() {
            write!(f, " {}", args.join(", "))?;
        }
        Ok(())
    }
}

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse byte-addressable memory. Untouched bytes read as zero.
#[derive(Clone, Default, Debug)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map_or(0, |p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    fn write_u8(&mut self, addr: u64, v: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = v;
    }

    /// Little-endian 8-byte read. Unaligned and page-crossing reads are allowed.
    pub fn read_u64(&self, addr: u64) -> u64 {
        let off = (addr as usize) & (PAGE_SIZE - 1);
        if off + 8 <= PAGE_SIZE {
            return self.pages.get(&(addr >> PAGE_BITS)).map_or(0, |p| {
                u64::from_le_bytes(p[off..off + 8].try_into().expect("8 bytes"))
            });
        }
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.read_u8(addr.wrapping_add(i as u64));
        }
        u64::from_le_bytes(bytes)
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) {
        let off = (addr as usize) & (PAGE_SIZE - 1);
        if off + 8 <= PAGE_SIZE {
            let page = self
                .pages
                .entry(addr >> PAGE_BITS)
                .or_insert_with(|| Box::new([0; PAGE_SIZE]));
            page[off..off + 8].copy_from_slice(&v.to_le_bytes());
            return;
        }
        for (i, b) in v.to_le_bytes().into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    pub fn load_image(&mut self, image: &[(u64, u64)]) {
        for &(addr, v) in image {
            self.write_u64(addr, v);
        }
    }
}

// Pages that only hold zeros compare equal to absent pages.
impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        let zero = |p: &[u8; PAGE_SIZE]| p.iter().all(|&b| b == 0);
        let covered = |a: &Memory, b: &Memory| {
            a.pages.iter().all(|(k, p)| match b.pages.get(k) {
                Some(q) => p[..] == q[..],
                None => zero(p),
            })
        };
        covered(self, other) && covered(other, self)
    }
}

impl Eq for Memory {}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimFault {
    #[error("fetch outside program at ip {0:#x}")]
    FetchOutside(u64),
    #[error("program already halted")]
    Halted,
}

/// Fetchable program text. Fallthrough goes to the next op in listing order.
#[derive(Clone, Debug, Default)]
pub struct Program {
    ops: Vec<MicroOp>,
    by_ip: HashMap<u64, usize>,
}

impl Program {
    pub fn new(ops: Vec<MicroOp>) -> Result<Program, String> {
        let mut by_ip = HashMap::with_capacity(ops.len());
        for (i, op) in ops.iter().enumerate() {
            op.validate_program_op()
                .map_err(|e| format!("{:#x}: {e}", op.ip))?;
            if by_ip.insert(op.ip, i).is_some() {
                return Err(format!("duplicate ip {:#x}", op.ip));
            }
        }
        Ok(Program { ops, by_ip })
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.ops
    }

    pub fn entry(&self) -> Option<u64> {
        self.ops.first().map(|op| op.ip)
    }

    pub fn fetch(&self, ip: u64) -> Result<&MicroOp, SimFault> {
        self.by_ip
            .get(&ip)
            .map(|&i| &self.ops[i])
            .ok_or(SimFault::FetchOutside(ip))
    }

    /// Address of the op listed after `ip`, if any.
    pub fn fallthrough(&self, ip: u64) -> Option<u64> {
        let i = *self.by_ip.get(&ip)?;
        self.ops.get(i + 1).map(|op| op.ip)
    }

    /// Renders the program in the text format accepted by [`crate::asm::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ArchState {
    pub regs: [u64; NUM_REGS],
    pub mem: Memory,
    pub ip: u64,
    pub retired: u64,
    pub cycle: u64,
    pub halted: bool,
}

impl ArchState {
    pub fn new(entry: u64) -> ArchState {
        ArchState {
            regs: [0; NUM_REGS],
            mem: Memory::new(),
            ip: entry,
            retired: 0,
            cycle: 0,
            halted: false,
        }
    }

    #[inline]
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn operand(&self, op: Operand) -> u64 {
        match op {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(v) => v as u64,
        }
    }

    /// Equality of everything the program can observe. The clock is excluded.
    pub fn program_visible_eq(&self, other: &ArchState) -> bool {
        self.regs == other.regs
            && self.ip == other.ip
            && self.retired == other.retired
            && self.halted == other.halted
            && self.mem == other.mem
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RetiredEvent {
    pub op: MicroOp,
    pub result: Option<u64>,
    pub eff_addr: Option<u64>,
    pub taken: Option<bool>,
    pub retire_index: u64,
}

/// Two's-complement 64-bit ALU. Shift amounts use the low 6 bits.
pub fn alu(kind: Kind, a: u64, b: u64) -> u64 {
    match kind {
        Kind::Add => a.wrapping_add(b),
        Kind::Sub => a.wrapping_sub(b),
        Kind::Mul => a.wrapping_mul(b),
        Kind::And => a & b,
        Kind::Or => a | b,
        Kind::Xor => a ^ b,
        Kind::Shl => a << (b & 63),
        Kind::Shr => a >> (b & 63),
        _ => unreachable!("{kind} is not an ALU op"),
    }
}

/// Flags value for an ALU result: bit 0 zero, bit 1 sign.
pub fn flags_of(result: u64) -> u64 {
    (result == 0) as u64 | ((result >> 63) << 1)
}

/// `base + index*scale + displacement`, wrapping.
pub fn effective_address(op: &MicroOp, state: &ArchState) -> u64 {
    let m = op.mem.expect("effective_address needs a LOAD/STORE");
    let base = m.base.map_or(0, |r| state.reg(r));
    let index = m.index.map_or(0, |r| state.reg(r));
    m.compute(base, index)
}

/// Executes exactly one micro-op and advances the clock by one cycle.
pub fn step(state: &mut ArchState, program: &Program) -> Result<RetiredEvent, SimFault> {
    if state.halted {
        return Err(SimFault::Halted);
    }
    let op = *program.fetch(state.ip)?;
    let mut result = None;
    let mut eff_addr = None;
    let mut taken = None;
    let mut next = program.fallthrough(op.ip);

    match op.kind {
        Kind::MovImm | Kind::Mov => {
            result = Some(state.operand(op.src1.expect("validated")));
        }
        k if k.is_alu() => {
            let a = state.operand(op.src1.expect("validated"));
            let b = state.operand(op.src2.expect("validated"));
            let v = alu(k, a, b);
            state.regs[Reg::FLAGS.index()] = flags_of(v);
            result = Some(v);
        }
        Kind::Load => {
            let addr = effective_address(&op, state);
            eff_addr = Some(addr);
            result = Some(state.mem.read_u64(addr));
        }
        Kind::Store => {
            let addr = effective_address(&op, state);
            let data = state.operand(op.src1.expect("validated"));
            state.mem.write_u64(addr, data);
            eff_addr = Some(addr);
        }
        Kind::Br => {
            let b = op.branch.expect("validated");
            let a = state.operand(op.src1.expect("validated"));
            let c = state.operand(op.src2.expect("validated"));
            let t = b.cond.expect("validated").holds(a, c);
            taken = Some(t);
            if t {
                next = Some(b.target);
            }
        }
        Kind::Jmp => next = Some(op.branch.expect("validated").target),
        Kind::Halt => {
            state.halted = true;
            next = Some(op.ip);
        }
        _ => unreachable!(),
    }

    if let (Some(d), Some(v)) = (op.dest, result) {
        state.regs[d.index()] = v;
    }
    let event = RetiredEvent {
        op,
        result,
        eff_addr,
        taken,
        retire_index: state.retired,
    };
    state.retired += 1;
    state.cycle += 1;
    // A missing fallthrough faults on the next fetch, not on this retirement.
    state.ip = next.unwrap_or(u64::MAX);
    Ok(event)
}
