//! Text format for programs and initial memory images.
//!
//! ```text
//! # comment
//! .text
//! 0x400000: MOV_IMM r1, 7
//! 0x400004: ADD r2, r2, r3          # src2 may be a register or an immediate
//! 0x400008: LOAD r4, [r5 + r6*8 + 16]
//! 0x40000c: STORE [r5 - 8], r4      # address first, then data
//! 0x400010: BR lt r1, r2, 0x400000  # eq | ne | lt | ge, signed compare
//! 0x400014: JMP 0x400000
//! 0x400018: HALT
//! .data
//! 0x1000: 42                        # 8-byte little-endian word at 0x1000
//! ```
//!
//! Numbers are decimal or `0x` hex, optionally negative. Ops must be listed
//! with strictly increasing addresses; execution starts at the first one and
//! falls through in listing order.

use thiserror::Error;

use crate::isa::{Cond, Kind, MemRef, MicroOp, Operand, Program, Reg};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, Default)]
pub struct ProgramImage {
    pub program: Program,
    pub memory: Vec<(u64, u64)>,
}

pub fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        body.parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_operand(s: &str) -> Result<Operand, String> {
    let s = s.trim();
    if let Ok(r) = s.parse::<Reg>() {
        return Ok(Operand::Reg(r));
    }
    parse_number(s)
        .map(Operand::Imm)
        .ok_or_else(|| format!("bad operand `{s}`"))
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    s.trim()
        .parse::<Reg>()
        .map_err(|_| format!("bad register `{}`", s.trim()))
}

fn parse_mem(s: &str) -> Result<MemRef, String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("bad memory operand `{s}`"))?;
    let mut m = MemRef {
        base: None,
        index: None,
        scale: 1,
        disp: 0,
    };
    // Split into signed terms.
    let mut terms = Vec::new();
    let mut sign = 1i64;
    let mut cur = String::new();
    for ch in inner.chars() {
        match ch {
            '+' | '-' => {
                if !cur.trim().is_empty() {
                    terms.push((sign, cur.trim().to_string()));
                }
                cur.clear();
                sign = if ch == '-' { -1 } else { 1 };
            }
            _ => cur.push(ch),
        }
    }
    if !cur.trim().is_empty() {
        terms.push((sign, cur.trim().to_string()));
    }
    for (sign, term) in terms {
        if let Some((reg, scale)) = term.split_once('*') {
            if sign < 0 || m.index.is_some() {
                return Err(format!("bad index term `{term}`"));
            }
            m.index = Some(parse_reg(reg)?);
            m.scale = parse_number(scale)
                .filter(|s| matches!(s, 1 | 2 | 4 | 8))
                .ok_or_else(|| format!("bad scale in `{term}`"))? as u8;
        } else if let Ok(r) = term.parse::<Reg>() {
            if sign < 0 {
                return Err(format!("negated register `{term}`"));
            }
            if m.base.is_none() {
                m.base = Some(r);
            } else if m.index.is_none() {
                m.index = Some(r);
            } else {
                return Err("too many registers in address".into());
            }
        } else {
            let v = parse_number(&term).ok_or_else(|| format!("bad address term `{term}`"))?;
            m.disp = m.disp.wrapping_add(v.wrapping_mul(sign));
        }
    }
    Ok(m)
}

/// Splits on commas that are not inside brackets.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

pub fn parse_op(ip: u64, text: &str) -> Result<MicroOp, String> {
    let text = text.trim();
    let (mn, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    let kind = Kind::from_mnemonic(mn).ok_or_else(|| format!("unknown op `{mn}`"))?;
    let rest = rest.trim();
    let args = split_args(rest);
    let want = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("{mn} expects {n} operand(s), got {}", args.len()))
        }
    };
    let target = |s: &str| {
        parse_number(s)
            .map(|v| v as u64)
            .ok_or_else(|| format!("bad target `{s}`"))
    };
    let op = match kind {
        Kind::MovImm => {
            want(2)?;
            let v = parse_number(&args[1]).ok_or_else(|| format!("bad immediate `{}`", args[1]))?;
            MicroOp::mov_imm(ip, parse_reg(&args[0])?, v)
        }
        Kind::Mov => {
            want(2)?;
            MicroOp::mov(ip, parse_reg(&args[0])?, parse_operand(&args[1])?)
        }
        k if k.is_alu() => {
            want(3)?;
            MicroOp::alu(
                ip,
                k,
                parse_reg(&args[0])?,
                parse_operand(&args[1])?,
                parse_operand(&args[2])?,
            )
        }
        Kind::Load => {
            want(2)?;
            MicroOp::load(ip, parse_reg(&args[0])?, parse_mem(&args[1])?)
        }
        Kind::Store => {
            want(2)?;
            MicroOp::store(ip, parse_mem(&args[0])?, parse_operand(&args[1])?)
        }
        Kind::Br => {
            let (cond, tail) = rest
                .split_once(char::is_whitespace)
                .ok_or("BR needs a condition")?;
            let cond = Cond::from_name(cond).ok_or_else(|| format!("bad condition `{cond}`"))?;
            let args = split_args(tail);
            if args.len() != 3 {
                return Err(format!("BR expects 3 operands, got {}", args.len()));
            }
            MicroOp::br(
                ip,
                cond,
                parse_operand(&args[0])?,
                parse_operand(&args[1])?,
                target(&args[2])?,
            )
        }
        Kind::Jmp => {
            want(1)?;
            MicroOp::jmp(ip, target(&args[0])?)
        }
        Kind::Halt => {
            if !rest.is_empty() {
                return Err("HALT takes no operands".into());
            }
            MicroOp::halt(ip)
        }
        _ => unreachable!(),
    };
    op.validate_program_op()?;
    Ok(op)
}

pub fn parse(text: &str) -> Result<ProgramImage, ParseError> {
    let mut ops: Vec<MicroOp> = Vec::new();
    let mut memory = Vec::new();
    let mut in_data = false;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| ParseError { line, msg };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        match body {
            ".text" => {
                in_data = false;
                continue;
            }
            ".data" => {
                in_data = true;
                continue;
            }
            _ => {}
        }
        let (addr, rest) = body
            .split_once(':')
            .ok_or_else(|| err("expected `ADDR: ...`".into()))?;
        let addr =
            parse_number(addr).ok_or_else(|| err(format!("bad address `{}`", addr.trim())))? as u64;
        if in_data {
            let v =
                parse_number(rest).ok_or_else(|| err(format!("bad value `{}`", rest.trim())))?;
            memory.push((addr, v as u64));
        } else {
            if ops.last().is_some_and(|prev| prev.ip >= addr) {
                return Err(err(format!("ip {addr:#x} not above previous op")));
            }
            ops.push(parse_op(addr, rest).map_err(err)?);
        }
    }
    let program = Program::new(ops).map_err(|msg| ParseError { line: 0, msg })?;
    Ok(ProgramImage { program, memory })
}

/// Renders a program plus memory image in the same format [`parse`] reads.
pub fn render(program: &Program, memory: &[(u64, u64)]) -> String {
    let mut out = String::from(".text\n");
    out.push_str(&program.to_text());
    if !memory.is_empty() {
        out.push_str(".data\n");
        for (addr, v) in memory {
            out.push_str(&format!("{addr:#x}: {v:#x}\n"));
        }
    }
    out
}
