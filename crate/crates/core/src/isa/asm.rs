//! Assembler for the textual micro-ISA form.
//!
//! ```text
//! [label:] MNEMONIC operands   ; comment
//! .org <addr>   .word <u32|label>   .byte <u8>
//! ```
//!
//! Instructions are placed on 4-byte boundaries (the location counter is
//! rounded up before each instruction). Branch targets and `#label`
//! immediates may reference labels defined anywhere in the file; `.` in a
//! branch target is the address of the branch itself.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    Class, Condition, DecodedInstr, Index, IsaError, MemOperand, Operand, RegList, Register, Width, Writeback,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("placement overlaps earlier content at 0x{0:x}")]
    Overlap(u32),
    #[error(transparent)]
    Operands(#[from] IsaError),
}

/// An assembled program: instructions by address plus initialised data.
#[derive(Debug, Clone, Default)]
pub struct Image {
    instrs: BTreeMap<u32, DecodedInstr>,
    data: BTreeMap<u32, u8>,
    labels: BTreeMap<String, u32>,
}

impl PartialEq for Image {
    /// Labels are symbolic sugar; two images are equal when they place the
    /// same instructions and bytes.
    fn eq(&self, other: &Self) -> bool {
        self.instrs == other.instrs && self.data == other.data
    }
}

impl Image {
    pub fn instr_at(&self, pc: u32) -> Option<&DecodedInstr> {
        self.instrs.get(&pc)
    }

    pub fn instrs(&self) -> impl Iterator<Item = &DecodedInstr> {
        self.instrs.values()
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty() && self.data.is_empty()
    }

    pub fn label(&self, name: &str) -> Option<u32> {
        self.labels.get(name).copied()
    }

    pub fn labels(&self) -> &BTreeMap<String, u32> {
        &self.labels
    }

    /// Initialised data as contiguous `(address, bytes)` runs.
    pub fn data_segments(&self) -> Vec<(u32, Vec<u8>)> {
        let mut out: Vec<(u32, Vec<u8>)> = Vec::new();
        for (&addr, &b) in &self.data {
            match out.last_mut() {
                Some((start, bytes)) if start.wrapping_add(bytes.len() as u32) == addr => bytes.push(b),
                _ => out.push((addr, vec![b])),
            }
        }
        out
    }

    /// Every address range the image occupies (instructions count 4 bytes).
    pub fn extents(&self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = self.instrs.keys().map(|&a| (a, 4)).collect();
        out.extend(self.data_segments().into_iter().map(|(a, b)| (a, b.len() as u32)));
        out.sort_unstable();
        out
    }

    /// Canonical listing: reassembles to an equal image.
    pub fn listing(&self) -> String {
        let mut items: Vec<(u32, String)> = self.instrs.iter().map(|(&a, i)| (a, i.text.clone())).collect();
        items.extend(self.data.iter().map(|(&a, &b)| (a, format!(".byte 0x{b:02x}"))));
        items.sort_by_key(|(a, _)| *a);
        let mut out = String::new();
        let mut next: Option<u32> = None;
        for (addr, text) in items {
            if next != Some(addr) {
                let _ = writeln!(out, ".org 0x{addr:x}");
            }
            let _ = writeln!(out, "{text}");
            let size = if text.starts_with(".byte") { 1 } else { 4 };
            next = Some(addr.wrapping_add(size));
        }
        out
    }

    /// Lowercase hex SHA-256 of the canonical listing.
    pub fn id_hash(&self) -> String {
        let digest = Sha256::digest(self.listing().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

enum Pending<'a> {
    Instr {
        line: usize,
        addr: u32,
        mnemonic: &'a str,
        operands: &'a str,
    },
    Word {
        line: usize,
        addr: u32,
        expr: &'a str,
    },
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError {
        line,
        kind: AsmErrorKind::Syntax(msg.into()),
    }
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b").or_else(|| body.strip_prefix("0B")) {
        i64::from_str_radix(&b.replace('_', ""), 2).ok()?
    } else if body.chars().next()?.is_ascii_digit() {
        body.replace('_', "").parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn to_u32(v: i64) -> Option<u32> {
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Some(v as u32)
    } else {
        None
    }
}

/// Splits a mnemonic into class, `S` flag and condition.
fn split_mnemonic(m: &str) -> Option<(Class, bool, Condition)> {
    let upper = m.to_ascii_uppercase();
    let mut classes: Vec<Class> = Class::ALL.to_vec();
    classes.sort_by_key(|c| std::cmp::Reverse(c.mnemonic().len()));
    for class in classes {
        let Some(rest) = upper.strip_prefix(class.mnemonic()) else {
            continue;
        };
        if let Some(cond) = Condition::from_suffix(rest) {
            return Some((class, false, cond));
        }
        if class.may_set_flags() {
            if let Some(after_s) = rest.strip_prefix('S') {
                if let Some(cond) = Condition::from_suffix(after_s) {
                    return Some((class, true, cond));
                }
            }
        }
    }
    None
}

/// Splits operands on top-level commas (outside `[]` and `{}`).
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = s[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    out
}

struct OperandParser<'a> {
    line: usize,
    labels: &'a HashMap<String, u32>,
}

impl OperandParser<'_> {
    fn value(&self, expr: &str) -> Result<i64, AsmError> {
        let expr = expr.trim();
        if let Some(v) = parse_number(expr) {
            return Ok(v);
        }
        if is_label_name(expr) {
            return self.labels.get(expr).map(|&a| a as i64).ok_or(AsmError {
                line: self.line,
                kind: AsmErrorKind::UnresolvedLabel(expr.to_string()),
            });
        }
        Err(syntax(self.line, format!("bad expression `{expr}`")))
    }

    fn reg(&self, s: &str) -> Result<Register, AsmError> {
        s.trim().parse::<Register>().map_err(|e| AsmError {
            line: self.line,
            kind: e.into(),
        })
    }

    fn reg_or_imm(&self, s: &str) -> Result<Operand, AsmError> {
        let s = s.trim();
        if let Some(imm) = s.strip_prefix('#') {
            let v = self.value(imm)?;
            let v = to_u32(v).ok_or_else(|| syntax(self.line, format!("immediate out of range `{s}`")))?;
            Ok(Operand::Imm(v))
        } else {
            Ok(Operand::Reg(self.reg(s)?))
        }
    }

    fn disp(&self, s: &str) -> Result<i32, AsmError> {
        let s = s.trim();
        let body = s
            .strip_prefix('#')
            .ok_or_else(|| syntax(self.line, format!("expected #displacement, got `{s}`")))?;
        let v = self.value(body)?;
        i32::try_from(v).map_err(|_| syntax(self.line, "displacement out of range"))
    }

    fn mem(&self, s: &str, post: Option<&str>, width: Width) -> Result<MemOperand, AsmError> {
        let s = s.trim();
        let (inner, pre) = if let Some(body) = s.strip_suffix('!') {
            (body.trim_end(), true)
        } else {
            (s, false)
        };
        let inner = inner
            .strip_prefix('[')
            .and_then(|x| x.strip_suffix(']'))
            .ok_or_else(|| syntax(self.line, format!("expected memory operand, got `{s}`")))?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let base = self.reg(parts[0])?;
        let mut mem = MemOperand::offset(base, 0, width);
        match &parts[1..] {
            [] => {}
            [d] if d.starts_with('#') => mem.disp = self.disp(d)?,
            [ix] => {
                mem.index = Some(Index {
                    reg: self.reg(ix)?,
                    shift: 0,
                })
            }
            [ix, sh] => {
                let amount = sh
                    .to_ascii_uppercase()
                    .strip_prefix("LSL")
                    .map(|a| a.trim().to_string())
                    .ok_or_else(|| syntax(self.line, "only LSL index shifts are supported"))?;
                let amount = self.disp(&amount)?;
                if !(0..=31).contains(&amount) {
                    return Err(syntax(self.line, "index shift must be 0..31"));
                }
                mem.index = Some(Index {
                    reg: self.reg(ix)?,
                    shift: amount as u8,
                });
            }
            _ => return Err(syntax(self.line, format!("bad memory operand `{s}`"))),
        }
        if pre {
            if post.is_some() {
                return Err(syntax(self.line, "pre- and post-index together"));
            }
            mem.writeback = Writeback::Pre;
        }
        if let Some(p) = post {
            if parts.len() != 1 {
                return Err(syntax(self.line, "post-index form is `[Rn], #disp`"));
            }
            mem.disp = self.disp(p)?;
            mem.writeback = Writeback::Post;
        }
        Ok(mem)
    }

    fn list(&self, s: &str) -> Result<RegList, AsmError> {
        let inner = s
            .trim()
            .strip_prefix('{')
            .and_then(|x| x.strip_suffix('}'))
            .ok_or_else(|| syntax(self.line, format!("expected register list, got `{s}`")))?;
        let mut regs = Vec::new();
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((lo, hi)) = part.split_once('-') {
                let (lo, hi) = (self.reg(lo)?, self.reg(hi)?);
                if lo.index() > hi.index() {
                    return Err(syntax(self.line, "descending register range"));
                }
                regs.extend((lo.index()..=hi.index()).map(|i| Register::ALL[i]));
            } else {
                regs.push(self.reg(part)?);
            }
        }
        RegList::new(&regs).ok_or_else(|| syntax(self.line, "register list must be nonempty and duplicate free"))
    }

    fn branch_target(&self, s: &str, addr: u32) -> Result<u32, AsmError> {
        let s = s.trim();
        if s == "." {
            return Ok(addr);
        }
        let v = self.value(s.strip_prefix('#').unwrap_or(s))?;
        to_u32(v).ok_or_else(|| syntax(self.line, "branch target out of range"))
    }

    fn operands(&self, class: Class, addr: u32, text: &str) -> Result<Vec<Operand>, AsmError> {
        let toks = split_operands(text);
        let ops = match class {
            Class::NOP => {
                if !toks.is_empty() {
                    return Err(syntax(self.line, "NOP takes no operands"));
                }
                vec![]
            }
            Class::B | Class::BL => match toks.as_slice() {
                [t] => vec![Operand::Imm(self.branch_target(t, addr)?)],
                _ => return Err(syntax(self.line, "expected one branch target")),
            },
            Class::PUSH | Class::POP => match toks.as_slice() {
                [l] => vec![Operand::List(self.list(l)?)],
                _ => return Err(syntax(self.line, "expected {register list}")),
            },
            Class::LDM | Class::STM => match toks.as_slice() {
                [base, l] => {
                    let (name, wb) = match base.strip_suffix('!') {
                        Some(n) => (n, Writeback::Post),
                        None => (*base, Writeback::None),
                    };
                    let mut mem = MemOperand::offset(self.reg(name)?, 0, Width::Word);
                    mem.writeback = wb;
                    vec![Operand::Mem(mem), Operand::List(self.list(l)?)]
                }
                _ => return Err(syntax(self.line, "expected Rn{!}, {register list}")),
            },
            c if c.is_load() || c.is_store() => {
                let width = c.mem_width().expect("memory class");
                match toks.as_slice() {
                    [t, m] => vec![Operand::Reg(self.reg(t)?), Operand::Mem(self.mem(m, None, width)?)],
                    [t, m, p] => vec![Operand::Reg(self.reg(t)?), Operand::Mem(self.mem(m, Some(p), width)?)],
                    _ => return Err(syntax(self.line, "expected Rt, [memory]")),
                }
            }
            _ => {
                if toks.is_empty() || toks.len() > 3 {
                    return Err(syntax(self.line, "wrong operand count"));
                }
                toks.iter().map(|t| self.reg_or_imm(t)).collect::<Result<_, _>>()?
            }
        };
        Ok(ops)
    }
}

/// Assembles micro-ISA source text into an [`Image`].
pub fn assemble(source: &str) -> Result<Image, AsmError> {
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut pending_labels: Vec<(usize, &str)> = Vec::new();
    let mut items: Vec<Pending<'_>> = Vec::new();
    let mut data: BTreeMap<u32, (u8, usize)> = BTreeMap::new();
    let mut lc: u32 = 0;

    fn bind(pending: &mut Vec<(usize, &str)>, labels: &mut HashMap<String, u32>, addr: u32) -> Result<(), AsmError> {
        for (line, name) in pending.drain(..) {
            if labels.insert(name.to_string(), addr).is_some() {
                return Err(AsmError {
                    line,
                    kind: AsmErrorKind::DuplicateLabel(name.to_string()),
                });
            }
        }
        Ok(())
    }

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut rest = raw.split(';').next().unwrap_or("").trim();
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if !is_label_name(name) {
                break;
            }
            pending_labels.push((line, name));
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        let (head, tail) = match rest.find(char::is_whitespace) {
            Some(p) => (&rest[..p], rest[p..].trim()),
            None => (rest, ""),
        };
        match head.to_ascii_lowercase().as_str() {
            ".org" => {
                let v = parse_number(tail)
                    .and_then(to_u32)
                    .ok_or_else(|| syntax(line, "bad .org address"))?;
                lc = v;
            }
            ".byte" | ".word" => {
                bind(&mut pending_labels, &mut labels, lc)?;
                let word = head.eq_ignore_ascii_case(".word");
                for expr in tail.split(',').map(str::trim) {
                    if expr.is_empty() {
                        return Err(syntax(line, "missing value"));
                    }
                    if word {
                        items.push(Pending::Word { line, addr: lc, expr });
                        lc = lc.wrapping_add(4);
                    } else {
                        let v = parse_number(expr)
                            .filter(|v| (-128..=255).contains(v))
                            .ok_or_else(|| syntax(line, format!("bad byte `{expr}`")))?;
                        if data.insert(lc, (v as u8, line)).is_some() {
                            return Err(AsmError {
                                line,
                                kind: AsmErrorKind::Overlap(lc),
                            });
                        }
                        lc = lc.wrapping_add(1);
                    }
                }
            }
            d if d.starts_with('.') => return Err(syntax(line, format!("unknown directive `{head}`"))),
            _ => {
                lc = lc.wrapping_add(3) & !3;
                bind(&mut pending_labels, &mut labels, lc)?;
                items.push(Pending::Instr {
                    line,
                    addr: lc,
                    mnemonic: head,
                    operands: tail,
                });
                lc = lc.wrapping_add(4);
            }
        }
    }
    bind(&mut pending_labels, &mut labels, lc)?;

    let mut image = Image::default();
    for item in items {
        match item {
            Pending::Word { line, addr, expr } => {
                let p = OperandParser { line, labels: &labels };
                let v = to_u32(p.value(expr)?).ok_or_else(|| syntax(line, "word out of range"))?;
                for (k, b) in v.to_le_bytes().into_iter().enumerate() {
                    let a = addr.wrapping_add(k as u32);
                    if data.insert(a, (b, line)).is_some() {
                        return Err(AsmError {
                            line,
                            kind: AsmErrorKind::Overlap(a),
                        });
                    }
                }
            }
            Pending::Instr {
                line,
                addr,
                mnemonic,
                operands,
            } => {
                let (class, s, cond) =
                    split_mnemonic(mnemonic).ok_or_else(|| syntax(line, format!("unknown mnemonic `{mnemonic}`")))?;
                let p = OperandParser { line, labels: &labels };
                let ops = p.operands(class, addr, operands)?;
                let instr =
                    DecodedInstr::new(addr, class, cond, s, ops).map_err(|e| AsmError { line, kind: e.into() })?;
                if image.instrs.insert(addr, instr).is_some() {
                    return Err(AsmError {
                        line,
                        kind: AsmErrorKind::Overlap(addr),
                    });
                }
            }
        }
    }
    for (&addr, &(_, line)) in &data {
        let base = addr & !3;
        if image.instrs.contains_key(&base) {
            return Err(AsmError {
                line,
                kind: AsmErrorKind::Overlap(addr),
            });
        }
    }
    image.data = data.into_iter().map(|(a, (b, _))| (a, b)).collect();
    image.labels = labels.into_iter().collect();
    Ok(image)
}
