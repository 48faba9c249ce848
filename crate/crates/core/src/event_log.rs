//! Footprints: the action and data events of one crash reproduction, and
//! their line-oriented JSON file format.

use std::fmt::{self, Write as _};
use std::io::{self, Read, Write};

use serde_json::Value;
use thiserror::Error;

use crate::isa::{AccessKind, Register, Width};

pub const FORMAT: &str = "trace-rca/1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    /// Hex sha-256 of the image's canonical listing.
    pub image: String,
    pub entry: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionEvent {
    pub index: u64,
    pub pc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataEvent {
    pub index: u64,
    pub pc: u32,
    pub kind: AccessKind,
    pub addr: u32,
    pub width: Width,
    pub value: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashReason {
    InvalidMemoryRead,
    InvalidMemoryWrite,
    InvalidInstructionExecution,
}

impl CrashReason {
    pub fn code(self) -> &'static str {
        match self {
            CrashReason::InvalidMemoryRead => "imr",
            CrashReason::InvalidMemoryWrite => "imw",
            CrashReason::InvalidInstructionExecution => "iie",
        }
    }

    pub fn from_code(s: &str) -> Option<CrashReason> {
        Some(match s {
            "imr" => CrashReason::InvalidMemoryRead,
            "imw" => CrashReason::InvalidMemoryWrite,
            "iie" => CrashReason::InvalidInstructionExecution,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CrashReason::InvalidMemoryRead => "invalid_memory_read",
            CrashReason::InvalidMemoryWrite => "invalid_memory_write",
            CrashReason::InvalidInstructionExecution => "invalid_instruction_execution",
        }
    }

    pub fn is_memory(self) -> bool {
        !matches!(self, CrashReason::InvalidInstructionExecution)
    }
}

/// How PC came to hold an unexecutable address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Culprit {
    /// Loaded from the stack slot at this address (POP, LDM, LDR to PC).
    ExplicitPop { stack_addr: u32 },
    /// Copied from a register (BX, BLX, MOV PC).
    ImplicitRegister(Register),
    /// Execution ran or jumped directly into unmapped or undecodable space.
    SequentialOverrun,
}

impl Culprit {
    pub fn kind(&self) -> &'static str {
        match self {
            Culprit::ExplicitPop { .. } => "explicit_pop",
            Culprit::ImplicitRegister(_) => "implicit_register",
            Culprit::SequentialOverrun => "sequential_overrun",
        }
    }
}

impl fmt::Display for Culprit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Culprit::ExplicitPop { stack_addr } => write!(f, "explicit_pop(0x{stack_addr:x})"),
            Culprit::ImplicitRegister(r) => write!(f, "implicit_register({r})"),
            Culprit::SequentialOverrun => f.write_str("sequential_overrun"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashDescriptor {
    pub reason: CrashReason,
    pub index: u64,
    pub pc: u32,
    /// Faulting address for memory crashes, bad target pc otherwise.
    pub fault: u32,
    pub culprit: Option<Culprit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    pub header: Header,
    pub actions: Vec<ActionEvent>,
    pub data: Vec<DataEvent>,
    pub crash: Option<CrashDescriptor>,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported footprint version {0:?}")]
    UnsupportedVersion(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("cannot keep {n} of {len} actions")]
pub struct SliceError {
    pub n: usize,
    pub len: usize,
}

fn violation(msg: impl Into<String>) -> FormatError {
    FormatError::InvariantViolation(msg.into())
}

impl Footprint {
    pub fn new(image: impl Into<String>, entry: u32) -> Footprint {
        Footprint {
            header: Header {
                image: image.into(),
                entry,
            },
            actions: Vec::new(),
            data: Vec::new(),
            crash: None,
        }
    }

    pub fn first_index(&self) -> Option<u64> {
        self.actions.first().map(|a| a.index)
    }

    pub fn last_action(&self) -> Option<&ActionEvent> {
        self.actions.last()
    }

    /// Data events caused by the action with this trace index, in order.
    pub fn data_for(&self, index: u64) -> &[DataEvent] {
        let lo = self.data.partition_point(|d| d.index < index);
        let hi = lo + self.data[lo..].partition_point(|d| d.index == index);
        &self.data[lo..hi]
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if !is_sha256_hex(&self.header.image) {
            return Err(violation("image id is not a lowercase sha-256 hex string"));
        }
        let Some(first) = self.actions.first() else {
            return Err(violation("footprint has no actions"));
        };
        for (k, a) in self.actions.iter().enumerate() {
            if a.index != first.index + k as u64 {
                return Err(violation(format!("action {} breaks index contiguity", a.index)));
            }
        }
        let mut prev = first.index;
        for d in &self.data {
            if d.index < prev {
                return Err(violation(format!("data event for {} out of order", d.index)));
            }
            prev = d.index;
            let action = d
                .index
                .checked_sub(first.index)
                .and_then(|k| self.actions.get(k as usize))
                .ok_or_else(|| violation(format!("data event cites missing action {}", d.index)))?;
            if action.pc != d.pc {
                return Err(violation(format!("data event pc differs from action {}", d.index)));
            }
            if d.value & !d.width.mask() != 0 {
                return Err(violation(format!("value 0x{:x} too wide at {}", d.value, d.index)));
            }
        }
        if let Some(c) = &self.crash {
            let last = self.actions.last().expect("nonempty");
            if c.index != last.index || c.pc != last.pc {
                return Err(violation("crash record is not at the last action"));
            }
            if c.reason.is_memory() {
                if c.culprit.is_some() {
                    return Err(violation("memory crash carries a culprit"));
                }
                if !self.data_for(c.index).is_empty() {
                    return Err(violation("faulting access was recorded"));
                }
            } else if c.culprit.is_none() {
                return Err(violation("execution crash lacks a culprit"));
            }
        }
        Ok(())
    }

    /// Renders the file form. Refuses malformed footprints.
    pub fn to_jsonl(&self) -> Result<String, FormatError> {
        self.validate()?;
        let mut out = String::with_capacity(64 * (self.actions.len() + self.data.len() + 2));
        render_header(&mut out, &self.header);
        let mut data = self.data.iter().peekable();
        for a in &self.actions {
            render_action(&mut out, a);
            while let Some(d) = data.next_if(|d| d.index == a.index) {
                render_data(&mut out, d);
            }
        }
        if let Some(c) = &self.crash {
            render_crash(&mut out, c);
        }
        Ok(out)
    }

    pub fn write_to(&self, sink: &mut impl Write) -> Result<usize, FormatError> {
        let s = self.to_jsonl()?;
        sink.write_all(s.as_bytes())?;
        Ok(s.len())
    }

    pub fn read_from(source: &mut impl Read) -> Result<Footprint, FormatError> {
        let mut s = String::new();
        source.read_to_string(&mut s).map_err(|e| {
            if e.kind() == io::ErrorKind::InvalidData {
                FormatError::MalformedLine {
                    line: 0,
                    reason: "not UTF-8".into(),
                }
            } else {
                FormatError::Io(e)
            }
        })?;
        Footprint::parse(&s)
    }

    /// Parses the file form. Only canonical lines are accepted, so writing a
    /// parsed footprint reproduces the input bytes.
    pub fn parse(src: &str) -> Result<Footprint, FormatError> {
        let mut lines = Vec::new();
        let mut rest = src;
        while !rest.is_empty() {
            match rest.find('\n') {
                Some(n) => {
                    lines.push((&rest[..n], true));
                    rest = &rest[n + 1..];
                }
                None => {
                    lines.push((rest, false));
                    rest = "";
                }
            }
        }
        let Some(&(first, _)) = lines.first() else {
            return Err(FormatError::MalformedLine {
                line: 1,
                reason: "empty file".into(),
            });
        };
        let hv = json_line(first, 1)?;
        let fmt_ = hv.get("fmt").and_then(Value::as_str);
        match fmt_ {
            Some(FORMAT) => {}
            Some(other) => return Err(FormatError::UnsupportedVersion(other.to_string())),
            None => return Err(malformed(1, "missing fmt")),
        }
        let header = Header {
            image: str_field(&hv, "image", 1)?.to_string(),
            entry: hex_field(&hv, "entry", 1)?,
        };
        let mut canon = String::new();
        render_header(&mut canon, &header);
        check_canonical(&canon, first, lines[0].1, 1)?;

        let mut fp = Footprint {
            header,
            actions: Vec::new(),
            data: Vec::new(),
            crash: None,
        };
        for (n, &(line, terminated)) in lines.iter().enumerate().skip(1) {
            let ln = n + 1;
            if fp.crash.is_some() {
                return Err(malformed(ln, "content after crash record"));
            }
            let v = json_line(line, ln)?;
            canon.clear();
            match str_field(&v, "t", ln)? {
                "A" => {
                    let a = ActionEvent {
                        index: int_field(&v, "i", ln)?,
                        pc: hex_field(&v, "pc", ln)?,
                    };
                    render_action(&mut canon, &a);
                    fp.actions.push(a);
                }
                "D" => {
                    let kind = match str_field(&v, "op", ln)? {
                        "R" => AccessKind::Read,
                        "W" => AccessKind::Write,
                        other => return Err(malformed(ln, format!("bad op {other:?}"))),
                    };
                    let w = int_field(&v, "w", ln)?;
                    let width = u32::try_from(w)
                        .ok()
                        .and_then(Width::from_bytes)
                        .ok_or_else(|| malformed(ln, format!("bad width {w}")))?;
                    let d = DataEvent {
                        index: int_field(&v, "i", ln)?,
                        pc: hex_field(&v, "pc", ln)?,
                        kind,
                        addr: hex_field(&v, "addr", ln)?,
                        width,
                        value: hex_field(&v, "val", ln)?,
                    };
                    if fp.actions.last().map(|a| a.index) != Some(d.index) {
                        return Err(violation(format!(
                            "line {ln}: data event does not follow its action {}",
                            d.index
                        )));
                    }
                    render_data(&mut canon, &d);
                    fp.data.push(d);
                }
                "C" => {
                    let reason = str_field(&v, "reason", ln)?;
                    let reason = CrashReason::from_code(reason)
                        .ok_or_else(|| malformed(ln, format!("bad reason {reason:?}")))?;
                    let culprit = match v.get("culprit") {
                        Some(Value::Null) => None,
                        Some(c) => Some(parse_culprit(c, ln)?),
                        None => return Err(malformed(ln, "missing culprit")),
                    };
                    let c = CrashDescriptor {
                        reason,
                        index: int_field(&v, "i", ln)?,
                        pc: hex_field(&v, "pc", ln)?,
                        fault: hex_field(&v, "fault", ln)?,
                        culprit,
                    };
                    render_crash(&mut canon, &c);
                    fp.crash = Some(c);
                }
                other => return Err(malformed(ln, format!("unknown record type {other:?}"))),
            }
            check_canonical(&canon, line, terminated, ln)?;
        }
        fp.validate()?;
        Ok(fp)
    }

    /// Keeps the last `n` actions with their data events and the crash
    /// record. Trace indices are preserved.
    pub fn slice_last(&self, n: usize) -> Result<Footprint, SliceError> {
        let len = self.actions.len();
        if n == 0 || n > len {
            return Err(SliceError { n, len });
        }
        let actions = self.actions[len - n..].to_vec();
        let from = actions[0].index;
        let lo = self.data.partition_point(|d| d.index < from);
        Ok(Footprint {
            header: self.header.clone(),
            actions,
            data: self.data[lo..].to_vec(),
            crash: self.crash,
        })
    }
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn malformed(line: usize, reason: impl Into<String>) -> FormatError {
    FormatError::MalformedLine {
        line,
        reason: reason.into(),
    }
}

fn json_line(line: &str, ln: usize) -> Result<Value, FormatError> {
    let v: Value = serde_json::from_str(line).map_err(|e| malformed(ln, e.to_string()))?;
    if !v.is_object() {
        return Err(malformed(ln, "not a JSON object"));
    }
    Ok(v)
}

fn check_canonical(canon: &str, line: &str, terminated: bool, ln: usize) -> Result<(), FormatError> {
    if !terminated {
        return Err(malformed(ln, "missing line terminator"));
    }
    // `canon` carries its own newline.
    if &canon[..canon.len() - 1] != line {
        return Err(malformed(ln, "non-canonical encoding"));
    }
    Ok(())
}

fn str_field<'v>(v: &'v Value, key: &str, ln: usize) -> Result<&'v str, FormatError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(ln, format!("missing string field {key:?}")))
}

fn int_field(v: &Value, key: &str, ln: usize) -> Result<u64, FormatError> {
    v.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed(ln, format!("missing integer field {key:?}")))
}

fn hex_field(v: &Value, key: &str, ln: usize) -> Result<u32, FormatError> {
    let s = str_field(v, key, ln)?;
    s.strip_prefix("0x")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| malformed(ln, format!("bad hex in {key:?}")))
}

fn parse_culprit(v: &Value, ln: usize) -> Result<Culprit, FormatError> {
    Ok(match str_field(v, "kind", ln)? {
        "explicit_pop" => Culprit::ExplicitPop {
            stack_addr: hex_field(v, "addr", ln)?,
        },
        "implicit_register" => {
            let r = str_field(v, "reg", ln)?;
            Culprit::ImplicitRegister(r.parse().map_err(|_| malformed(ln, format!("bad register {r:?}")))?)
        }
        "sequential_overrun" => Culprit::SequentialOverrun,
        other => return Err(malformed(ln, format!("bad culprit {other:?}"))),
    })
}

fn render_header(out: &mut String, h: &Header) {
    let _ = writeln!(
        out,
        r#"{{"fmt":"{FORMAT}","image":"{}","entry":"0x{:x}"}}"#,
        h.image, h.entry
    );
}

fn render_action(out: &mut String, a: &ActionEvent) {
    let _ = writeln!(out, r#"{{"t":"A","i":{},"pc":"0x{:x}"}}"#, a.index, a.pc);
}

fn render_data(out: &mut String, d: &DataEvent) {
    let op = match d.kind {
        AccessKind::Read => 'R',
        AccessKind::Write => 'W',
    };
    let _ = writeln!(
        out,
        r#"{{"t":"D","i":{},"pc":"0x{:x}","op":"{op}","addr":"0x{:x}","w":{},"val":"0x{:x}"}}"#,
        d.index,
        d.pc,
        d.addr,
        d.width.bytes(),
        d.value
    );
}

fn render_crash(out: &mut String, c: &CrashDescriptor) {
    let _ = write!(
        out,
        r#"{{"t":"C","i":{},"pc":"0x{:x}","reason":"{}","fault":"0x{:x}","culprit":"#,
        c.index,
        c.pc,
        c.reason.code(),
        c.fault
    );
    match c.culprit {
        None => out.push_str("null"),
        Some(Culprit::ExplicitPop { stack_addr }) => {
            let _ = write!(out, r#"{{"kind":"explicit_pop","addr":"0x{stack_addr:x}"}}"#);
        }
        Some(Culprit::ImplicitRegister(r)) => {
            let _ = write!(out, r#"{{"kind":"implicit_register","reg":"{r}"}}"#);
        }
        Some(Culprit::SequentialOverrun) => out.push_str(r#"{"kind":"sequential_overrun"}"#),
    }
    out.push_str("}\n");
}
