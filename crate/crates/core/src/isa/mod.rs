//! The micro-ISA: a small ARM Cortex-M flavoured instruction subset.
//!
//! Programs are written in a textual assembly form (see [`asm`]); every
//! instruction occupies four bytes, PC reads as the address of the current
//! instruction and memory is little-endian. The submodules provide forward
//! execution ([`exec`]), operand use/define extraction ([`effects`]) and the
//! per-class inverse relations used by reverse execution ([`invert`]).

pub mod asm;
pub mod effects;
pub mod exec;
pub mod invert;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use asm::{assemble, AsmError, Image};
pub use effects::{effects, Effect, EffectItem, Location, MemSlot, Origin};
pub use exec::{step_forward, AccessKind, ExecError, MachineState, MemoryAccess, MemoryBus};
pub use invert::{invert, InconsistentEvidence, RegValuation};

/// Error raised when an instruction is assembled with operands that do not
/// fit its class.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("{class}: {reason}")]
    BadOperands { class: Class, reason: String },
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
}

/// One of the 17 architectural locations: R0-R12, SP, LR, PC and the APSR
/// flags (N, Z, C, V treated as a single unit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Register {
    R0 = 0,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    R9,
    R10,
    R11,
    R12,
    SP,
    LR,
    PC,
    APSR,
}

impl Register {
    pub const COUNT: usize = 17;

    pub const ALL: [Register; 17] = [
        Register::R0,
        Register::R1,
        Register::R2,
        Register::R3,
        Register::R4,
        Register::R5,
        Register::R6,
        Register::R7,
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::SP,
        Register::LR,
        Register::PC,
        Register::APSR,
    ];

    /// The sixteen core registers, excluding APSR.
    pub const CORE: [Register; 16] = [
        Register::R0,
        Register::R1,
        Register::R2,
        Register::R3,
        Register::R4,
        Register::R5,
        Register::R6,
        Register::R7,
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::SP,
        Register::LR,
        Register::PC,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Register> {
        Register::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 17] = [
            "R0", "R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8", "R9", "R10", "R11", "R12", "SP", "LR", "PC", "APSR",
        ];
        NAMES[self.index()]
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Register {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let reg = match upper.as_str() {
            "SP" | "R13" => Register::SP,
            "LR" | "R14" => Register::LR,
            "PC" | "R15" => Register::PC,
            "APSR" => Register::APSR,
            other => {
                let n: usize = other
                    .strip_prefix('R')
                    .and_then(|d| d.parse().ok())
                    .filter(|&n| n <= 12)
                    .ok_or_else(|| IsaError::UnknownRegister(s.to_string()))?;
                Register::ALL[n]
            }
        };
        Ok(reg)
    }
}

/// ARM condition codes. `Al` is "always".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Eq,
    Ne,
    Cs,
    Cc,
    Mi,
    Pl,
    Vs,
    Vc,
    Hi,
    Ls,
    Ge,
    Lt,
    Gt,
    Le,
    Al,
}

pub const FLAG_N: u32 = 1 << 31;
pub const FLAG_Z: u32 = 1 << 30;
pub const FLAG_C: u32 = 1 << 29;
pub const FLAG_V: u32 = 1 << 28;
pub const FLAGS_MASK: u32 = FLAG_N | FLAG_Z | FLAG_C | FLAG_V;

impl Condition {
    pub const ALL: [Condition; 15] = [
        Condition::Eq,
        Condition::Ne,
        Condition::Cs,
        Condition::Cc,
        Condition::Mi,
        Condition::Pl,
        Condition::Vs,
        Condition::Vc,
        Condition::Hi,
        Condition::Ls,
        Condition::Ge,
        Condition::Lt,
        Condition::Gt,
        Condition::Le,
        Condition::Al,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Condition::Eq => "EQ",
            Condition::Ne => "NE",
            Condition::Cs => "CS",
            Condition::Cc => "CC",
            Condition::Mi => "MI",
            Condition::Pl => "PL",
            Condition::Vs => "VS",
            Condition::Vc => "VC",
            Condition::Hi => "HI",
            Condition::Ls => "LS",
            Condition::Ge => "GE",
            Condition::Lt => "LT",
            Condition::Gt => "GT",
            Condition::Le => "LE",
            Condition::Al => "",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Condition> {
        Some(match s {
            "EQ" => Condition::Eq,
            "NE" => Condition::Ne,
            "CS" | "HS" => Condition::Cs,
            "CC" | "LO" => Condition::Cc,
            "MI" => Condition::Mi,
            "PL" => Condition::Pl,
            "VS" => Condition::Vs,
            "VC" => Condition::Vc,
            "HI" => Condition::Hi,
            "LS" => Condition::Ls,
            "GE" => Condition::Ge,
            "LT" => Condition::Lt,
            "GT" => Condition::Gt,
            "LE" => Condition::Le,
            "AL" | "" => Condition::Al,
            _ => return None,
        })
    }

    /// Evaluates the condition against an APSR value.
    pub fn holds(self, apsr: u32) -> bool {
        let n = apsr & FLAG_N != 0;
        let z = apsr & FLAG_Z != 0;
        let c = apsr & FLAG_C != 0;
        let v = apsr & FLAG_V != 0;
        match self {
            Condition::Eq => z,
            Condition::Ne => !z,
            Condition::Cs => c,
            Condition::Cc => !c,
            Condition::Mi => n,
            Condition::Pl => !n,
            Condition::Vs => v,
            Condition::Vc => !v,
            Condition::Hi => c && !z,
            Condition::Ls => !c || z,
            Condition::Ge => n == v,
            Condition::Lt => n != v,
            Condition::Gt => !z && n == v,
            Condition::Le => z || n != v,
            Condition::Al => true,
        }
    }
}

/// Memory access width in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Half,
    Word,
}

impl Width {
    #[inline]
    pub fn bytes(self) -> u32 {
        match self {
            Width::Byte => 1,
            Width::Half => 2,
            Width::Word => 4,
        }
    }

    /// Mask selecting the low `8 * bytes` bits.
    #[inline]
    pub fn mask(self) -> u32 {
        match self {
            Width::Byte => 0xff,
            Width::Half => 0xffff,
            Width::Word => u32::MAX,
        }
    }

    pub fn from_bytes(n: u32) -> Option<Width> {
        match n {
            1 => Some(Width::Byte),
            2 => Some(Width::Half),
            4 => Some(Width::Word),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Writeback {
    None,
    /// `[Rn, #d]!`: address is `Rn + d`, then `Rn` becomes the address.
    Pre,
    /// `[Rn], #d`: address is `Rn`, then `Rn` becomes `Rn + d`.
    Post,
}

/// A scaled index register inside a memory operand: `Rm, LSL #shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Index {
    pub reg: Register,
    pub shift: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Register,
    pub index: Option<Index>,
    pub disp: i32,
    pub width: Width,
    pub writeback: Writeback,
}

impl MemOperand {
    pub fn offset(base: Register, disp: i32, width: Width) -> MemOperand {
        MemOperand {
            base,
            index: None,
            disp,
            width,
            writeback: Writeback::None,
        }
    }

    /// Offset added to the base before the access (zero for post-index).
    pub fn access_offset(&self, index_value: u32) -> u32 {
        match self.writeback {
            Writeback::Post => 0,
            _ => self.total_offset(index_value),
        }
    }

    pub fn total_offset(&self, index_value: u32) -> u32 {
        let scaled = self
            .index
            .map(|ix| index_value.wrapping_shl(ix.shift as u32))
            .unwrap_or(0);
        (self.disp as u32).wrapping_add(scaled)
    }
}

/// Register list of a block transfer. Stored as a bitmask over R0-PC, so it
/// is duplicate free and iterates in register-number order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegList(u16);

impl RegList {
    pub fn new(regs: &[Register]) -> Option<RegList> {
        let mut mask = 0u16;
        for &r in regs {
            if r == Register::APSR {
                return None;
            }
            let bit = 1u16 << r.index();
            if mask & bit != 0 {
                return None;
            }
            mask |= bit;
        }
        (mask != 0).then_some(RegList(mask))
    }

    pub fn from_mask(mask: u16) -> Option<RegList> {
        (mask != 0).then_some(RegList(mask))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn contains(self, r: Register) -> bool {
        r != Register::APSR && self.0 & (1 << r.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Register> {
        (0..16)
            .filter(move |i| self.0 & (1 << i) != 0)
            .map(|i| Register::CORE[i])
    }

    /// Position of `r` in list order.
    pub fn position(self, r: Register) -> Option<usize> {
        self.iter().position(|x| x == r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Register),
    Imm(u32),
    Mem(MemOperand),
    List(RegList),
}

impl Operand {
    pub fn as_reg(&self) -> Option<Register> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_mem(&self) -> Option<&MemOperand> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<RegList> {
        match self {
            Operand::List(l) => Some(*l),
            _ => None,
        }
    }
}

macro_rules! classes {
    ($($name:ident),* $(,)?) => {
        /// Instruction class (mnemonic without flag or condition suffix).
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Class { $($name),* }

        impl Class {
            pub const ALL: &'static [Class] = &[$(Class::$name),*];

            pub fn mnemonic(self) -> &'static str {
                match self { $(Class::$name => stringify!($name)),* }
            }
        }
    };
}

classes!(
    MOV, MVN, ADD, SUB, ADC, RSB, MUL, AND, ORR, EOR, BIC, LSL, LSR, ASR, ROR, CMP, CMN, TST, LDR, LDRB, LDRH, STR,
    STRB, STRH, LDM, STM, PUSH, POP, B, BL, BX, BLX, NOP,
);

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl Class {
    /// Two-or-three operand data processing with a destination register.
    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Class::ADD
                | Class::SUB
                | Class::ADC
                | Class::RSB
                | Class::MUL
                | Class::AND
                | Class::ORR
                | Class::EOR
                | Class::BIC
                | Class::LSL
                | Class::LSR
                | Class::ASR
                | Class::ROR
        )
    }

    pub fn is_shift(self) -> bool {
        matches!(self, Class::LSL | Class::LSR | Class::ASR | Class::ROR)
    }

    pub fn is_compare(self) -> bool {
        matches!(self, Class::CMP | Class::CMN | Class::TST)
    }

    pub fn is_load(self) -> bool {
        matches!(self, Class::LDR | Class::LDRB | Class::LDRH)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Class::STR | Class::STRB | Class::STRH)
    }

    pub fn is_block(self) -> bool {
        matches!(self, Class::LDM | Class::STM | Class::PUSH | Class::POP)
    }

    pub fn is_branch(self) -> bool {
        matches!(self, Class::B | Class::BL | Class::BX | Class::BLX)
    }

    /// Whether the `S` suffix is meaningful for this class.
    pub fn may_set_flags(self) -> bool {
        self.is_alu() || matches!(self, Class::MOV | Class::MVN)
    }

    /// Classes whose flag update keeps C and/or V from the previous APSR.
    pub fn partial_flags(self) -> bool {
        matches!(
            self,
            Class::MOV | Class::MVN | Class::MUL | Class::AND | Class::ORR | Class::EOR | Class::BIC | Class::TST
        ) || self.is_shift()
    }

    pub fn mem_width(self) -> Option<Width> {
        match self {
            Class::LDR | Class::STR => Some(Width::Word),
            Class::LDRB | Class::STRB => Some(Width::Byte),
            Class::LDRH | Class::STRH => Some(Width::Half),
            _ => None,
        }
    }
}

/// One decoded instruction of the micro-ISA.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecodedInstr {
    pub address: u32,
    pub class: Class,
    pub cond: Condition,
    pub sets_flags: bool,
    pub operands: Vec<Operand>,
    /// Canonical disassembly.
    pub text: String,
}

impl DecodedInstr {
    /// Validates operand shapes for the class and renders the canonical text.
    pub fn new(
        address: u32,
        class: Class,
        cond: Condition,
        sets_flags: bool,
        operands: Vec<Operand>,
    ) -> Result<DecodedInstr, IsaError> {
        let sets_flags = sets_flags || class.is_compare();
        validate(class, sets_flags, &operands)?;
        let mut instr = DecodedInstr {
            address,
            class,
            cond,
            sets_flags,
            operands,
            text: String::new(),
        };
        instr.text = render(&instr);
        Ok(instr)
    }

    pub fn is_conditional(&self) -> bool {
        self.cond != Condition::Al
    }

    /// Address of the sequentially next instruction.
    pub fn next_address(&self) -> u32 {
        self.address.wrapping_add(4)
    }

    /// The memory operand, if the class has one (loads, stores, LDM/STM).
    pub fn mem_operand(&self) -> Option<&MemOperand> {
        self.operands.iter().find_map(Operand::as_mem)
    }

    pub fn reg_list(&self) -> Option<RegList> {
        self.operands.iter().find_map(Operand::as_list)
    }

    /// Destination register of data-processing and load classes.
    pub fn dest(&self) -> Option<Register> {
        if self.class.is_alu() || matches!(self.class, Class::MOV | Class::MVN) || self.class.is_load() {
            self.operands.first().and_then(Operand::as_reg)
        } else {
            None
        }
    }

    /// For ALU classes, the first source and second source operands with the
    /// two-operand form (`ADD Rd, X`) expanded to `ADD Rd, Rd, X`.
    pub fn alu_sources(&self) -> Option<(Register, Operand)> {
        if !self.class.is_alu() {
            return None;
        }
        match self.operands.as_slice() {
            [Operand::Reg(d), op2] => Some((*d, *op2)),
            [_, Operand::Reg(n), op2] => Some((*n, *op2)),
            _ => None,
        }
    }

    /// Number of memory accesses the instruction performs when executed.
    pub fn access_count(&self) -> usize {
        match self.class {
            c if c.is_load() || c.is_store() => 1,
            c if c.is_block() => self.reg_list().map(RegList::len).unwrap_or(0),
            _ => 0,
        }
    }

    /// Whether the instruction may write PC with a data value (not a
    /// sequential advance or a fixed branch target).
    pub fn writes_pc_from_data(&self) -> bool {
        match self.class {
            Class::BX | Class::BLX => true,
            Class::MOV | Class::LDR => self.dest() == Some(Register::PC),
            Class::POP | Class::LDM => self.reg_list().is_some_and(|l| l.contains(Register::PC)),
            _ => false,
        }
    }

    pub fn branch_target(&self) -> Option<u32> {
        match (self.class, self.operands.first()) {
            (Class::B | Class::BL, Some(Operand::Imm(t))) => Some(*t),
            _ => None,
        }
    }
}

impl fmt::Display for DecodedInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn bad(class: Class, reason: impl Into<String>) -> IsaError {
    IsaError::BadOperands {
        class,
        reason: reason.into(),
    }
}

fn validate(class: Class, sets_flags: bool, ops: &[Operand]) -> Result<(), IsaError> {
    use Operand::*;
    if sets_flags && !class.may_set_flags() && !class.is_compare() {
        return Err(bad(class, "cannot set flags"));
    }
    let no_apsr = ops.iter().all(|op| match op {
        Reg(r) => *r != Register::APSR,
        Mem(m) => m.base != Register::APSR && m.index.is_none_or(|i| i.reg != Register::APSR),
        _ => true,
    });
    if !no_apsr {
        return Err(bad(class, "APSR is not an operand"));
    }
    let reg_or_imm = |op: &Operand| matches!(op, Reg(_) | Imm(_));
    match class {
        Class::MOV | Class::MVN => match ops {
            [Reg(d), src] if reg_or_imm(src) => {
                if *d == Register::PC && (class == Class::MVN || sets_flags || !matches!(src, Reg(_))) {
                    return Err(bad(class, "PC destination needs plain MOV from a register"));
                }
            }
            _ => return Err(bad(class, "expected Rd, Rm|#imm")),
        },
        c if c.is_alu() => {
            let (d, srcs) = match ops {
                [Reg(d), rest @ ..] => (*d, rest),
                _ => return Err(bad(class, "expected destination register")),
            };
            if d == Register::PC {
                return Err(bad(class, "PC destination not supported"));
            }
            let op2 = match srcs {
                [op2] => op2,
                [Reg(_), op2] => op2,
                _ => return Err(bad(class, "expected Rd, [Rn,] Rm|#imm")),
            };
            if !reg_or_imm(op2) {
                return Err(bad(class, "second source must be a register or immediate"));
            }
            if class == Class::MUL && !matches!(op2, Reg(_)) {
                return Err(bad(class, "MUL takes registers only"));
            }
            if class.is_shift() {
                if let Imm(k) = op2 {
                    if *k > 31 {
                        return Err(bad(class, "shift amount must be 0..31"));
                    }
                }
            }
        }
        c if c.is_compare() => match ops {
            [Reg(_), src] if reg_or_imm(src) => {}
            _ => return Err(bad(class, "expected Rn, Rm|#imm")),
        },
        c if c.is_load() || c.is_store() => match ops {
            [Reg(t), Mem(m)] => {
                if Some(m.width) != class.mem_width() {
                    return Err(bad(class, "access width does not match class"));
                }
                if !(i16::MIN as i32..=i16::MAX as i32).contains(&m.disp) {
                    return Err(bad(class, "displacement exceeds 16 bits"));
                }
                if let Some(ix) = m.index {
                    if ix.shift > 31 {
                        return Err(bad(class, "index shift must be 0..31"));
                    }
                    if m.writeback != Writeback::None {
                        return Err(bad(class, "writeback with index register not supported"));
                    }
                    if ix.reg == Register::PC {
                        return Err(bad(class, "PC cannot be an index"));
                    }
                }
                if m.writeback != Writeback::None && (m.base == *t || m.base == Register::PC) {
                    return Err(bad(class, "writeback base conflicts with transfer register"));
                }
                if *t == Register::PC && class != Class::LDR {
                    return Err(bad(class, "only LDR may target PC"));
                }
            }
            _ => return Err(bad(class, "expected Rt, [memory]")),
        },
        Class::LDM | Class::STM => match ops {
            [Mem(m), List(l)] => {
                if m.index.is_some() || m.disp != 0 || m.width != Width::Word {
                    return Err(bad(class, "block transfer base must be a plain register"));
                }
                if !matches!(m.writeback, Writeback::None | Writeback::Post) {
                    return Err(bad(class, "block transfer writeback is `Rn!`"));
                }
                if m.base == Register::PC {
                    return Err(bad(class, "PC base not supported"));
                }
                if m.writeback == Writeback::Post && l.contains(m.base) {
                    return Err(bad(class, "base in list with writeback"));
                }
                if class == Class::STM && l.contains(Register::PC) {
                    return Err(bad(class, "PC cannot be stored"));
                }
            }
            _ => return Err(bad(class, "expected Rn{!}, {list}")),
        },
        Class::PUSH | Class::POP => match ops {
            [List(l)] => {
                if l.contains(Register::SP) {
                    return Err(bad(class, "SP in list"));
                }
                if class == Class::PUSH && l.contains(Register::PC) {
                    return Err(bad(class, "PC cannot be pushed"));
                }
            }
            _ => return Err(bad(class, "expected {list}")),
        },
        Class::B | Class::BL => match ops {
            [Imm(_)] => {}
            _ => return Err(bad(class, "expected branch target")),
        },
        Class::BX | Class::BLX => match ops {
            [Reg(r)] if *r != Register::PC => {}
            _ => return Err(bad(class, "expected Rm")),
        },
        Class::NOP => {
            if !ops.is_empty() {
                return Err(bad(class, "takes no operands"));
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn fmt_num(v: u32) -> String {
    if v < 10 {
        v.to_string()
    } else {
        format!("0x{v:x}")
    }
}

fn fmt_signed(v: i32) -> String {
    if v < 0 {
        format!("-{}", fmt_num(v.unsigned_abs()))
    } else {
        fmt_num(v as u32)
    }
}

fn render_mem(m: &MemOperand) -> String {
    let inner = match m.index {
        Some(Index { reg, shift: 0 }) => format!("{}, {}", m.base, reg),
        Some(Index { reg, shift }) => format!("{}, {}, LSL #{}", m.base, reg, shift),
        None => format!("{}, #{}", m.base, fmt_signed(m.disp)),
    };
    match m.writeback {
        Writeback::None => format!("[{inner}]"),
        Writeback::Pre => format!("[{inner}]!"),
        Writeback::Post => format!("[{}], #{}", m.base, fmt_signed(m.disp)),
    }
}

fn render_list(l: RegList) -> String {
    let names: Vec<&str> = l.iter().map(Register::name).collect();
    format!("{{{}}}", names.join(", "))
}

fn render(instr: &DecodedInstr) -> String {
    let mut out = String::from(instr.class.mnemonic());
    if instr.sets_flags && !instr.class.is_compare() {
        out.push('S');
    }
    out.push_str(instr.cond.suffix());
    let ops: Vec<String> = match instr.class {
        Class::B | Class::BL => instr
            .operands
            .iter()
            .map(|op| match op {
                Operand::Imm(t) => format!("0x{t:x}"),
                _ => unreachable!(),
            })
            .collect(),
        Class::LDM | Class::STM => match instr.operands.as_slice() {
            [Operand::Mem(m), Operand::List(l)] => {
                let wb = if m.writeback == Writeback::Post { "!" } else { "" };
                vec![format!("{}{}", m.base, wb), render_list(*l)]
            }
            _ => unreachable!(),
        },
        _ => instr
            .operands
            .iter()
            .map(|op| match op {
                Operand::Reg(r) => r.to_string(),
                Operand::Imm(v) => format!("#{}", fmt_num(*v)),
                Operand::Mem(m) => render_mem(m),
                Operand::List(l) => render_list(*l),
            })
            .collect(),
    };
    if !ops.is_empty() {
        out.push(' ');
        out.push_str(&ops.join(", "));
    }
    out
}
