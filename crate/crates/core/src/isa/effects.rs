//! Use/define extraction.
//!
//! PC operands read the instruction's own address, a constant, so they never
//! produce a use. Every instruction defines PC.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Class, DecodedInstr, Index, MemOperand, Operand, Register, Width, Writeback};

/// A symbolic memory slot `mem(base, index?, disp, width)`; the concrete
/// address is only known once the base (and index) values are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemSlot {
    pub base: Register,
    pub index: Option<Index>,
    pub disp: i32,
    pub width: Width,
}

impl fmt::Display for MemSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mem({}", self.base)?;
        if let Some(ix) = self.index {
            write!(f, ", {}", ix.reg)?;
            if ix.shift != 0 {
                write!(f, " LSL {}", ix.shift)?;
            }
        }
        write!(f, ", {:+}, w{})", self.disp, self.width.bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Reg(Register),
    Mem(MemSlot),
}

impl Location {
    pub fn is_mem(&self) -> bool {
        matches!(self, Location::Mem(_))
    }

    pub fn reg(&self) -> Option<Register> {
        match self {
            Location::Reg(r) => Some(*r),
            Location::Mem(_) => None,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Reg(r) => write!(f, "{r}"),
            Location::Mem(m) => write!(f, "{m}"),
        }
    }
}

/// Why a location participates in an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ExplicitOperand,
    BaseRegister,
    IndexRegister,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EffectItem {
    pub loc: Location,
    pub origin: Origin,
}

/// All uses and defines of one instruction. Memory locations appear in
/// access order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effect {
    pub uses: Vec<EffectItem>,
    pub defines: Vec<EffectItem>,
}

impl Effect {
    fn use_(&mut self, loc: Location, origin: Origin) {
        if loc == Location::Reg(Register::PC) {
            return;
        }
        if !self.uses.iter().any(|u| u.loc == loc) {
            self.uses.push(EffectItem { loc, origin });
        }
    }

    fn use_reg(&mut self, r: Register, origin: Origin) {
        self.use_(Location::Reg(r), origin);
    }

    fn def(&mut self, loc: Location, origin: Origin) {
        if !self.defines.iter().any(|d| d.loc == loc) {
            self.defines.push(EffectItem { loc, origin });
        }
    }

    fn def_reg(&mut self, r: Register, origin: Origin) {
        self.def(Location::Reg(r), origin);
    }

    pub fn uses(&self) -> impl Iterator<Item = Location> + '_ {
        self.uses.iter().map(|u| u.loc)
    }

    pub fn defines(&self) -> impl Iterator<Item = Location> + '_ {
        self.defines.iter().map(|d| d.loc)
    }

    pub fn uses_loc(&self, loc: Location) -> bool {
        self.uses.iter().any(|u| u.loc == loc)
    }

    pub fn defines_loc(&self, loc: Location) -> bool {
        self.defines.iter().any(|d| d.loc == loc)
    }

    /// Memory slots in access order (reads for loads, writes for stores).
    pub fn mem_slots(&self) -> impl Iterator<Item = MemSlot> + '_ {
        self.uses.iter().chain(self.defines.iter()).filter_map(|i| match i.loc {
            Location::Mem(m) => Some(m),
            Location::Reg(_) => None,
        })
    }

    /// Registers defined, as a bitmask over [`Register::index`].
    pub fn defined_regs_mask(&self) -> u32 {
        self.defines
            .iter()
            .filter_map(|d| d.loc.reg())
            .fold(0, |m, r| m | 1 << r.index())
    }
}

/// How an instance of a conditional instruction behaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    /// The condition held (always the case for unconditional instructions).
    Taken,
    /// The condition failed; only APSR is read and PC advances.
    Skipped,
    /// Not determined; defined registers are also read as pass-through.
    Unknown,
}

fn slot_of(m: &MemOperand) -> MemSlot {
    let disp = if m.writeback == Writeback::Post { 0 } else { m.disp };
    MemSlot {
        base: m.base,
        index: m.index,
        disp,
        width: m.width,
    }
}

fn block_slot(base: Register, disp: i32) -> Location {
    Location::Mem(MemSlot {
        base,
        index: None,
        disp,
        width: Width::Word,
    })
}

fn taken(instr: &DecodedInstr) -> Effect {
    use Origin::*;
    let mut e = Effect::default();
    let ops = &instr.operands;
    match instr.class {
        Class::MOV | Class::MVN => {
            if let Operand::Reg(m) = ops[1] {
                e.use_reg(m, ExplicitOperand);
            }
            e.def_reg(ops[0].as_reg().expect("validated"), ExplicitOperand);
        }
        c if c.is_alu() => {
            let (src1, op2) = instr.alu_sources().expect("validated");
            e.use_reg(src1, ExplicitOperand);
            if let Operand::Reg(m) = op2 {
                e.use_reg(m, ExplicitOperand);
            }
            if c == Class::ADC {
                e.use_reg(Register::APSR, Implicit);
            }
            e.def_reg(ops[0].as_reg().expect("validated"), ExplicitOperand);
        }
        c if c.is_compare() => {
            e.use_reg(ops[0].as_reg().expect("validated"), ExplicitOperand);
            if let Operand::Reg(m) = ops[1] {
                e.use_reg(m, ExplicitOperand);
            }
        }
        c if c.is_load() || c.is_store() => {
            let t = ops[0].as_reg().expect("validated");
            let m = ops[1].as_mem().expect("validated");
            let slot = Location::Mem(slot_of(m));
            if c.is_store() {
                e.use_reg(t, ExplicitOperand);
            } else {
                e.use_(slot, ExplicitOperand);
            }
            e.use_reg(m.base, BaseRegister);
            if let Some(ix) = m.index {
                e.use_reg(ix.reg, IndexRegister);
            }
            if c.is_store() {
                e.def(slot, ExplicitOperand);
            } else {
                e.def_reg(t, ExplicitOperand);
            }
            if m.writeback != Writeback::None {
                e.def_reg(m.base, BaseRegister);
            }
        }
        Class::LDM | Class::STM => {
            let m = ops[0].as_mem().expect("validated");
            let list = ops[1].as_list().expect("validated");
            e.use_reg(m.base, BaseRegister);
            for (k, r) in list.iter().enumerate() {
                let slot = block_slot(m.base, 4 * k as i32);
                if instr.class == Class::LDM {
                    e.use_(slot, ExplicitOperand);
                } else {
                    e.use_reg(r, ExplicitOperand);
                }
            }
            for (k, r) in list.iter().enumerate() {
                if instr.class == Class::LDM {
                    e.def_reg(r, ExplicitOperand);
                } else {
                    e.def(block_slot(m.base, 4 * k as i32), ExplicitOperand);
                }
            }
            if m.writeback != Writeback::None {
                e.def_reg(m.base, BaseRegister);
            }
        }
        Class::PUSH | Class::POP => {
            let list = ops[0].as_list().expect("validated");
            let n = list.len() as i32;
            e.use_reg(Register::SP, Implicit);
            let first = if instr.class == Class::PUSH { -4 * n } else { 0 };
            for (k, r) in list.iter().enumerate() {
                let slot = block_slot(Register::SP, first + 4 * k as i32);
                if instr.class == Class::POP {
                    e.use_(slot, ExplicitOperand);
                    e.def_reg(r, ExplicitOperand);
                } else {
                    e.use_reg(r, ExplicitOperand);
                    e.def(slot, ExplicitOperand);
                }
            }
            e.def_reg(Register::SP, Implicit);
        }
        Class::B | Class::NOP => {}
        Class::BL => e.def_reg(Register::LR, Implicit),
        Class::BX | Class::BLX => {
            e.use_reg(ops[0].as_reg().expect("validated"), ExplicitOperand);
            if instr.class == Class::BLX {
                e.def_reg(Register::LR, Implicit);
            }
        }
        _ => unreachable!("all classes covered"),
    }
    if instr.sets_flags {
        if instr.class.partial_flags() {
            e.use_reg(Register::APSR, Implicit);
        }
        e.def_reg(Register::APSR, Implicit);
    }
    e.def_reg(Register::PC, Implicit);
    e
}

/// Effects of one instruction instance given how its condition resolved.
pub fn effects_when(instr: &DecodedInstr, exec: Execution) -> Effect {
    if !instr.is_conditional() {
        return taken(instr);
    }
    match exec {
        Execution::Taken => {
            let mut e = taken(instr);
            e.use_reg(Register::APSR, Origin::Implicit);
            e
        }
        Execution::Skipped => {
            let mut e = Effect::default();
            e.use_reg(Register::APSR, Origin::Implicit);
            e.def_reg(Register::PC, Origin::Implicit);
            e
        }
        Execution::Unknown => {
            let mut e = taken(instr);
            e.use_reg(Register::APSR, Origin::Implicit);
            let passthrough: Vec<Register> = e.defines.iter().filter_map(|d| d.loc.reg()).collect();
            for r in passthrough {
                e.use_reg(r, Origin::Implicit);
            }
            e
        }
    }
}

/// All explicit and implicit uses and defines of `instr`.
///
/// For a conditional instruction this is the static view: APSR is used and
/// every defined register is also used, since a failed condition passes its
/// old value through.
pub fn effects(instr: &DecodedInstr) -> Effect {
    effects_when(instr, Execution::Unknown)
}
