//! Forward execution semantics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Class, DecodedInstr, Operand, Register, Width, FLAG_C, FLAG_N, FLAG_V, FLAG_Z};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// One completed memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryAccess {
    pub kind: AccessKind,
    pub addr: u32,
    pub width: Width,
    /// Zero-extended to 32 bits.
    pub value: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ExecError {
    /// The bus refused the access: unmapped, lacking permission, or a
    /// misaligned block transfer.
    #[error("invalid {kind:?} of {} bytes at 0x{addr:x}", width.bytes())]
    UnmappedAccess { addr: u32, width: Width, kind: AccessKind },
    #[error("no instruction to execute at 0x{pc:x}")]
    UndecodableFetch { pc: u32 },
}

/// Register file plus step counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub regs: [u32; Register::COUNT],
    pub steps: u64,
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState {
            regs: [0; Register::COUNT],
            steps: 0,
        }
    }
}

impl MachineState {
    #[inline]
    pub fn get(&self, r: Register) -> u32 {
        self.regs[r.index()]
    }

    #[inline]
    pub fn set(&mut self, r: Register, v: u32) {
        self.regs[r.index()] = v;
    }

    pub fn pc(&self) -> u32 {
        self.get(Register::PC)
    }
}

/// Byte-addressed memory as seen by an executing instruction.
pub trait MemoryBus {
    /// Whether an access would succeed. Must not have side effects.
    fn can_access(&self, addr: u32, width: Width, kind: AccessKind) -> bool;
    /// Reads a little-endian value; only called after `can_access`.
    fn read(&mut self, addr: u32, width: Width) -> u32;
    fn write(&mut self, addr: u32, width: Width, value: u32);
}

/// Observes register traffic of an executing instruction. Reads of PC are
/// not reported: PC operands evaluate to the instruction's own address.
pub trait Tracer {
    fn read_reg(&mut self, _r: Register) {}
    fn write_reg(&mut self, _r: Register) {}
}

impl Tracer for () {}

/// Registers read and written by one step, as bitmasks over
/// [`Register::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Touched {
    pub reads: u32,
    pub writes: u32,
}

impl Tracer for Touched {
    fn read_reg(&mut self, r: Register) {
        self.reads |= 1 << r.index();
    }

    fn write_reg(&mut self, r: Register) {
        self.writes |= 1 << r.index();
    }
}

/// Sparse byte memory over a set of mapped ranges; handy for tests and for
/// driving [`step_forward`] without a full VM.
#[derive(Debug, Clone, Default)]
pub struct SparseMemory {
    ranges: Vec<(u32, u32)>,
    bytes: HashMap<u32, u8>,
}

impl SparseMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map(&mut self, base: u32, size: u32) {
        self.ranges.push((base, size));
    }

    pub fn poke(&mut self, addr: u32, width: Width, value: u32) {
        for k in 0..width.bytes() {
            self.bytes.insert(addr.wrapping_add(k), (value >> (8 * k)) as u8);
        }
    }

    pub fn peek(&self, addr: u32, width: Width) -> u32 {
        (0..width.bytes()).fold(0, |v, k| {
            v | (*self.bytes.get(&addr.wrapping_add(k)).unwrap_or(&0) as u32) << (8 * k)
        })
    }

    fn mapped(&self, addr: u32) -> bool {
        self.ranges.iter().any(|&(b, s)| addr >= b && (addr - b) < s)
    }
}

impl MemoryBus for SparseMemory {
    fn can_access(&self, addr: u32, width: Width, _kind: AccessKind) -> bool {
        (0..width.bytes()).all(|k| addr.checked_add(k).is_some_and(|a| self.mapped(a)))
    }

    fn read(&mut self, addr: u32, width: Width) -> u32 {
        self.peek(addr, width)
    }

    fn write(&mut self, addr: u32, width: Width, value: u32) {
        self.poke(addr, width, value)
    }
}

/// `(result, carry, overflow)` of `a + b + carry_in`.
pub fn add_with_carry(a: u32, b: u32, carry_in: bool) -> (u32, bool, bool) {
    let wide = a as u64 + b as u64 + carry_in as u64;
    let result = wide as u32;
    let carry = wide > u32::MAX as u64;
    let overflow = ((a ^ result) & (b ^ result)) >> 31 == 1;
    (result, carry, overflow)
}

/// Shift with ARM carry-out semantics; `amount` is the full shift amount
/// (register shifts use the low byte). `None` carry means "unchanged".
pub fn shift_with_carry(class: Class, value: u32, amount: u32) -> (u32, Option<bool>) {
    if amount == 0 {
        return (value, None);
    }
    let bit = |n: u32| (value >> n) & 1 == 1;
    match class {
        Class::LSL => match amount {
            1..=31 => (value << amount, Some(bit(32 - amount))),
            32 => (0, Some(bit(0))),
            _ => (0, Some(false)),
        },
        Class::LSR => match amount {
            1..=31 => (value >> amount, Some(bit(amount - 1))),
            32 => (0, Some(bit(31))),
            _ => (0, Some(false)),
        },
        Class::ASR => match amount {
            1..=31 => (((value as i32) >> amount) as u32, Some(bit(amount - 1))),
            _ => (((value as i32) >> 31) as u32, Some(bit(31))),
        },
        Class::ROR => {
            let r = value.rotate_right(amount % 32);
            (r, Some(r >> 31 == 1))
        }
        _ => unreachable!("not a shift"),
    }
}

/// Outcome of a data-processing computation. `None` flags are preserved
/// from the previous APSR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AluOut {
    pub result: u32,
    pub carry: Option<bool>,
    pub overflow: Option<bool>,
}

/// Evaluates a data-processing or compare class on `a` (first source) and
/// `b` (second source). `carry_in` is only consulted by ADC.
pub fn alu(class: Class, a: u32, b: u32, carry_in: bool) -> AluOut {
    let arith = |(r, c, v): (u32, bool, bool)| AluOut {
        result: r,
        carry: Some(c),
        overflow: Some(v),
    };
    let logic = |r: u32| AluOut {
        result: r,
        carry: None,
        overflow: None,
    };
    match class {
        Class::MOV => logic(b),
        Class::MVN => logic(!b),
        Class::ADD | Class::CMN => arith(add_with_carry(a, b, false)),
        Class::ADC => arith(add_with_carry(a, b, carry_in)),
        Class::SUB | Class::CMP => arith(add_with_carry(a, !b, true)),
        Class::RSB => arith(add_with_carry(b, !a, true)),
        Class::MUL => logic(a.wrapping_mul(b)),
        Class::AND | Class::TST => logic(a & b),
        Class::ORR => logic(a | b),
        Class::EOR => logic(a ^ b),
        Class::BIC => logic(a & !b),
        c if c.is_shift() => {
            let (r, carry) = shift_with_carry(c, a, b & 0xff);
            AluOut {
                result: r,
                carry,
                overflow: None,
            }
        }
        c => unreachable!("{c} is not data processing"),
    }
}

/// New APSR after a flag-setting computation.
pub fn flags_after(out: &AluOut, old_apsr: u32) -> u32 {
    let mut apsr = 0;
    if out.result >> 31 == 1 {
        apsr |= FLAG_N;
    }
    if out.result == 0 {
        apsr |= FLAG_Z;
    }
    match out.carry {
        Some(true) => apsr |= FLAG_C,
        Some(false) => {}
        None => apsr |= old_apsr & FLAG_C,
    }
    match out.overflow {
        Some(true) => apsr |= FLAG_V,
        Some(false) => {}
        None => apsr |= old_apsr & FLAG_V,
    }
    apsr
}

struct Ctx<'a, T: Tracer> {
    pre: &'a MachineState,
    next: MachineState,
    tracer: &'a mut T,
    addr: u32,
}

impl<T: Tracer> Ctx<'_, T> {
    #[inline]
    fn r(&mut self, reg: Register) -> u32 {
        if reg == Register::PC {
            return self.addr;
        }
        self.tracer.read_reg(reg);
        self.pre.get(reg)
    }

    #[inline]
    fn w(&mut self, reg: Register, v: u32) {
        self.tracer.write_reg(reg);
        self.next.set(reg, v);
    }

    fn op(&mut self, op: Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.r(r),
            Operand::Imm(v) => v,
            _ => unreachable!("validated register/immediate operand"),
        }
    }
}

/// Executes one instruction.
///
/// Accesses are validated before any is performed, so a faulting instruction
/// leaves both state and memory untouched and reports no accesses.
pub fn step_forward(
    state: &MachineState,
    instr: &DecodedInstr,
    bus: &mut impl MemoryBus,
) -> Result<(MachineState, Vec<MemoryAccess>), ExecError> {
    let mut accesses = Vec::new();
    let next = step_into(state, instr, bus, &mut accesses, &mut ())?;
    Ok((next, accesses))
}

/// [`step_forward`] with register traffic reported to `tracer` and accesses
/// appended to `accesses`.
pub fn step_into<T: Tracer>(
    state: &MachineState,
    instr: &DecodedInstr,
    bus: &mut impl MemoryBus,
    accesses: &mut Vec<MemoryAccess>,
    tracer: &mut T,
) -> Result<MachineState, ExecError> {
    debug_assert_eq!(state.pc(), instr.address, "PC must point at the instruction");
    let mut cx = Ctx {
        pre: state,
        next: *state,
        tracer,
        addr: instr.address,
    };
    cx.next.steps += 1;
    let mut next_pc = instr.next_address();

    if instr.is_conditional() {
        let apsr = cx.r(Register::APSR);
        if !instr.cond.holds(apsr) {
            cx.w(Register::PC, next_pc);
            return Ok(cx.next);
        }
    }

    let ops = &instr.operands;
    let class = instr.class;
    match class {
        Class::MOV | Class::MVN => {
            let d = ops[0].as_reg().expect("validated");
            let b = cx.op(ops[1]);
            let out = alu(class, 0, b, false);
            if instr.sets_flags {
                let old = cx.r(Register::APSR);
                cx.w(Register::APSR, flags_after(&out, old));
            }
            if d == Register::PC {
                next_pc = out.result;
            } else {
                cx.w(d, out.result);
            }
        }
        c if c.is_alu() || c.is_compare() => {
            let (a, b, d) = if c.is_compare() {
                let a = cx.r(ops[0].as_reg().expect("validated"));
                (a, cx.op(ops[1]), None)
            } else {
                let (src1, op2) = instr.alu_sources().expect("validated");
                let a = cx.r(src1);
                (a, cx.op(op2), ops[0].as_reg())
            };
            let carry_in = if c == Class::ADC {
                cx.r(Register::APSR) & FLAG_C != 0
            } else {
                false
            };
            let out = alu(c, a, b, carry_in);
            if instr.sets_flags {
                let old = if c.partial_flags() { cx.r(Register::APSR) } else { 0 };
                cx.w(Register::APSR, flags_after(&out, old));
            }
            if let Some(d) = d {
                cx.w(d, out.result);
            }
        }
        c if c.is_load() || c.is_store() => {
            let t = ops[0].as_reg().expect("validated");
            let m = *ops[1].as_mem().expect("validated");
            let base = cx.r(m.base);
            let index = m.index.map(|ix| cx.r(ix.reg)).unwrap_or(0);
            let offset = m.total_offset(index);
            let addr = base.wrapping_add(m.access_offset(index));
            let kind = if c.is_load() {
                AccessKind::Read
            } else {
                AccessKind::Write
            };
            if !bus.can_access(addr, m.width, kind) {
                return Err(ExecError::UnmappedAccess {
                    addr,
                    width: m.width,
                    kind,
                });
            }
            if c.is_load() {
                let v = bus.read(addr, m.width) & m.width.mask();
                accesses.push(MemoryAccess {
                    kind,
                    addr,
                    width: m.width,
                    value: v,
                });
                if t == Register::PC {
                    next_pc = v;
                } else {
                    cx.w(t, v);
                }
            } else {
                let v = cx.r(t) & m.width.mask();
                bus.write(addr, m.width, v);
                accesses.push(MemoryAccess {
                    kind,
                    addr,
                    width: m.width,
                    value: v,
                });
            }
            if m.writeback != super::Writeback::None {
                cx.w(m.base, base.wrapping_add(offset));
            }
        }
        c if c.is_block() => {
            let list = instr.reg_list().expect("validated");
            let n = list.len() as u32;
            let (base_reg, writeback) = match c {
                Class::PUSH | Class::POP => (Register::SP, true),
                _ => {
                    let m = ops[0].as_mem().expect("validated");
                    (m.base, m.writeback != super::Writeback::None)
                }
            };
            let base = cx.r(base_reg);
            let start = if c == Class::PUSH {
                base.wrapping_sub(4 * n)
            } else {
                base
            };
            let load = matches!(c, Class::LDM | Class::POP);
            let kind = if load { AccessKind::Read } else { AccessKind::Write };
            if start % 4 != 0 {
                return Err(ExecError::UnmappedAccess {
                    addr: start,
                    width: Width::Word,
                    kind,
                });
            }
            for k in 0..n {
                let a = start.wrapping_add(4 * k);
                if !bus.can_access(a, Width::Word, kind) {
                    return Err(ExecError::UnmappedAccess {
                        addr: a,
                        width: Width::Word,
                        kind,
                    });
                }
            }
            let mut loaded = Vec::with_capacity(n as usize);
            for (k, r) in list.iter().enumerate() {
                let a = start.wrapping_add(4 * k as u32);
                if load {
                    let v = bus.read(a, Width::Word);
                    accesses.push(MemoryAccess {
                        kind,
                        addr: a,
                        width: Width::Word,
                        value: v,
                    });
                    loaded.push((r, v));
                } else {
                    let v = cx.r(r);
                    bus.write(a, Width::Word, v);
                    accesses.push(MemoryAccess {
                        kind,
                        addr: a,
                        width: Width::Word,
                        value: v,
                    });
                }
            }
            if writeback {
                let nb = if c == Class::PUSH {
                    start
                } else {
                    base.wrapping_add(4 * n)
                };
                cx.w(base_reg, nb);
            }
            for (r, v) in loaded {
                if r == Register::PC {
                    next_pc = v;
                } else {
                    cx.w(r, v);
                }
            }
        }
        Class::B => next_pc = instr.branch_target().expect("validated"),
        Class::BL => {
            cx.w(Register::LR, instr.next_address());
            next_pc = instr.branch_target().expect("validated");
        }
        Class::BX | Class::BLX => {
            let target = cx.r(ops[0].as_reg().expect("validated"));
            if class == Class::BLX {
                cx.w(Register::LR, instr.next_address());
            }
            next_pc = target;
        }
        Class::NOP => {}
        _ => unreachable!("all classes covered"),
    }
    cx.w(Register::PC, next_pc);
    Ok(cx.next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    fn run1(
        src: &str,
        setup: &[(Register, u32)],
        mem: &mut SparseMemory,
    ) -> Result<(MachineState, Vec<MemoryAccess>), ExecError> {
        let img = assemble(src).unwrap();
        let i = img.instrs().next().unwrap();
        let mut s = MachineState::default();
        s.set(Register::PC, i.address);
        for &(r, v) in setup {
            s.set(r, v);
        }
        step_forward(&s, i, mem)
    }

    #[test]
    fn add_two_registers() {
        let mut mem = SparseMemory::new();
        let (s, acc) = run1("ADD R0, R1", &[(Register::R0, 2), (Register::R1, 3)], &mut mem).unwrap();
        assert_eq!(s.get(Register::R0), 5);
        assert!(acc.is_empty());
        assert_eq!(s.pc(), 4);
    }

    #[test]
    fn null_store_faults() {
        let mut mem = SparseMemory::new();
        mem.map(0x2000_0000, 0x1000);
        let err = run1(
            "STR R4, [R3, #0]",
            &[(Register::R4, 0x2000_02b0), (Register::R3, 0)],
            &mut mem,
        )
        .unwrap_err();
        assert_eq!(
            err,
            ExecError::UnmappedAccess {
                addr: 0,
                width: Width::Word,
                kind: AccessKind::Write
            }
        );
    }

    #[test]
    fn blx_sets_lr_and_pc() {
        let mut mem = SparseMemory::new();
        let (s, _) = run1(".org 0x100\nBLX R4", &[(Register::R4, 0x2000_3280)], &mut mem).unwrap();
        assert_eq!(s.pc(), 0x2000_3280);
        assert_eq!(s.get(Register::LR), 0x104);
    }

    #[test]
    fn push_pop_roundtrip() {
        let mut mem = SparseMemory::new();
        mem.map(0x2000_0000, 0x100);
        let (s, acc) = run1(
            "PUSH {R4, LR}",
            &[(Register::SP, 0x2000_0100), (Register::R4, 7), (Register::LR, 0x55)],
            &mut mem,
        )
        .unwrap();
        assert_eq!(s.get(Register::SP), 0x2000_00f8);
        assert_eq!(
            acc.iter().map(|a| (a.addr, a.value)).collect::<Vec<_>>(),
            vec![(0x2000_00f8, 7), (0x2000_00fc, 0x55)]
        );
        let (s2, acc2) = run1("POP {R4, PC}", &[(Register::SP, 0x2000_00f8)], &mut mem).unwrap();
        assert_eq!(s2.get(Register::R4), 7);
        assert_eq!(s2.pc(), 0x55);
        assert_eq!(s2.get(Register::SP), 0x2000_0100);
        assert_eq!(acc2.len(), 2);
    }

    #[test]
    fn misaligned_pop_is_a_memory_fault() {
        let mut mem = SparseMemory::new();
        mem.map(0x2000_0000, 0x100);
        let err = run1("POP {R4}", &[(Register::SP, 0x2000_0002)], &mut mem).unwrap_err();
        assert!(matches!(
            err,
            ExecError::UnmappedAccess {
                kind: AccessKind::Read,
                ..
            }
        ));
    }

    #[test]
    fn conditional_skip_only_advances_pc() {
        let mut mem = SparseMemory::new();
        let (s, _) = run1("MOVEQ R0, #9", &[(Register::R0, 1)], &mut mem).unwrap();
        assert_eq!(s.get(Register::R0), 1);
        assert_eq!(s.pc(), 4);
    }

    #[test]
    fn flags_from_subtract() {
        let mut mem = SparseMemory::new();
        let (s, _) = run1("SUBS R0, R0, #1", &[(Register::R0, 1)], &mut mem).unwrap();
        assert_eq!(s.get(Register::APSR), FLAG_Z | FLAG_C);
        let (s, _) = run1("CMP R0, #2", &[(Register::R0, 1)], &mut mem).unwrap();
        assert_eq!(s.get(Register::APSR), FLAG_N);
    }

    #[test]
    fn byte_load_zero_extends_and_post_index() {
        let mut mem = SparseMemory::new();
        mem.map(0x1000, 0x10);
        mem.poke(0x1000, Width::Word, 0xaabb_ccdd);
        let (s, acc) = run1("LDRB R0, [R1], #1", &[(Register::R1, 0x1000)], &mut mem).unwrap();
        assert_eq!(s.get(Register::R0), 0xdd);
        assert_eq!(s.get(Register::R1), 0x1001);
        assert_eq!(acc[0].addr, 0x1000);
    }

    #[test]
    fn shifts_carry() {
        assert_eq!(shift_with_carry(Class::LSL, 0x8000_0001, 1), (2, Some(true)));
        assert_eq!(shift_with_carry(Class::LSR, 3, 1), (1, Some(true)));
        assert_eq!(shift_with_carry(Class::ASR, 0x8000_0000, 40), (u32::MAX, Some(true)));
        assert_eq!(shift_with_carry(Class::ROR, 1, 1), (0x8000_0000, Some(true)));
        assert_eq!(shift_with_carry(Class::ROR, 5, 0), (5, None));
    }
}
