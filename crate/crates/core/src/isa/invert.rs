//! Inverse relations.
//!
//! A [`Frame`] holds what is known about one instruction instance: register
//! values before (`pre`) and after (`post`) it executed, and the address and
//! value of each memory access in access order. [`solve`] applies the
//! class's forward relation and every invertible direction of it until no
//! new value can be deduced. Each deduction is a consequence of the forward
//! semantics, so known values are never contradicted unless the evidence
//! itself is inconsistent.

use thiserror::Error;

use super::effects::{effects_when, Execution};
use super::exec::{alu, flags_after, AccessKind, MemoryAccess};
use super::{Class, DecodedInstr, Operand, Register, Width, Writeback, FLAG_C};

/// Partial register valuation indexed by [`Register::index`].
pub type RegValuation = [Option<u32>; Register::COUNT];

/// Which part of a frame a conflicting value landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Pre(Register),
    Post(Register),
    Addr(usize),
    Value(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("inconsistent evidence at {slot:?}: known 0x{known:x}, deduced 0x{deduced:x}")]
pub struct InconsistentEvidence {
    pub slot: Slot,
    pub known: u32,
    pub deduced: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemCell {
    pub addr: Option<u32>,
    pub value: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub pre: RegValuation,
    pub post: RegValuation,
    pub mem: Vec<MemCell>,
    /// Whether the condition held. Unconditional instructions are `Some(true)`.
    pub executed: Option<bool>,
}

impl Frame {
    pub fn new(instr: &DecodedInstr) -> Frame {
        let mut f = Frame {
            pre: [None; Register::COUNT],
            post: [None; Register::COUNT],
            mem: Vec::new(),
            executed: None,
        };
        f.reset(instr);
        f
    }

    /// Clears all knowledge, keeping the allocation.
    pub fn reset(&mut self, instr: &DecodedInstr) {
        self.pre = [None; Register::COUNT];
        self.post = [None; Register::COUNT];
        self.pre[Register::PC.index()] = Some(instr.address);
        self.mem.clear();
        self.mem.resize(instr.access_count(), MemCell::default());
        self.executed = (!instr.is_conditional()).then_some(true);
    }
}

struct Solver<'a> {
    f: &'a mut Frame,
    i: &'a DecodedInstr,
    changed: bool,
}

type Res = Result<(), InconsistentEvidence>;

fn put(slot: &mut Option<u32>, v: u32, at: Slot, changed: &mut bool) -> Res {
    match *slot {
        Some(k) if k == v => Ok(()),
        Some(k) => Err(InconsistentEvidence {
            slot: at,
            known: k,
            deduced: v,
        }),
        None => {
            *slot = Some(v);
            *changed = true;
            Ok(())
        }
    }
}

/// Multiplicative inverse of an odd number modulo 2^32 (Newton iteration).
fn inverse_odd(b: u32) -> u32 {
    debug_assert!(b & 1 == 1);
    let mut x = b;
    for _ in 0..5 {
        x = x.wrapping_mul(2u32.wrapping_sub(b.wrapping_mul(x)));
    }
    x
}

impl Solver<'_> {
    fn pre(&self, r: Register) -> Option<u32> {
        if r == Register::PC {
            return Some(self.i.address);
        }
        self.f.pre[r.index()]
    }

    fn post(&self, r: Register) -> Option<u32> {
        self.f.post[r.index()]
    }

    fn set_pre(&mut self, r: Register, v: u32) -> Res {
        if r == Register::PC {
            return if v == self.i.address {
                Ok(())
            } else {
                Err(InconsistentEvidence {
                    slot: Slot::Pre(r),
                    known: self.i.address,
                    deduced: v,
                })
            };
        }
        put(&mut self.f.pre[r.index()], v, Slot::Pre(r), &mut self.changed)
    }

    fn set_post(&mut self, r: Register, v: u32) -> Res {
        put(&mut self.f.post[r.index()], v, Slot::Post(r), &mut self.changed)
    }

    fn addr(&self, k: usize) -> Option<u32> {
        self.f.mem.get(k).and_then(|c| c.addr)
    }

    fn val(&self, k: usize) -> Option<u32> {
        self.f.mem.get(k).and_then(|c| c.value)
    }

    fn set_addr(&mut self, k: usize, v: u32) -> Res {
        match self.f.mem.get_mut(k) {
            Some(c) => put(&mut c.addr, v, Slot::Addr(k), &mut self.changed),
            None => Ok(()),
        }
    }

    fn set_val(&mut self, k: usize, v: u32) -> Res {
        match self.f.mem.get_mut(k) {
            Some(c) => put(&mut c.value, v, Slot::Value(k), &mut self.changed),
            None => Ok(()),
        }
    }

    fn operand(&self, op: Operand) -> Option<u32> {
        match op {
            Operand::Reg(r) => self.pre(r),
            Operand::Imm(v) => Some(v),
            _ => None,
        }
    }

    /// `pre == post` for every register the instruction cannot define.
    fn identity(&mut self, defined: u32) -> Res {
        for r in Register::ALL {
            if r == Register::PC || defined & (1 << r.index()) != 0 {
                continue;
            }
            if let Some(v) = self.post(r) {
                self.set_pre(r, v)?;
            }
            if let Some(v) = self.pre(r) {
                self.set_post(r, v)?;
            }
        }
        Ok(())
    }

    fn decide_execution(&mut self) {
        if self.f.executed.is_some() {
            return;
        }
        if let Some(apsr) = self.pre(Register::APSR) {
            self.f.executed = Some(self.i.cond.holds(apsr));
            self.changed = true;
            return;
        }
        // Branches reveal themselves through the next PC.
        let next = self.i.next_address();
        if let Some(pc) = self.post(Register::PC) {
            let target = match self.i.class {
                Class::B | Class::BL => self.i.branch_target(),
                Class::BX | Class::BLX => self.operand(self.i.operands[0]),
                _ => None,
            };
            if let Some(t) = target {
                if t != next {
                    self.f.executed = Some(pc == t);
                    self.changed = true;
                } else if pc != next {
                    self.f.executed = Some(true);
                    self.changed = true;
                }
            } else if matches!(self.i.class, Class::BX | Class::BLX) && pc != next {
                self.f.executed = Some(true);
                self.changed = true;
            }
        }
    }

    fn skipped(&mut self) -> Res {
        for r in Register::ALL {
            if r == Register::PC {
                continue;
            }
            if let Some(v) = self.post(r) {
                self.set_pre(r, v)?;
            }
            if let Some(v) = self.pre(r) {
                self.set_post(r, v)?;
            }
        }
        self.set_post(Register::PC, self.i.next_address())
    }

    fn flags(&mut self, out: &super::exec::AluOut) -> Res {
        if !self.i.sets_flags {
            return Ok(());
        }
        if self.i.class.partial_flags() {
            if let Some(old) = self.pre(Register::APSR) {
                self.set_post(Register::APSR, flags_after(out, old))?;
            }
        } else {
            self.set_post(Register::APSR, flags_after(out, 0))?;
        }
        Ok(())
    }

    fn data_processing(&mut self) -> Res {
        let i = self.i;
        let class = i.class;
        if matches!(class, Class::MOV | Class::MVN) {
            let d = i.operands[0].as_reg().expect("validated");
            let src = i.operands[1];
            if let Some(b) = self.operand(src) {
                let out = alu(class, 0, b, false);
                self.set_post(d, out.result)?;
                self.flags(&out)?;
            }
            if let (Some(dv), Operand::Reg(m)) = (self.post(d), src) {
                let b = if class == Class::MOV { dv } else { !dv };
                self.set_pre(m, b)?;
            }
            return Ok(());
        }
        let (src1, d, op2) = if class.is_compare() {
            (i.operands[0].as_reg().expect("validated"), None, i.operands[1])
        } else {
            let (s, op2) = i.alu_sources().expect("validated");
            (s, i.operands[0].as_reg(), op2)
        };
        let carry = if class == Class::ADC {
            self.pre(Register::APSR).map(|apsr| apsr & FLAG_C != 0)
        } else {
            Some(false)
        };
        let a = self.pre(src1);
        let b = self.operand(op2);
        if let (Some(a), Some(b), Some(c)) = (a, b, carry) {
            let out = alu(class, a, b, c);
            if let Some(d) = d {
                self.set_post(d, out.result)?;
            }
            self.flags(&out)?;
        }
        let Some(d) = d else { return Ok(()) };
        let Some(dv) = self.post(d) else { return Ok(()) };
        // Both sources naming the same register makes the relation non-injective.
        let same = matches!(op2, Operand::Reg(r) if r == src1);
        if same {
            return Ok(());
        }
        let op2_reg = op2.as_reg();
        let (a, b) = (self.pre(src1), self.operand(op2));
        match class {
            Class::ADD | Class::ADC | Class::SUB | Class::RSB | Class::EOR => {
                let Some(c) = carry else { return Ok(()) };
                let c = c as u32;
                // Solve d = f(a, b) for whichever source is missing.
                let (solve_a, solve_b): (Option<u32>, Option<u32>) = match class {
                    Class::ADD | Class::ADC => (
                        b.map(|b| dv.wrapping_sub(b).wrapping_sub(c)),
                        a.map(|a| dv.wrapping_sub(a).wrapping_sub(c)),
                    ),
                    Class::SUB => (b.map(|b| dv.wrapping_add(b)), a.map(|a| a.wrapping_sub(dv))),
                    Class::RSB => (b.map(|b| b.wrapping_sub(dv)), a.map(|a| dv.wrapping_add(a))),
                    _ => (b.map(|b| dv ^ b), a.map(|a| dv ^ a)),
                };
                if let Some(v) = solve_a {
                    self.set_pre(src1, v)?;
                }
                if let (Some(v), Some(r)) = (solve_b, op2_reg) {
                    self.set_pre(r, v)?;
                }
            }
            Class::MUL => {
                if let Some(b) = b.filter(|b| b & 1 == 1) {
                    self.set_pre(src1, dv.wrapping_mul(inverse_odd(b)))?;
                }
                if let (Some(a), Some(r)) = (a.filter(|a| a & 1 == 1), op2_reg) {
                    self.set_pre(r, dv.wrapping_mul(inverse_odd(a)))?;
                }
            }
            c if c.is_shift() => {
                if let Some(amount) = b.map(|b| b & 0xff) {
                    if amount == 0 {
                        self.set_pre(src1, dv)?;
                    } else if c == Class::ROR {
                        self.set_pre(src1, dv.rotate_left(amount % 32))?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn single_transfer(&mut self) -> Res {
        let i = self.i;
        let t = i.operands[0].as_reg().expect("validated");
        let m = *i.operands[1].as_mem().expect("validated");
        let base = self.pre(m.base);
        let index = m.index.map(|ix| self.pre(ix.reg));
        let index_known = index.map_or(Some(0), |v| v);
        if let (Some(b), Some(ix)) = (base, index_known) {
            self.set_addr(0, b.wrapping_add(m.access_offset(ix)))?;
        }
        if let Some(addr) = self.addr(0) {
            match (m.writeback, m.index) {
                (Writeback::Post, _) => self.set_pre(m.base, addr)?,
                (_, None) => self.set_pre(m.base, addr.wrapping_sub(m.disp as u32))?,
                (_, Some(ix)) => {
                    if let Some(Some(iv)) = index {
                        self.set_pre(m.base, addr.wrapping_sub(m.total_offset(iv)))?;
                    }
                    if let (Some(b), 0) = (self.pre(m.base), ix.shift) {
                        self.set_pre(ix.reg, addr.wrapping_sub(b).wrapping_sub(m.disp as u32))?;
                    }
                }
            }
        }
        if m.writeback != Writeback::None {
            let off = m.disp as u32;
            if let Some(b) = self.pre(m.base) {
                self.set_post(m.base, b.wrapping_add(off))?;
            }
            if let Some(nb) = self.post(m.base) {
                self.set_pre(m.base, nb.wrapping_sub(off))?;
            }
        }
        let mask = m.width.mask();
        if i.class.is_load() {
            if let Some(v) = self.val(0) {
                self.set_post(t, v)?;
            }
            if let Some(v) = self.post(t) {
                self.set_val(0, v & mask)?;
            }
        } else {
            if let Some(v) = self.pre(t) {
                self.set_val(0, v & mask)?;
            }
            if let (Some(v), Width::Word) = (self.val(0), m.width) {
                self.set_pre(t, v)?;
            }
        }
        Ok(())
    }

    fn block_transfer(&mut self) -> Res {
        let i = self.i;
        let list = i.reg_list().expect("validated");
        let n = list.len() as u32;
        let (base_reg, writeback) = match i.class {
            Class::PUSH | Class::POP => (Register::SP, true),
            _ => {
                let m = i.operands[0].as_mem().expect("validated");
                (m.base, m.writeback != Writeback::None)
            }
        };
        let push = i.class == Class::PUSH;
        let to_start = |b: u32| if push { b.wrapping_sub(4 * n) } else { b };
        let from_start = |s: u32| if push { s.wrapping_add(4 * n) } else { s };
        if let Some(b) = self.pre(base_reg) {
            let s = to_start(b);
            for k in 0..n as usize {
                self.set_addr(k, s.wrapping_add(4 * k as u32))?;
            }
        }
        if let Some((k, a)) = (0..n as usize).find_map(|k| self.addr(k).map(|a| (k, a))) {
            self.set_pre(base_reg, from_start(a.wrapping_sub(4 * k as u32)))?;
        }
        if writeback {
            let delta = if push { (4 * n).wrapping_neg() } else { 4 * n };
            if let Some(b) = self.pre(base_reg) {
                self.set_post(base_reg, b.wrapping_add(delta))?;
            }
            if let Some(nb) = self.post(base_reg) {
                self.set_pre(base_reg, nb.wrapping_sub(delta))?;
            }
        }
        let load = matches!(i.class, Class::LDM | Class::POP);
        for (k, r) in list.iter().enumerate() {
            if load {
                if let Some(v) = self.val(k) {
                    self.set_post(r, v)?;
                }
                if let Some(v) = self.post(r) {
                    self.set_val(k, v)?;
                }
            } else {
                if let Some(v) = self.pre(r) {
                    self.set_val(k, v)?;
                }
                if let Some(v) = self.val(k) {
                    self.set_pre(r, v)?;
                }
            }
        }
        Ok(())
    }

    fn branch(&mut self) -> Res {
        let i = self.i;
        match i.class {
            Class::B | Class::BL => {
                self.set_post(Register::PC, i.branch_target().expect("validated"))?;
            }
            _ => {
                let m = i.operands[0].as_reg().expect("validated");
                if let Some(v) = self.pre(m) {
                    self.set_post(Register::PC, v)?;
                }
                if let Some(v) = self.post(Register::PC) {
                    self.set_pre(m, v)?;
                }
            }
        }
        if matches!(i.class, Class::BL | Class::BLX) {
            self.set_post(Register::LR, i.next_address())?;
        }
        Ok(())
    }

    fn taken(&mut self, defined: u32) -> Res {
        self.identity(defined)?;
        let c = self.i.class;
        if c.is_alu() || c.is_compare() || matches!(c, Class::MOV | Class::MVN) {
            self.data_processing()?;
        } else if c.is_load() || c.is_store() {
            self.single_transfer()?;
        } else if c.is_block() {
            self.block_transfer()?;
        } else if c.is_branch() {
            self.branch()?;
        }
        if !c.is_branch() && !self.i.writes_pc_from_data() {
            self.set_post(Register::PC, self.i.next_address())?;
        }
        Ok(())
    }
}

/// Deduces everything the frame's evidence implies about the instance.
/// Returns whether anything new became known.
pub fn solve(instr: &DecodedInstr, frame: &mut Frame) -> Result<bool, InconsistentEvidence> {
    solve_with_defines(instr, frame, effects_when(instr, Execution::Taken).defined_regs_mask())
}

/// [`solve`] with the taken-path defined-register mask precomputed.
pub fn solve_with_defines(
    instr: &DecodedInstr,
    frame: &mut Frame,
    defined_if_taken: u32,
) -> Result<bool, InconsistentEvidence> {
    let mut any = false;
    loop {
        let mut s = Solver {
            f: frame,
            i: instr,
            changed: false,
        };
        s.decide_execution();
        match s.f.executed {
            Some(true) => s.taken(defined_if_taken)?,
            Some(false) => s.skipped()?,
            None => {
                s.identity(defined_if_taken)?;
                if !instr.writes_pc_from_data() && !instr.class.is_branch() {
                    s.set_post(Register::PC, instr.next_address())?;
                }
            }
        }
        if !s.changed {
            return Ok(any);
        }
        any = true;
    }
}

/// Recovers the pre-execution register valuation of one instruction instance
/// from its post-execution valuation and the data events it produced.
///
/// PC is always reported as the instruction address.
pub fn invert(
    instr: &DecodedInstr,
    after: &RegValuation,
    events: &[MemoryAccess],
) -> Result<RegValuation, InconsistentEvidence> {
    let mut frame = Frame::new(instr);
    frame.post = *after;
    let expected = instr.access_count();
    if instr.is_conditional() && expected > 0 {
        frame.executed = Some(!events.is_empty());
    }
    if !events.is_empty() && events.len() != expected {
        return Err(InconsistentEvidence {
            slot: Slot::Addr(events.len().min(expected)),
            known: expected as u32,
            deduced: events.len() as u32,
        });
    }
    let write = instr.class.is_store() || matches!(instr.class, Class::STM | Class::PUSH);
    for (k, ev) in events.iter().enumerate() {
        if (ev.kind == AccessKind::Write) != write {
            return Err(InconsistentEvidence {
                slot: Slot::Addr(k),
                known: write as u32,
                deduced: (ev.kind == AccessKind::Write) as u32,
            });
        }
        frame.mem[k] = MemCell {
            addr: Some(ev.addr),
            value: Some(ev.value),
        };
    }
    solve(instr, &mut frame)?;
    Ok(frame.pre)
}
