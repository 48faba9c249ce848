//! Shared test helpers: a ground-truth dependency oracle built from full
//! machine state, and random generators for instructions and footprints.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::rngs::StdRng;
use rand::Rng;

use rca_core::event_log::{ActionEvent, CrashDescriptor, CrashReason, Culprit, DataEvent, Footprint};
use rca_core::isa::{AccessKind, Class, Condition, DecodedInstr, Image, Index, MemOperand, Operand, Register, Width};
use rca_core::isa::{RegList, Writeback};
use rca_core::microvm::{FullTrace, MemoryMap, Outcome, StepRecord, Vm};
use rca_core::reverse_exec::{NodeKind, NodeLoc, UseDefChain};

pub struct Traced {
    pub trace: FullTrace,
    pub footprint: Footprint,
    pub crash: CrashDescriptor,
}

pub fn run_traced(image: &Image, map: &MemoryMap, stimulus: &[u8], max_steps: u64) -> Traced {
    let vm = Vm::new(image, map).expect("valid map");
    let mut trace = FullTrace::default();
    let r = vm.run_observed(stimulus, max_steps, true, &mut trace).expect("runs");
    let crash = match r.outcome {
        Outcome::Crashed(c) => c,
        other => panic!("expected a crash, got {other:?}"),
    };
    Traced {
        trace,
        footprint: r.footprint,
        crash,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Loc {
    Reg(usize),
    Byte(u32),
}

/// Registers a step reads for dataflow purposes. Flags are excluded; PC is
/// never reported by the tracer.
fn reg_reads(s: &StepRecord) -> impl Iterator<Item = usize> + '_ {
    (0..Register::COUNT).filter(move |&r| r != Register::APSR.index() && s.touched.reads & (1 << r) != 0)
}

fn read_bytes(s: &StepRecord) -> impl Iterator<Item = u32> + '_ {
    s.accesses
        .iter()
        .filter(|a| a.kind == AccessKind::Read)
        .flat_map(|a| (0..a.width.bytes()).map(move |k| a.addr.wrapping_add(k)))
}

/// For every step, the steps that last wrote each location it reads.
pub struct DepGraph {
    pub index: Vec<u64>,
    pub pc: Vec<u32>,
    deps: Vec<Vec<usize>>,
}

impl DepGraph {
    pub fn build(trace: &FullTrace) -> DepGraph {
        let mut last: HashMap<Loc, usize> = HashMap::new();
        let mut deps = Vec::with_capacity(trace.steps.len());
        for (i, s) in trace.steps.iter().enumerate() {
            let locs: Vec<Loc> = reg_reads(s).map(Loc::Reg).chain(read_bytes(s).map(Loc::Byte)).collect();
            let mut d: Vec<usize> = locs.iter().filter_map(|l| last.get(l).copied()).collect();
            d.sort_unstable();
            d.dedup();
            deps.push(d);
            if s.post.is_some() {
                for r in 0..Register::COUNT {
                    if s.touched.writes & (1 << r) != 0 {
                        last.insert(Loc::Reg(r), i);
                    }
                }
                for a in s.accesses.iter().filter(|a| a.kind == AccessKind::Write) {
                    for k in 0..a.width.bytes() {
                        last.insert(Loc::Byte(a.addr.wrapping_add(k)), i);
                    }
                }
            }
        }
        DepGraph {
            index: trace.steps.iter().map(|s| s.index).collect(),
            pc: trace.steps.iter().map(|s| s.pc).collect(),
            deps,
        }
    }

    fn last_writer(trace: &FullTrace, before: usize, loc: Loc) -> Option<usize> {
        (0..before).rev().find(|&i| {
            let s = &trace.steps[i];
            s.post.is_some()
                && match loc {
                    Loc::Reg(r) => s.touched.writes & (1 << r) != 0,
                    Loc::Byte(b) => s
                        .accesses
                        .iter()
                        .any(|a| a.kind == AccessKind::Write && b.wrapping_sub(a.addr) < a.width.bytes()),
                }
        })
    }
}

/// Sink locations derived straight from the crashing instruction's operands.
fn sink_of(trace: &FullTrace, image: &Image, crash: &CrashDescriptor) -> (usize, Vec<Loc>) {
    let pos = trace
        .steps
        .iter()
        .position(|s| s.index == crash.index)
        .expect("crash step traced");
    let instr = image.instr_at(trace.steps[pos].pc).expect("instr");
    let mut locs = Vec::new();
    match (crash.reason, crash.culprit) {
        (CrashReason::InvalidMemoryRead | CrashReason::InvalidMemoryWrite, _) => {
            if matches!(instr.class, Class::PUSH | Class::POP) {
                locs.push(Loc::Reg(Register::SP.index()));
            } else {
                let m = instr.mem_operand().expect("memory operand");
                if m.base != Register::PC {
                    locs.push(Loc::Reg(m.base.index()));
                }
                if let Some(ix) = m.index {
                    locs.push(Loc::Reg(ix.reg.index()));
                }
            }
        }
        (_, Some(Culprit::ExplicitPop { stack_addr })) => {
            locs.extend((0..4).map(|k| Loc::Byte(stack_addr + k)));
        }
        (_, Some(Culprit::ImplicitRegister(r))) => locs.push(Loc::Reg(r.index())),
        other => panic!("oracle does not model {other:?}"),
    }
    locs.sort_by_key(|l| match l {
        Loc::Reg(r) => *r as u64,
        Loc::Byte(b) => (1 << 32) | *b as u64,
    });
    locs.dedup();
    (pos, locs)
}

/// Tainted `(trace_index, pc)` pairs by plain backward reachability over
/// the exact dependency graph, restricted to steps at or after `window_start`.
pub fn oracle_taint(traced: &Traced, image: &Image, window_start: u64) -> BTreeSet<(u64, u32)> {
    let trace = &traced.trace;
    let g = DepGraph::build(trace);
    let (sink_pos, locs) = sink_of(trace, image, &traced.crash);
    let mut tainted = vec![false; trace.steps.len()];
    tainted[sink_pos] = true;
    let mut stack: Vec<usize> = locs
        .iter()
        .filter_map(|&l| DepGraph::last_writer(trace, sink_pos, l))
        .collect();
    while let Some(w) = stack.pop() {
        if g.index[w] < window_start || tainted[w] {
            continue;
        }
        tainted[w] = true;
        stack.extend(g.deps[w].iter().copied());
    }
    (0..trace.steps.len())
        .filter(|&i| tainted[i] && g.index[i] >= window_start)
        .map(|i| (g.index[i], g.pc[i]))
        .collect()
}

/// Every Known value or address in the chain compared with the machine state
/// observed during the run. Returns a description of each disagreement.
pub fn soundness_violations(chain: &UseDefChain, traced: &Traced) -> Vec<String> {
    let by_index: HashMap<u64, &StepRecord> = traced.trace.steps.iter().map(|s| (s.index, s)).collect();
    let mut bad = Vec::new();
    for ins in &chain.instances {
        let s = by_index[&ins.trace_index];
        for id in ins.nodes() {
            let n = chain.node(id);
            let (val, addr) = (chain.value(id), chain.addr(id));
            match n.loc {
                NodeLoc::Reg(r) => {
                    let truth = match n.kind {
                        NodeKind::Use => Some(s.pre.get(r)),
                        NodeKind::Define => s.post.map(|p| p.get(r)),
                    };
                    if let (Some(v), Some(t)) = (val, truth) {
                        if v != t {
                            bad.push(format!(
                                "#{} {} {:?} {r}: 0x{v:x} vs 0x{t:x}",
                                ins.trace_index, s.pc, n.kind
                            ));
                        }
                    }
                }
                NodeLoc::Mem { k, .. } => {
                    let (ta, tv) = match s.accesses.get(k as usize) {
                        Some(a) => (Some(a.addr), Some(a.value)),
                        None if s.post.is_none() => (Some(traced.crash.fault), None),
                        None => (None, None),
                    };
                    if let (Some(a), Some(t)) = (addr, ta) {
                        if a != t {
                            bad.push(format!("#{} mem[{k}] addr 0x{a:x} vs 0x{t:x}", ins.trace_index));
                        }
                    }
                    if let (Some(v), Some(t)) = (val, tv) {
                        if v != t {
                            bad.push(format!("#{} mem[{k}] value 0x{v:x} vs 0x{t:x}", ins.trace_index));
                        }
                    }
                    if (val.is_some() && tv.is_none() && ta.is_none()) || (addr.is_some() && ta.is_none()) {
                        bad.push(format!("#{} mem[{k}] known but never accessed", ins.trace_index));
                    }
                }
            }
        }
    }
    bad
}

// ---- random instructions ----

const GP: [Register; 15] = [
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
];

const CONDS: [Condition; 15] = [
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

pub fn interesting_u32(rng: &mut StdRng) -> u32 {
    match rng.gen_range(0..8) {
        0 => 0,
        1 => u32::MAX,
        2 => 0x8000_0000,
        3 => 0x7fff_ffff,
        4 => rng.gen_range(0..64),
        _ => rng.gen(),
    }
}

fn reg(rng: &mut StdRng, pc_ok: bool) -> Register {
    if pc_ok && rng.gen_ratio(1, 16) {
        Register::PC
    } else {
        GP[rng.gen_range(0..GP.len())]
    }
}

fn reg_or_imm(rng: &mut StdRng, shift: bool) -> Operand {
    if rng.gen_bool(0.5) {
        Operand::Reg(reg(rng, true))
    } else if shift {
        Operand::Imm(rng.gen_range(0..32))
    } else {
        Operand::Imm(interesting_u32(rng))
    }
}

fn mem(rng: &mut StdRng, width: Width) -> MemOperand {
    let index = rng.gen_bool(0.3).then(|| Index {
        reg: reg(rng, false),
        shift: rng.gen_range(0..4),
    });
    let writeback = if index.is_some() {
        Writeback::None
    } else {
        [Writeback::None, Writeback::Pre, Writeback::Post][rng.gen_range(0..3)]
    };
    MemOperand {
        base: reg(rng, true),
        index,
        disp: rng.gen_range(-64..64) * width.bytes() as i32,
        width,
        writeback,
    }
}

fn reg_list(rng: &mut StdRng) -> RegList {
    loop {
        let mask: u16 = rng.gen_range(1..=0xffff);
        if let Some(l) = RegList::from_mask(mask) {
            return l;
        }
    }
}

fn try_operands(rng: &mut StdRng, class: Class) -> Vec<Operand> {
    use Operand::*;
    match class {
        Class::MOV | Class::MVN => vec![Reg(reg(rng, true)), reg_or_imm(rng, false)],
        c if c.is_alu() => {
            let d = Reg(reg(rng, false));
            let op2 = if c == Class::MUL {
                Reg(reg(rng, true))
            } else {
                reg_or_imm(rng, c.is_shift())
            };
            if rng.gen_bool(0.7) {
                vec![d, Reg(reg(rng, true)), op2]
            } else {
                vec![d, op2]
            }
        }
        c if c.is_compare() => vec![Reg(reg(rng, true)), reg_or_imm(rng, false)],
        c if c.is_load() || c.is_store() => {
            vec![Reg(reg(rng, true)), Mem(mem(rng, c.mem_width().expect("width")))]
        }
        Class::LDM | Class::STM => {
            let wb = if rng.gen_bool(0.5) {
                Writeback::Post
            } else {
                Writeback::None
            };
            let mut m = MemOperand::offset(reg(rng, false), 0, Width::Word);
            m.writeback = wb;
            vec![Mem(m), List(reg_list(rng))]
        }
        Class::PUSH | Class::POP => vec![List(reg_list(rng))],
        Class::B | Class::BL => vec![Imm(rng.gen::<u32>() & !3)],
        Class::BX | Class::BLX => vec![Reg(reg(rng, false))],
        Class::NOP => vec![],
        other => unreachable!("{other:?}"),
    }
}

pub fn random_instr(rng: &mut StdRng, class: Class, address: u32) -> DecodedInstr {
    loop {
        let cond = if rng.gen_bool(0.3) {
            CONDS[rng.gen_range(0..CONDS.len())]
        } else {
            Condition::Al
        };
        let sets_flags = class.may_set_flags() && rng.gen_bool(0.4);
        let ops = try_operands(rng, class);
        if let Ok(i) = DecodedInstr::new(address, class, cond, sets_flags, ops) {
            return i;
        }
    }
}

// ---- random footprints ----

pub fn random_footprint(rng: &mut StdRng) -> Footprint {
    let image: String = (0..64)
        .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
        .collect();
    let mut fp = Footprint::new(image, rng.gen::<u32>() & !3);
    let start: u64 = if rng.gen_bool(0.5) {
        0
    } else {
        rng.gen_range(0..1_000_000)
    };
    let n = rng.gen_range(1..60);
    for k in 0..n {
        let pc = rng.gen::<u32>() & !3;
        let index = start + k;
        fp.actions.push(ActionEvent { index, pc });
        let last = k + 1 == n;
        for _ in 0..rng.gen_range(0..3) {
            if last {
                break;
            }
            let width = [Width::Byte, Width::Half, Width::Word][rng.gen_range(0..3)];
            fp.data.push(DataEvent {
                index,
                pc,
                kind: if rng.gen() { AccessKind::Read } else { AccessKind::Write },
                addr: rng.gen(),
                width,
                value: interesting_u32(rng) & width.mask(),
            });
        }
    }
    if rng.gen_bool(0.8) {
        let last = *fp.actions.last().unwrap();
        let reason = [
            CrashReason::InvalidMemoryRead,
            CrashReason::InvalidMemoryWrite,
            CrashReason::InvalidInstructionExecution,
        ][rng.gen_range(0..3)];
        let culprit = (!reason.is_memory()).then(|| match rng.gen_range(0..3) {
            0 => Culprit::ExplicitPop { stack_addr: rng.gen() },
            1 => Culprit::ImplicitRegister(GP[rng.gen_range(0..GP.len())]),
            _ => Culprit::SequentialOverrun,
        });
        fp.crash = Some(CrashDescriptor {
            reason,
            index: last.index,
            pc: last.pc,
            fault: rng.gen(),
            culprit,
        });
    }
    fp
}
