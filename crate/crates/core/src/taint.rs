//! Backward taint from the crash sink over a recovered chain.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::event_log::{CrashDescriptor, CrashReason, Culprit};
use crate::isa::{Class, Origin, Register};
use crate::reverse_exec::{NodeId, NodeKind, NodeLoc, UseDefChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SinkLoc {
    Reg(Register),
    Mem(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaintSink {
    pub trace_index: u64,
    pub locations: Vec<SinkLoc>,
    /// The use nodes standing for `locations`.
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("crash at trace index {0} lies outside the analyzed window")]
    OutsideWindow(u64),
    #[error("unsupported crash shape: {0}")]
    UnsupportedCrashShape(String),
}

fn is_control_transfer(c: &UseDefChain, inst: u32) -> bool {
    let i = c.instr(inst);
    i.class.is_branch() || i.writes_pc_from_data() || (i.class == Class::MOV && i.dest() == Some(Register::PC))
}

pub fn identify_sink(crash: &CrashDescriptor, chain: &UseDefChain) -> Result<TaintSink, SinkError> {
    let inst = chain
        .position(crash.index)
        .ok_or(SinkError::OutsideWindow(crash.index))?;
    let ins = &chain.instances[inst as usize];
    let shape = |msg: &str| SinkError::UnsupportedCrashShape(format!("{msg} at 0x{:x}", ins.pc));
    let reg_use = |r: Register| ins.uses().find(|&id| chain.node(id).loc == NodeLoc::Reg(r));
    let mut nodes = Vec::new();
    let mut locations = Vec::new();
    let mut trace_index = crash.index;
    match (crash.reason, crash.culprit) {
        (CrashReason::InvalidMemoryRead | CrashReason::InvalidMemoryWrite, _) => {
            for id in ins.uses() {
                let n = chain.node(id);
                if matches!(n.origin, Origin::BaseRegister | Origin::IndexRegister) {
                    if let Some(r) = n.reg() {
                        nodes.push(id);
                        locations.push(SinkLoc::Reg(r));
                    }
                }
            }
            if nodes.is_empty() {
                return Err(shape("memory crash without a memory operand"));
            }
        }
        (_, Some(Culprit::ExplicitPop { stack_addr })) => {
            let id = ins
                .uses()
                .find(|&id| chain.node(id).is_mem() && chain.addr(id) == Some(stack_addr))
                .ok_or_else(|| shape("no load from the culprit stack slot"))?;
            nodes.push(id);
            locations.push(SinkLoc::Mem(stack_addr));
        }
        (_, Some(Culprit::ImplicitRegister(r))) => {
            let id = reg_use(r).ok_or_else(|| shape("culprit register not read"))?;
            nodes.push(id);
            locations.push(SinkLoc::Reg(r));
        }
        (_, Some(Culprit::SequentialOverrun)) => {
            let found = (0..=inst).rev().find_map(|k| {
                if !is_control_transfer(chain, k) {
                    return None;
                }
                let ins = &chain.instances[k as usize];
                let regs: Vec<NodeId> = ins
                    .uses()
                    .filter(|&id| matches!(chain.node(id).reg(), Some(r) if r != Register::APSR))
                    .collect();
                (!regs.is_empty()).then_some((ins.trace_index, regs))
            });
            let (at, regs) = found.ok_or_else(|| shape("no register-driven control transfer"))?;
            trace_index = at;
            for id in regs {
                locations.push(SinkLoc::Reg(chain.node(id).reg().expect("register")));
                nodes.push(id);
            }
        }
        (CrashReason::InvalidInstructionExecution, None) => {
            return Err(shape("execution crash without culprit"));
        }
    }
    Ok(TaintSink {
        trace_index,
        locations,
        nodes,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintResult {
    /// `(trace_index, pc)`, ascending.
    pub occurrences: Vec<(u64, u32)>,
    pub addresses: BTreeSet<u32>,
    /// Memory defines whose value was reached from the sink.
    pub history_writes: Vec<(u64, u32)>,
    pub visited: usize,
    pub unresolved: usize,
    /// Uses that reached the start of the window without a define.
    pub live_in: usize,
}

/// Backward worklist propagation. Each popped use taints its own instance
/// and the instance of every define it reads from; all uses of those
/// defining instances join the worklist. Flag edges are not followed.
pub fn propagate(chain: &UseDefChain, sink: &TaintSink) -> TaintResult {
    let mut tainted = vec![false; chain.instances.len()];
    let mut hw = vec![false; chain.instances.len()];
    let mut seen = vec![false; chain.nodes.len()];
    let mut stack: Vec<NodeId> = Vec::new();
    for &id in &sink.nodes {
        if !seen[id as usize] {
            seen[id as usize] = true;
            stack.push(id);
        }
    }
    let mut res = TaintResult::default();
    while let Some(h) = stack.pop() {
        res.visited += 1;
        let node = chain.node(h);
        tainted[node.inst as usize] = true;
        if chain.is_unresolved(h) {
            res.unresolved += 1;
            continue;
        }
        let defs = chain.covering_defines(h);
        if defs.is_empty() {
            res.live_in += 1;
        }
        for &d in defs {
            let dn = chain.node(d);
            debug_assert_eq!(dn.kind, NodeKind::Define);
            let di = dn.inst as usize;
            if dn.is_mem() {
                hw[di] = true;
            }
            tainted[di] = true;
            for u in chain.instances[di].uses() {
                if chain.node(u).reg() == Some(Register::APSR) || seen[u as usize] {
                    continue;
                }
                seen[u as usize] = true;
                stack.push(u);
            }
        }
    }
    for (k, ins) in chain.instances.iter().enumerate() {
        if tainted[k] {
            res.occurrences.push((ins.trace_index, ins.pc));
            res.addresses.insert(ins.pc);
            if hw[k] {
                res.history_writes.push((ins.trace_index, ins.pc));
            }
        }
    }
    res
}
