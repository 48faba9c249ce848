//! Use-define chains over a footprint and backward value recovery.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::event_log::{CrashReason, Culprit, Footprint};
use crate::isa::effects::{effects_when, Execution};
use crate::isa::invert::{solve_with_defines, Frame, Slot};
use crate::isa::{AccessKind, DecodedInstr, Image, Location, MemSlot, Origin, Register};

pub type NodeId = u32;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    WithEvents,
    NoEvents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Use,
    Define,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeLoc {
    Reg(Register),
    /// The `k`-th memory access of the instance.
    Mem {
        slot: MemSlot,
        k: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UdNode {
    pub inst: u32,
    pub kind: NodeKind,
    pub loc: NodeLoc,
    pub origin: Origin,
}

impl UdNode {
    pub fn reg(&self) -> Option<Register> {
        match self.loc {
            NodeLoc::Reg(r) => Some(r),
            NodeLoc::Mem { .. } => None,
        }
    }

    pub fn is_mem(&self) -> bool {
        matches!(self.loc, NodeLoc::Mem { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub trace_index: u64,
    pub pc: u32,
    instr: u32,
    first: u32,
    n_uses: u32,
    n_nodes: u32,
    pub executed: Option<bool>,
    /// False for a crash site whose faulting access never completed.
    pub complete: bool,
}

impl Instance {
    pub fn nodes(&self) -> Range<NodeId> {
        self.first..self.first + self.n_nodes
    }

    pub fn uses(&self) -> Range<NodeId> {
        self.first..self.first + self.n_uses
    }

    pub fn defines(&self) -> Range<NodeId> {
        self.first + self.n_uses..self.first + self.n_nodes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("footprint has no actions")]
    NoActions,
    #[error("no instruction at 0x{pc:x}")]
    MissingInstruction { pc: u32 },
    #[error("trace index {index}: {got} data events, expected {expected}")]
    EventArityMismatch { index: u64, got: usize, expected: usize },
    #[error("inconsistent evidence at node {node} (trace index {index}): known 0x{known:x}, deduced 0x{deduced:x}")]
    InconsistentEvidence {
        node: NodeId,
        index: u64,
        known: u32,
        deduced: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("memory use {0} has no resolvable address")]
pub struct UnresolvedMemory(pub NodeId);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryStats {
    /// Outer passes: worklist runs separated by memory re-resolution.
    pub passes: usize,
    pub solves: usize,
    pub known_values: usize,
    pub known_addrs: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone)]
pub struct UseDefChain {
    instrs: Vec<DecodedInstr>,
    defmask: Vec<u32>,
    pub instances: Vec<Instance>,
    pub nodes: Vec<UdNode>,
    /// Value cell per node; register uses share the cell of their define.
    cell: Vec<u32>,
    vals: Vec<Option<u32>>,
    /// Mem node owning a cell, if any.
    cell_node: Vec<u32>,
    addrs: Vec<Option<u32>>,
    reach: Vec<u32>,
    cover: Vec<Range<u32>>,
    cover_pool: Vec<u32>,
    /// Single define fully containing a memory use, for value transfer.
    mem_src: Vec<u32>,
    unresolved: Vec<bool>,
    cell_insts_off: Vec<u32>,
    cell_insts: Vec<u32>,
    seeds: Vec<(u32, u32)>,
    seeded_addrs: Vec<(NodeId, u32)>,
    events: Vec<(NodeId, u32, u32)>,
    mode: Mode,
    stats: RecoveryStats,
}

/// Decides whether a conditional instance ran from what the trace shows.
fn executedness(instr: &DecodedInstr, next_pc: Option<u32>, n_events: usize) -> Execution {
    if !instr.is_conditional() {
        return Execution::Taken;
    }
    if instr.access_count() > 0 {
        return if n_events > 0 {
            Execution::Taken
        } else {
            Execution::Skipped
        };
    }
    let Some(next) = next_pc else { return Execution::Unknown };
    let seq = instr.next_address();
    match instr.branch_target() {
        Some(t) if t != seq => {
            if next == t {
                Execution::Taken
            } else {
                Execution::Skipped
            }
        }
        _ if instr.class.is_branch() && next != seq => Execution::Taken,
        _ => Execution::Unknown,
    }
}

/// Builds the chain for `fp` against `image`, with memory nodes bound to the
/// footprint's data events.
pub fn build_chain(fp: &Footprint, image: &Image) -> Result<UseDefChain, ChainError> {
    if fp.actions.is_empty() {
        return Err(ChainError::NoActions);
    }
    let crash = fp.crash;
    let n = fp.actions.len();
    let mut instrs = Vec::new();
    let mut defmask = Vec::new();
    let mut by_pc: HashMap<u32, u32> = HashMap::new();
    let mut instances = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n * 5);
    let mut events = Vec::new();
    let mut seeds = Vec::new();
    let mut seeded_addrs = Vec::new();
    let mut data = fp.data.as_slice();

    for (k, a) in fp.actions.iter().enumerate() {
        let ii = match by_pc.get(&a.pc) {
            Some(&ii) => ii,
            None => {
                let instr = image
                    .instr_at(a.pc)
                    .ok_or(ChainError::MissingInstruction { pc: a.pc })?;
                instrs.push(instr.clone());
                defmask.push(effects_when(instr, Execution::Taken).defined_regs_mask());
                let ii = instrs.len() as u32 - 1;
                by_pc.insert(a.pc, ii);
                ii
            }
        };
        let instr = &instrs[ii as usize];
        let cut = data.partition_point(|d| d.index == a.index);
        let (evs, rest) = data.split_at(cut);
        data = rest;

        let last = k + 1 == n;
        let crash_here = crash.filter(|c| last && c.index == a.index);
        let incomplete = crash_here.is_some_and(|c| c.reason.is_memory());
        let next_pc = if last {
            crash_here
                .filter(|c| c.reason == CrashReason::InvalidInstructionExecution)
                .map(|c| c.fault)
        } else {
            Some(fp.actions[k + 1].pc)
        };
        let exec = if incomplete {
            Execution::Taken
        } else {
            executedness(instr, next_pc, evs.len())
        };
        let eff = effects_when(instr, exec);
        let expected = if incomplete { 0 } else { eff.mem_slots().count() };
        if evs.len() != expected {
            return Err(ChainError::EventArityMismatch {
                index: a.index,
                got: evs.len(),
                expected,
            });
        }

        let first = nodes.len() as u32;
        let mut mem_k = 0u8;
        let mut push = |kind, item: &crate::isa::EffectItem, nodes: &mut Vec<UdNode>| {
            let loc = match item.loc {
                Location::Reg(r) => NodeLoc::Reg(r),
                Location::Mem(slot) => {
                    let l = NodeLoc::Mem { slot, k: mem_k };
                    mem_k += 1;
                    l
                }
            };
            nodes.push(UdNode {
                inst: k as u32,
                kind,
                loc,
                origin: item.origin,
            });
        };
        for item in &eff.uses {
            push(NodeKind::Use, item, &mut nodes);
        }
        let n_uses = nodes.len() as u32 - first;
        for item in &eff.defines {
            if incomplete && !item.loc.is_mem() {
                continue;
            }
            push(NodeKind::Define, item, &mut nodes);
        }
        let n_nodes = nodes.len() as u32 - first;

        for id in first..first + n_nodes {
            let node = &nodes[id as usize];
            match node.loc {
                NodeLoc::Mem { k: mk, .. } => {
                    if let Some(ev) = evs.get(mk as usize) {
                        let is_write = ev.kind == AccessKind::Write;
                        if is_write != (node.kind == NodeKind::Define) {
                            return Err(ChainError::EventArityMismatch {
                                index: a.index,
                                got: evs.len(),
                                expected,
                            });
                        }
                        events.push((id, ev.addr, ev.value));
                    }
                }
                NodeLoc::Reg(Register::PC) if node.kind == NodeKind::Define => {
                    if let Some(pc) = next_pc {
                        seeds.push((id, pc));
                    }
                }
                _ => {}
            }
        }
        if let Some(c) = crash_here {
            let mems: Vec<NodeId> = (first..first + n_nodes)
                .filter(|&id| nodes[id as usize].is_mem())
                .collect();
            match (c.reason, c.culprit) {
                (r, _) if r.is_memory() && mems.len() == 1 => seeded_addrs.push((mems[0], c.fault)),
                (_, Some(Culprit::ExplicitPop { stack_addr })) => {
                    if let Some(&m) = mems.last() {
                        seeded_addrs.push((m, stack_addr));
                        seeds.push((m, c.fault));
                    }
                }
                _ => {}
            }
        }
        instances.push(Instance {
            trace_index: a.index,
            pc: a.pc,
            instr: ii,
            first,
            n_uses,
            n_nodes,
            executed: match exec {
                Execution::Taken => Some(true),
                Execution::Skipped => Some(false),
                Execution::Unknown => None,
            },
            complete: !incomplete,
        });
    }

    // Register cells: 17 live-ins, then one per register define, then one per
    // memory node.
    let mut cell = vec![NONE; nodes.len()];
    let mut cell_node = vec![NONE; Register::COUNT];
    let mut reach = vec![NONE; nodes.len()];
    let mut current: [u32; Register::COUNT] = std::array::from_fn(|r| r as u32);
    let mut last_def = [NONE; Register::COUNT];
    for ins in &instances {
        for id in ins.nodes() {
            let node = nodes[id as usize];
            match (node.kind, node.loc) {
                (NodeKind::Use, NodeLoc::Reg(r)) => {
                    cell[id as usize] = current[r.index()];
                    reach[id as usize] = last_def[r.index()];
                }
                (NodeKind::Define, NodeLoc::Reg(r)) => {
                    let c = cell_node.len() as u32;
                    cell_node.push(NONE);
                    cell[id as usize] = c;
                    current[r.index()] = c;
                    last_def[r.index()] = id;
                }
                (_, NodeLoc::Mem { .. }) => {
                    let c = cell_node.len() as u32;
                    cell_node.push(id);
                    cell[id as usize] = c;
                }
            }
        }
    }
    let n_cells = cell_node.len();

    let mut pairs: Vec<(u32, u32)> = nodes.iter().enumerate().map(|(id, nd)| (cell[id], nd.inst)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut cell_insts_off = vec![0u32; n_cells + 1];
    for &(c, _) in &pairs {
        cell_insts_off[c as usize + 1] += 1;
    }
    for c in 0..n_cells {
        cell_insts_off[c + 1] += cell_insts_off[c];
    }
    let cell_insts = pairs.into_iter().map(|(_, i)| i).collect();

    let n_nodes = nodes.len();
    let mut chain = UseDefChain {
        instrs,
        defmask,
        instances,
        nodes,
        cell,
        vals: vec![None; n_cells],
        cell_node,
        addrs: vec![None; n_nodes],
        reach,
        cover: vec![0..0; n_nodes],
        cover_pool: Vec::new(),
        mem_src: vec![NONE; n_nodes],
        unresolved: vec![false; n_nodes],
        cell_insts_off,
        cell_insts,
        seeds,
        seeded_addrs,
        events,
        mode: Mode::WithEvents,
        stats: RecoveryStats::default(),
    };
    chain.reset(Mode::WithEvents)?;
    chain.resolve_memory();
    Ok(chain)
}

impl UseDefChain {
    pub fn instr(&self, inst: u32) -> &DecodedInstr {
        &self.instrs[self.instances[inst as usize].instr as usize]
    }

    pub fn node(&self, id: NodeId) -> &UdNode {
        &self.nodes[id as usize]
    }

    pub fn value(&self, id: NodeId) -> Option<u32> {
        self.vals[self.cell[id as usize] as usize]
    }

    pub fn addr(&self, id: NodeId) -> Option<u32> {
        self.addrs[id as usize]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stats(&self) -> RecoveryStats {
        self.stats
    }

    pub fn is_unresolved(&self, id: NodeId) -> bool {
        self.unresolved[id as usize]
    }

    pub fn unresolved_count(&self) -> usize {
        self.unresolved.iter().filter(|&&u| u).count()
    }

    /// Instance position of a trace index, if inside the window.
    pub fn position(&self, trace_index: u64) -> Option<u32> {
        let first = self.instances.first()?.trace_index;
        let k = trace_index.checked_sub(first)?;
        (k < self.instances.len() as u64).then_some(k as u32)
    }

    pub fn known_values(&self) -> usize {
        (0..self.nodes.len() as u32)
            .filter(|&id| self.value(id).is_some())
            .count()
    }

    pub fn known_addrs(&self) -> usize {
        self.addrs.iter().filter(|a| a.is_some()).count()
    }

    /// Every define that wrote a byte a memory use reads, most recent last.
    /// Registers have at most one.
    pub fn covering_defines(&self, id: NodeId) -> &[NodeId] {
        let r = &self.cover[id as usize];
        if self.node(id).is_mem() {
            &self.cover_pool[r.start as usize..r.end as usize]
        } else {
            let d = &self.reach[id as usize];
            if *d == NONE {
                &[]
            } else {
                std::slice::from_ref(d)
            }
        }
    }

    fn reset(&mut self, mode: Mode) -> Result<(), ChainError> {
        self.mode = mode;
        self.vals.iter_mut().for_each(|v| *v = None);
        self.addrs.iter_mut().for_each(|a| *a = None);
        self.stats = RecoveryStats::default();
        for k in 0..self.seeded_addrs.len() {
            let (id, a) = self.seeded_addrs[k];
            self.addrs[id as usize] = Some(a);
        }
        let mut dirty = Vec::new();
        for k in 0..self.seeds.len() {
            let (id, v) = self.seeds[k];
            self.set_value(id, v, &mut dirty)?;
        }
        if mode == Mode::WithEvents {
            for k in 0..self.events.len() {
                let (id, a, v) = self.events[k];
                self.addrs[id as usize] = Some(a);
                self.set_value(id, v, &mut dirty)?;
            }
        }
        Ok(())
    }

    fn conflict(&self, id: NodeId, known: u32, deduced: u32) -> ChainError {
        ChainError::InconsistentEvidence {
            node: id,
            index: self.instances[self.nodes[id as usize].inst as usize].trace_index,
            known,
            deduced,
        }
    }

    fn set_value(&mut self, id: NodeId, v: u32, dirty: &mut Vec<u32>) -> Result<bool, ChainError> {
        let c = self.cell[id as usize] as usize;
        match self.vals[c] {
            Some(k) if k == v => Ok(false),
            Some(k) => Err(self.conflict(id, k, v)),
            None => {
                self.vals[c] = Some(v);
                dirty.push(c as u32);
                Ok(true)
            }
        }
    }

    fn set_addr(&mut self, id: NodeId, a: u32) -> Result<bool, ChainError> {
        match self.addrs[id as usize] {
            Some(k) if k == a => Ok(false),
            Some(k) => Err(self.conflict(id, k, a)),
            None => {
                self.addrs[id as usize] = Some(a);
                Ok(true)
            }
        }
    }

    /// Recomputes memory reaching definitions from the currently known
    /// addresses. A use stays unresolved while its address is unknown or a
    /// define of unknown address could have overwritten any of its bytes.
    fn resolve_memory(&mut self) {
        let mut writer: HashMap<u32, u32> = HashMap::new();
        let mut last_unknown = NONE;
        self.cover_pool.clear();
        let mut bytes: Vec<u32> = Vec::with_capacity(4);
        for i in 0..self.instances.len() {
            let ins = &self.instances[i];
            let (uses, defs, complete) = (ins.uses(), ins.defines(), ins.complete);
            for id in uses {
                let NodeLoc::Mem { slot, .. } = self.nodes[id as usize].loc else {
                    continue;
                };
                let u = id as usize;
                self.reach[u] = NONE;
                self.mem_src[u] = NONE;
                self.cover[u] = 0..0;
                let Some(a) = self.addrs[u] else {
                    self.unresolved[u] = true;
                    continue;
                };
                bytes.clear();
                let mut oldest = NONE;
                let mut all_written = true;
                for b in 0..slot.width.bytes() {
                    match writer.get(&a.wrapping_add(b)) {
                        Some(&w) => {
                            oldest = if oldest == NONE { w } else { oldest.min(w) };
                            bytes.push(w);
                        }
                        None => all_written = false,
                    }
                }
                if last_unknown != NONE && (!all_written || last_unknown > oldest) {
                    self.unresolved[u] = true;
                    continue;
                }
                self.unresolved[u] = false;
                let single = all_written && bytes.windows(2).all(|w| w[0] == w[1]);
                bytes.sort_unstable();
                bytes.dedup();
                let start = self.cover_pool.len() as u32;
                self.cover_pool.extend_from_slice(&bytes);
                self.cover[u] = start..self.cover_pool.len() as u32;
                self.reach[u] = bytes.last().copied().unwrap_or(NONE);
                if single {
                    self.mem_src[u] = bytes[0];
                }
            }
            if !complete {
                continue;
            }
            for id in defs {
                let NodeLoc::Mem { slot, .. } = self.nodes[id as usize].loc else {
                    continue;
                };
                match self.addrs[id as usize] {
                    Some(a) => {
                        for b in 0..slot.width.bytes() {
                            writer.insert(a.wrapping_add(b), id);
                        }
                    }
                    None => last_unknown = id,
                }
            }
        }
    }

    /// Pushes values across memory def-use pairs linked by full containment.
    fn transfer_memory(&mut self, dirty: &mut Vec<u32>) -> Result<(), ChainError> {
        for u in 0..self.nodes.len() {
            let d = self.mem_src[u];
            if d != NONE {
                self.transfer_pair(u as u32, d, dirty)?;
            }
        }
        Ok(())
    }

    fn transfer_pair(&mut self, u: NodeId, d: NodeId, dirty: &mut Vec<u32>) -> Result<(), ChainError> {
        let (Some(ua), Some(da)) = (self.addr(u), self.addr(d)) else {
            return Ok(());
        };
        let (NodeLoc::Mem { slot: us, .. }, NodeLoc::Mem { slot: ds, .. }) = (self.node(u).loc, self.node(d).loc)
        else {
            return Ok(());
        };
        let shift = 8 * ua.wrapping_sub(da);
        if let Some(dv) = self.value(d) {
            self.set_value(u, (dv >> shift) & us.width.mask(), dirty)?;
        }
        if ua == da && us.width == ds.width {
            if let Some(uv) = self.value(u) {
                self.set_value(d, uv, dirty)?;
            }
        }
        Ok(())
    }

    fn solve_instance(&mut self, i: u32, frame: &mut Frame, dirty: &mut Vec<u32>) -> Result<bool, ChainError> {
        let ins = &self.instances[i as usize];
        let instr = &self.instrs[ins.instr as usize];
        let mask = self.defmask[ins.instr as usize];
        let range = ins.nodes();
        let complete = ins.complete;
        frame.reset(instr);
        if instr.is_conditional() {
            frame.executed = ins.executed;
        }
        for id in range.clone() {
            let node = &self.nodes[id as usize];
            let v = self.value(id);
            match (node.kind, node.loc) {
                (NodeKind::Use, NodeLoc::Reg(r)) => {
                    if r != Register::PC {
                        frame.pre[r.index()] = v;
                    }
                }
                (NodeKind::Define, NodeLoc::Reg(r)) => frame.post[r.index()] = v,
                (_, NodeLoc::Mem { k, .. }) => {
                    frame.mem[k as usize].addr = self.addrs[id as usize];
                    frame.mem[k as usize].value = v;
                }
            }
        }
        self.stats.solves += 1;
        let changed = solve_with_defines(instr, frame, mask).map_err(|e| {
            let id = range
                .clone()
                .find(|&id| {
                    let n = &self.nodes[id as usize];
                    match (e.slot, n.kind, n.loc) {
                        (Slot::Pre(r), NodeKind::Use, NodeLoc::Reg(x)) => r == x,
                        (Slot::Post(r), NodeKind::Define, NodeLoc::Reg(x)) => r == x,
                        (Slot::Addr(k) | Slot::Value(k), _, NodeLoc::Mem { k: x, .. }) => k == x as usize,
                        _ => false,
                    }
                })
                .unwrap_or(range.start);
            self.conflict(id, e.known, e.deduced)
        })?;
        if !changed {
            return Ok(false);
        }
        let mut addr_news = false;
        if self.instances[i as usize].executed.is_none() {
            self.instances[i as usize].executed = frame.executed;
        }
        for id in range {
            let node = self.nodes[id as usize];
            let v = match (node.kind, node.loc) {
                (NodeKind::Use, NodeLoc::Reg(r)) => frame.pre[r.index()],
                (NodeKind::Define, NodeLoc::Reg(r)) => frame.post[r.index()],
                (kind, NodeLoc::Mem { k, .. }) => {
                    if let Some(a) = frame.mem[k as usize].addr {
                        addr_news |= self.set_addr(id, a)?;
                    }
                    if !complete && kind == NodeKind::Define {
                        None
                    } else {
                        frame.mem[k as usize].value
                    }
                }
            };
            if let Some(v) = v {
                self.set_value(id, v, dirty)?;
            }
        }
        Ok(addr_news)
    }

    /// Runs the recovery fixpoint in `mode`, starting from the footprint's
    /// evidence alone. Calling it again recomputes from scratch.
    pub fn recover(&mut self, mode: Mode) -> Result<RecoveryStats, ChainError> {
        let mut dirty = Vec::new();
        self.reset(mode)?;
        self.resolve_memory();
        self.transfer_memory(&mut dirty)?;
        let n = self.instances.len();
        let mut frame = Frame::new(&self.instrs[self.instances[0].instr as usize]);
        let mut queued = vec![true; n];
        let mut queue: Vec<u32> = (0..n as u32).collect();
        // Memory users waiting on a define's value.
        let mut dependents: HashMap<u32, Vec<u32>> = HashMap::new();
        let rebuild_deps = |chain: &Self, deps: &mut HashMap<u32, Vec<u32>>| {
            deps.clear();
            for u in 0..chain.nodes.len() {
                let d = chain.mem_src[u];
                if d != NONE {
                    deps.entry(d).or_default().push(u as u32);
                    deps.entry(u as u32).or_default().push(d);
                }
            }
        };
        rebuild_deps(self, &mut dependents);
        loop {
            self.stats.passes += 1;
            let mut addr_news = false;
            loop {
                // Drain value changes into the queue first.
                while let Some(c) = dirty.pop() {
                    let (lo, hi) = (
                        self.cell_insts_off[c as usize] as usize,
                        self.cell_insts_off[c as usize + 1] as usize,
                    );
                    for k in lo..hi {
                        let inst = self.cell_insts[k];
                        if !queued[inst as usize] {
                            queued[inst as usize] = true;
                            queue.push(inst);
                        }
                    }
                    let owner = self.cell_node[c as usize];
                    if owner != NONE {
                        if let Some(peers) = dependents.get(&owner).cloned() {
                            for p in peers {
                                let (u, d) = if self.mem_src[p as usize] == owner {
                                    (p, owner)
                                } else {
                                    (owner, p)
                                };
                                self.transfer_pair(u, d, &mut dirty)?;
                            }
                        }
                    }
                }
                let Some(i) = queue.pop() else { break };
                queued[i as usize] = false;
                addr_news |= self.solve_instance(i, &mut frame, &mut dirty)?;
            }
            if self.mode == Mode::WithEvents || !addr_news {
                break;
            }
            // New addresses may resolve more memory uses.
            let before = self.mem_src.iter().filter(|&&d| d != NONE).count();
            let unres_before = self.unresolved_count();
            self.resolve_memory();
            rebuild_deps(self, &mut dependents);
            self.transfer_memory(&mut dirty)?;
            let after = self.mem_src.iter().filter(|&&d| d != NONE).count();
            if dirty.is_empty() && after == before && self.unresolved_count() == unres_before {
                break;
            }
            for (k, q) in queued.iter_mut().enumerate() {
                if !*q {
                    *q = true;
                    queue.push(k as u32);
                }
            }
        }
        self.stats.known_values = self.known_values();
        self.stats.known_addrs = self.known_addrs();
        self.stats.unresolved = self.unresolved_count();
        Ok(self.stats)
    }

    /// Debug dump, one JSON object per node.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let ins = &self.instances[n.inst as usize];
            let kind = match n.kind {
                NodeKind::Use => "use",
                NodeKind::Define => "def",
            };
            let loc = match n.loc {
                NodeLoc::Reg(r) => r.to_string(),
                NodeLoc::Mem { slot, .. } => match self.addrs[id] {
                    Some(a) => format!("mem(0x{a:x},w{})", slot.width.bytes()),
                    None => format!("mem(?,w{})", slot.width.bytes()),
                },
            };
            let val = match self.value(id as u32) {
                Some(v) => format!("\"0x{v:x}\""),
                None => "null".into(),
            };
            let reach = match self.reach[id] {
                NONE => "null".to_string(),
                d => d.to_string(),
            };
            let origin = match n.origin {
                Origin::ExplicitOperand => "explicit_operand",
                Origin::BaseRegister => "base_register",
                Origin::IndexRegister => "index_register",
                Origin::Implicit => "implicit",
            };
            let _ = writeln!(
                out,
                r#"{{"id":{id},"i":{},"pc":"0x{:x}","kind":"{kind}","loc":"{loc}","val":{val},"origin":"{origin}","reach":{reach}}}"#,
                ins.trace_index, ins.pc
            );
        }
        out
    }
}

/// Most recent prior define of the use's location, or `None` for live-in.
pub fn reaching_define(chain: &UseDefChain, use_node: NodeId) -> Result<Option<NodeId>, UnresolvedMemory> {
    if chain.is_unresolved(use_node) {
        return Err(UnresolvedMemory(use_node));
    }
    let d = chain.reach[use_node as usize];
    Ok((d != NONE).then_some(d))
}

/// Builds and recovers in one go.
pub fn analyze_chain(fp: &Footprint, image: &Image, mode: Mode) -> Result<UseDefChain, ChainError> {
    let mut chain = build_chain(fp, image)?;
    chain.recover(mode)?;
    Ok(chain)
}
