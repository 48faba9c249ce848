//! A small deterministic machine that runs an image against a byte stimulus
//! and records the footprint.

use serde::Deserialize;
use thiserror::Error;

use crate::event_log::{ActionEvent, CrashDescriptor, CrashReason, Culprit, DataEvent, Footprint};
use crate::isa::exec::{step_into, Touched};
use crate::isa::{
    AccessKind, Class, DecodedInstr, ExecError, Image, MachineState, MemoryAccess, MemoryBus, Operand, Register, Width,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::default();
        for c in s.chars() {
            let slot = match c {
                'r' => &mut p.read,
                'w' => &mut p.write,
                'x' => &mut p.exec,
                _ => return None,
            };
            if *slot {
                return None;
            }
            *slot = true;
        }
        Some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub base: u32,
    pub size: u32,
    pub perms: Perms,
    /// Byte every location holds before image data is loaded.
    pub fill: u8,
}

impl Region {
    fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr - self.base < self.size
    }

    fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    Addr(u32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMap {
    pub regions: Vec<Region>,
    /// Read-only MMIO window whose reads consume stimulus bytes.
    pub input_port: Option<(u32, u32)>,
    pub entry: Entry,
    pub initial_sp: u32,
    pub initial_lr: u32,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("memory map: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("memory map: bad number {0:?}")]
    BadNumber(String),
    #[error("memory map: bad permissions {0:?}")]
    BadPerms(String),
    #[error("memory map has no regions")]
    EmptyMap,
    #[error("regions {0} and {1} overlap")]
    Overlap(String, String),
    #[error("region {0} is empty or wraps the address space")]
    BadRegion(String),
    #[error("entry label {0:?} not found")]
    UnknownLabel(String),
    #[error("entry 0x{0:x} is not an instruction in executable memory")]
    UnmappedEntry(u32),
    #[error("image data at 0x{0:x} lies outside writable-at-load memory")]
    DataOutsideMap(u32),
    #[error("max_steps must be at least 1")]
    ZeroSteps,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Num {
    Int(u64),
    Text(String),
}

impl Num {
    fn get(&self) -> Result<u32, ConfigError> {
        match self {
            Num::Int(v) => u32::try_from(*v).map_err(|_| ConfigError::BadNumber(v.to_string())),
            Num::Text(s) => parse_u32(s).ok_or_else(|| ConfigError::BadNumber(s.clone())),
        }
    }
}

pub fn parse_u32(s: &str) -> Option<u32> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    name: String,
    base: Num,
    size: Num,
    perms: String,
    #[serde(default)]
    fill: Option<Num>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPort {
    base: Num,
    size: Num,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMap {
    entry: String,
    initial_sp: Num,
    #[serde(default)]
    initial_lr: Option<Num>,
    #[serde(default, rename = "region")]
    regions: Vec<RawRegion>,
    #[serde(default)]
    input_port: Option<RawPort>,
}

impl MemoryMap {
    pub fn from_toml(src: &str) -> Result<MemoryMap, ConfigError> {
        let raw: RawMap = toml::from_str(src)?;
        let mut regions = Vec::new();
        for r in raw.regions {
            let perms = Perms::parse(&r.perms).ok_or_else(|| ConfigError::BadPerms(r.perms.clone()))?;
            let fill = match r.fill {
                Some(n) => u8::try_from(n.get()?).map_err(|_| ConfigError::BadNumber("fill".into()))?,
                None => 0,
            };
            regions.push(Region {
                name: r.name,
                base: r.base.get()?,
                size: r.size.get()?,
                perms,
                fill,
            });
        }
        let entry = match parse_u32(&raw.entry) {
            Some(a) if raw.entry.trim().starts_with(|c: char| c.is_ascii_digit()) => Entry::Addr(a),
            _ => Entry::Label(raw.entry.trim().to_string()),
        };
        let map = MemoryMap {
            regions,
            input_port: match raw.input_port {
                Some(p) => Some((p.base.get()?, p.size.get()?)),
                None => None,
            },
            entry,
            initial_sp: raw.initial_sp.get()?,
            initial_lr: match raw.initial_lr {
                Some(n) => n.get()?,
                None => 0xffff_ffff,
            },
        };
        map.check()?;
        Ok(map)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.regions.is_empty() {
            return Err(ConfigError::EmptyMap);
        }
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for r in &self.regions {
            if r.size == 0 || r.end() > 1 << 32 {
                return Err(ConfigError::BadRegion(r.name.clone()));
            }
            spans.push((r.base as u64, r.end(), &r.name));
        }
        if let Some((b, s)) = self.input_port {
            if s == 0 || b as u64 + s as u64 > 1 << 32 {
                return Err(ConfigError::BadRegion("input_port".into()));
            }
            spans.push((b as u64, b as u64 + s as u64, "input_port"));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(ConfigError::Overlap(w[0].2.into(), w[1].2.into()));
            }
        }
        Ok(())
    }

    pub fn entry_address(&self, image: &Image) -> Result<u32, ConfigError> {
        match &self.entry {
            Entry::Addr(a) => Ok(*a),
            Entry::Label(l) => image.label(l).ok_or_else(|| ConfigError::UnknownLabel(l.clone())),
        }
    }
}

/// The machine's memory: mapped regions plus the input port.
#[derive(Debug, Clone)]
pub struct Bus<'s> {
    regions: Vec<(Region, Vec<u8>)>,
    port: Option<(u32, u32)>,
    stimulus: &'s [u8],
    cursor: usize,
    last: usize,
}

impl<'s> Bus<'s> {
    fn new(map: &MemoryMap, image: &Image, stimulus: &'s [u8]) -> Result<Bus<'s>, ConfigError> {
        let mut regions: Vec<(Region, Vec<u8>)> = map
            .regions
            .iter()
            .map(|r| (r.clone(), vec![r.fill; r.size as usize]))
            .collect();
        for (addr, bytes) in image.data_segments() {
            for (k, b) in bytes.iter().enumerate() {
                let a = addr.wrapping_add(k as u32);
                let (r, mem) = regions
                    .iter_mut()
                    .find(|(r, _)| r.contains(a))
                    .ok_or(ConfigError::DataOutsideMap(a))?;
                mem[(a - r.base) as usize] = *b;
            }
        }
        Ok(Bus {
            regions,
            port: map.input_port,
            stimulus,
            cursor: 0,
            last: 0,
        })
    }

    #[inline]
    fn region(&mut self, addr: u32) -> Option<usize> {
        if self.regions.get(self.last).is_some_and(|(r, _)| r.contains(addr)) {
            return Some(self.last);
        }
        let k = self.regions.iter().position(|(r, _)| r.contains(addr))?;
        self.last = k;
        Some(k)
    }

    fn region_ref(&self, addr: u32) -> Option<&(Region, Vec<u8>)> {
        self.regions.iter().find(|(r, _)| r.contains(addr))
    }

    fn in_port(&self, addr: u32) -> bool {
        self.port.is_some_and(|(b, s)| addr >= b && addr - b < s)
    }

    fn executable(&self, pc: u32) -> bool {
        pc.checked_add(3).is_some() && (0..4).all(|k| self.region_ref(pc + k).is_some_and(|(r, _)| r.perms.exec))
    }

    pub fn stimulus_consumed(&self) -> usize {
        self.cursor
    }
}

impl MemoryBus for Bus<'_> {
    fn can_access(&self, addr: u32, width: Width, kind: AccessKind) -> bool {
        (0..width.bytes()).all(|k| {
            let Some(a) = addr.checked_add(k) else { return false };
            if self.in_port(a) {
                return kind == AccessKind::Read;
            }
            self.region_ref(a).is_some_and(|(r, _)| match kind {
                AccessKind::Read => r.perms.read,
                AccessKind::Write => r.perms.write,
            })
        })
    }

    fn read(&mut self, addr: u32, width: Width) -> u32 {
        let mut v = 0u32;
        for k in 0..width.bytes() {
            let a = addr + k;
            let b = if self.in_port(a) {
                let b = self.stimulus.get(self.cursor).copied().unwrap_or(0);
                self.cursor += 1;
                b
            } else {
                let i = self.region(a).expect("checked");
                let (r, mem) = &self.regions[i];
                mem[(a - r.base) as usize]
            };
            v |= (b as u32) << (8 * k);
        }
        v
    }

    fn write(&mut self, addr: u32, width: Width, value: u32) {
        for k in 0..width.bytes() {
            let a = addr + k;
            let i = self.region(a).expect("checked");
            let (r, mem) = &mut self.regions[i];
            mem[(a - r.base) as usize] = (value >> (8 * k)) as u8;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Crashed(CrashDescriptor),
    Exited,
    StepLimit,
}

impl Outcome {
    pub fn crash(&self) -> Option<&CrashDescriptor> {
        match self {
            Outcome::Crashed(c) => Some(c),
            _ => None,
        }
    }
}

/// One executed (or faulting) instruction as seen by an [`Observer`].
pub struct Step<'a> {
    pub index: u64,
    pub instr: &'a DecodedInstr,
    pub pre: &'a MachineState,
    /// `None` when the instruction faulted.
    pub post: Option<&'a MachineState>,
    pub touched: Touched,
    pub accesses: &'a [MemoryAccess],
}

pub trait Observer {
    fn on_step(&mut self, step: &Step<'_>);
}

pub struct NullObserver;

impl Observer for NullObserver {
    #[inline]
    fn on_step(&mut self, _: &Step<'_>) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub index: u64,
    pub pc: u32,
    pub pre: MachineState,
    pub post: Option<MachineState>,
    pub touched: Touched,
    pub accesses: Vec<MemoryAccess>,
}

/// Full machine state around every step. Meant for checking analyses
/// against ground truth, not for production runs.
#[derive(Debug, Clone, Default)]
pub struct FullTrace {
    pub steps: Vec<StepRecord>,
}

impl Observer for FullTrace {
    fn on_step(&mut self, s: &Step<'_>) {
        self.steps.push(StepRecord {
            index: s.index,
            pc: s.instr.address,
            pre: *s.pre,
            post: s.post.copied(),
            touched: s.touched,
            accesses: s.accesses.to_vec(),
        });
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub footprint: Footprint,
    pub outcome: Outcome,
    pub final_state: MachineState,
    pub steps: u64,
}

/// A validated image and memory map, ready to run any number of stimuli.
pub struct Vm<'a> {
    image: &'a Image,
    map: &'a MemoryMap,
    entry: u32,
    image_id: String,
}

impl<'a> Vm<'a> {
    pub fn new(image: &'a Image, map: &'a MemoryMap) -> Result<Vm<'a>, ConfigError> {
        map.check()?;
        let entry = map.entry_address(image)?;
        let bus = Bus::new(map, image, &[])?;
        if image.instr_at(entry).is_none() || !bus.executable(entry) {
            return Err(ConfigError::UnmappedEntry(entry));
        }
        Ok(Vm {
            image,
            map,
            entry,
            image_id: image.id_hash(),
        })
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn run(&self, stimulus: &[u8], max_steps: u64) -> Result<RunResult, ConfigError> {
        self.run_observed(stimulus, max_steps, true, &mut NullObserver)
    }

    /// Runs until crash, halt or `max_steps` actions. With `record` off no
    /// events are kept and the returned footprint is empty apart from the
    /// crash record.
    pub fn run_observed(
        &self,
        stimulus: &[u8],
        max_steps: u64,
        record: bool,
        obs: &mut impl Observer,
    ) -> Result<RunResult, ConfigError> {
        if max_steps == 0 {
            return Err(ConfigError::ZeroSteps);
        }
        let mut bus = Bus::new(self.map, self.image, stimulus)?;
        let mut fp = Footprint::new(self.image_id.clone(), self.entry);
        let mut state = MachineState::default();
        state.set(Register::PC, self.entry);
        state.set(Register::SP, self.map.initial_sp);
        state.set(Register::LR, self.map.initial_lr);
        let mut accesses = Vec::with_capacity(16);
        let mut prev: Option<(&DecodedInstr, u64)> = None;
        let mut last_pc_load: Option<u32> = None;
        let mut index = 0u64;

        let outcome = loop {
            let pc = state.pc();
            let instr = match self.image.instr_at(pc) {
                Some(i) if bus.executable(pc) => i,
                _ => {
                    let (p, at) = prev.expect("entry validated");
                    break Outcome::Crashed(CrashDescriptor {
                        reason: CrashReason::InvalidInstructionExecution,
                        index: at,
                        pc: p.address,
                        fault: pc,
                        culprit: Some(culprit(p, last_pc_load)),
                    });
                }
            };
            if index == max_steps {
                break Outcome::StepLimit;
            }
            if record {
                fp.actions.push(ActionEvent { index, pc });
            }
            accesses.clear();
            let mut touched = Touched::default();
            match step_into(&state, instr, &mut bus, &mut accesses, &mut touched) {
                Ok(next) => {
                    obs.on_step(&Step {
                        index,
                        instr,
                        pre: &state,
                        post: Some(&next),
                        touched,
                        accesses: &accesses,
                    });
                    if record {
                        fp.data.extend(accesses.iter().map(|a| DataEvent {
                            index,
                            pc,
                            kind: a.kind,
                            addr: a.addr,
                            width: a.width,
                            value: a.value,
                        }));
                    }
                    last_pc_load = if instr.writes_pc_from_data() && next.pc() != instr.next_address() {
                        accesses.last().map(|a| a.addr)
                    } else {
                        None
                    };
                    let halted = instr.class == Class::B && next.pc() == pc;
                    state = next;
                    prev = Some((instr, index));
                    index += 1;
                    if halted {
                        break Outcome::Exited;
                    }
                }
                Err(e) => {
                    obs.on_step(&Step {
                        index,
                        instr,
                        pre: &state,
                        post: None,
                        touched,
                        accesses: &[],
                    });
                    let (reason, fault) = match e {
                        ExecError::UnmappedAccess { addr, kind, .. } => (
                            match kind {
                                AccessKind::Read => CrashReason::InvalidMemoryRead,
                                AccessKind::Write => CrashReason::InvalidMemoryWrite,
                            },
                            addr,
                        ),
                        ExecError::UndecodableFetch { pc } => (CrashReason::InvalidInstructionExecution, pc),
                    };
                    index += 1;
                    let culprit = (!reason.is_memory()).then(|| culprit(instr, None));
                    break Outcome::Crashed(CrashDescriptor {
                        reason,
                        index: index - 1,
                        pc,
                        fault,
                        culprit,
                    });
                }
            }
        };
        if let Outcome::Crashed(c) = outcome {
            fp.crash = Some(c);
        }
        Ok(RunResult {
            footprint: fp,
            outcome,
            final_state: state,
            steps: index,
        })
    }
}

fn culprit(instr: &DecodedInstr, pc_load: Option<u32>) -> Culprit {
    if let Some(addr) = pc_load {
        return Culprit::ExplicitPop { stack_addr: addr };
    }
    match (instr.class, instr.operands.as_slice()) {
        (Class::BX | Class::BLX, [Operand::Reg(r)]) => Culprit::ImplicitRegister(*r),
        (Class::MOV, [Operand::Reg(Register::PC), Operand::Reg(r)]) => Culprit::ImplicitRegister(*r),
        _ => Culprit::SequentialOverrun,
    }
}

/// Convenience wrapper around [`Vm::run`].
pub fn run(image: &Image, map: &MemoryMap, stimulus: &[u8], max_steps: u64) -> Result<RunResult, ConfigError> {
    Vm::new(image, map)?.run(stimulus, max_steps)
}

/// Whether rerunning reproduces `footprint` byte for byte.
pub fn replay_check(image: &Image, map: &MemoryMap, stimulus: &[u8], footprint: &Footprint) -> bool {
    let Ok(expected) = footprint.to_jsonl() else {
        return false;
    };
    let steps = footprint.actions.len() as u64;
    match Vm::new(image, map).and_then(|vm| vm.run(stimulus, steps.max(1))) {
        Ok(r) => r.footprint.to_jsonl().is_ok_and(|s| s == expected),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    const MAP: &str = r#"
entry = "start"
initial_sp = "0x20001000"

[[region]]
name = "flash"
base = "0x100"
size = "0x1000"
perms = "rx"

[[region]]
name = "ram"
base = "0x20000000"
size = "0x1000"
perms = "rw"

[input_port]
base = "0x40000000"
size = 16
"#;

    fn go(src: &str, stim: &[u8], steps: u64) -> RunResult {
        let img = assemble(src).unwrap();
        let map = MemoryMap::from_toml(MAP).unwrap();
        run(&img, &map, stim, steps).unwrap()
    }

    #[test]
    fn null_store_is_imw_at_zero() {
        let r = go(".org 0x100\nstart: MOV R3, #0\nSTR R4, [R3]\n", &[], 100);
        let c = r.outcome.crash().unwrap();
        assert_eq!(c.reason, CrashReason::InvalidMemoryWrite);
        assert_eq!(c.fault, 0);
        assert_eq!(c.index, 1);
        assert_eq!(r.footprint.actions.len(), 2);
        assert!(r.footprint.data.is_empty());
    }

    #[test]
    fn blx_to_data_is_implicit_register() {
        let src = ".org 0x100\nstart: MOV R1, #0x40000000\nLDRB R4, [R1]\nBLX R4\n";
        let r = go(src, &[0x00], 100);
        let c = r.outcome.crash().unwrap();
        assert_eq!(c.reason, CrashReason::InvalidInstructionExecution);
        assert_eq!(c.culprit, Some(Culprit::ImplicitRegister(Register::R4)));
        assert_eq!(c.pc, 0x108);
        assert_eq!(c.fault, 0);
    }

    #[test]
    fn halting_program_exits() {
        let r = go(
            ".org 0x100\nstart: MOV R0, #1\nMOV R1, #2\nADD R0, R1\nNOP\nB .\n",
            &[],
            100,
        );
        assert_eq!(r.outcome, Outcome::Exited);
        assert_eq!(r.footprint.actions.len(), 5);
    }

    #[test]
    fn step_limit() {
        let r = go(".org 0x100\nstart: NOP\nB .\n", &[], 1);
        assert_eq!(r.outcome, Outcome::StepLimit);
    }

    #[test]
    fn smashed_return_is_explicit_pop() {
        let src = ".org 0x100\nstart: MOV R0, #0x44\nPUSH {R4, LR}\nSTR R0, [SP, #4]\nPOP {R4, PC}\n";
        let r = go(src, &[], 100);
        let c = r.outcome.crash().unwrap();
        assert_eq!(
            c.culprit,
            Some(Culprit::ExplicitPop {
                stack_addr: 0x2000_0ffc
            })
        );
        assert_eq!(c.fault, 0x44);
    }

    #[test]
    fn port_reads_consume_then_pad_with_zero() {
        let src = ".org 0x100\nstart: MOV R1, #0x40000000\nLDRH R2, [R1]\nLDRB R3, [R1]\nB .\n";
        let r = go(src, &[0x34, 0x12], 100);
        assert_eq!(r.final_state.get(Register::R2), 0x1234);
        assert_eq!(r.final_state.get(Register::R3), 0);
    }

    #[test]
    fn write_to_flash_faults() {
        let r = go(".org 0x100\nstart: MOV R1, #0x200\nSTR R1, [R1]\n", &[], 10);
        assert_eq!(r.outcome.crash().unwrap().reason, CrashReason::InvalidMemoryWrite);
    }

    #[test]
    fn replay_detects_divergence() {
        let src = ".org 0x100\nstart: MOV R1, #0x40000000\nLDRB R2, [R1]\nCMP R2, #1\nBEQ bad\nB .\nbad: MOV R3, #0\nSTR R3, [R3]\n";
        let img = assemble(src).unwrap();
        let map = MemoryMap::from_toml(MAP).unwrap();
        let r = run(&img, &map, &[1], 100).unwrap();
        assert!(replay_check(&img, &map, &[1], &r.footprint));
        assert!(!replay_check(&img, &map, &[2], &r.footprint));
        let longer = run(&img, &map, &[1], 1000).unwrap();
        assert_eq!(longer.footprint, r.footprint);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let bad = MAP.replace("base = \"0x20000000\"", "base = \"0x800\"");
        assert!(matches!(MemoryMap::from_toml(&bad), Err(ConfigError::Overlap(..))));
    }
}
