//! Crashing programs with known root causes.
//!
//! Every case marks its root-cause instruction with the label `root`. Deep
//! variants put a checksum loop between the root and the crash so that the
//! root lies in the first half of the trace.

use std::fmt::Write as _;

use crate::event_log::CrashReason;
use crate::isa::{assemble, Image};
use crate::microvm::{run, MemoryMap, RunResult};

pub const MAP_TOML: &str = r#"entry = "main"
initial_sp = "0x20010000"

[[region]]
name = "flash"
base = "0x08000000"
size = "0x10000"
perms = "rx"

[[region]]
name = "ram"
base = "0x20000000"
size = "0x10000"
perms = "rw"

[input_port]
base = "0x40000000"
size = "0x100"
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    NullStore,
    IndexStore,
    Alias,
    FnPointer,
    StackSmash,
    Memcpy,
    Scaling,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::NullStore => "null_store",
            Family::IndexStore => "index_store",
            Family::Alias => "alias",
            Family::FnPointer => "fn_pointer",
            Family::StackSmash => "stack_smash",
            Family::Memcpy => "memcpy",
            Family::Scaling => "scaling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub name: String,
    pub family: Family,
    pub source: String,
    pub stimulus: Vec<u8>,
    pub max_steps: u64,
    pub reason: CrashReason,
    pub deep: bool,
    /// The root is a memory write whose value reaches the sink, and the only
    /// such write that far from the crash.
    pub history_write_root: bool,
    /// Labels of instructions that only matter inside a copy loop.
    pub loop_body: Vec<&'static str>,
}

pub struct Collected {
    pub image: Image,
    pub map: MemoryMap,
    pub run: RunResult,
}

impl Case {
    pub fn image(&self) -> Image {
        assemble(&self.source).unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }

    pub fn map() -> MemoryMap {
        MemoryMap::from_toml(MAP_TOML).expect("corpus map")
    }

    pub fn root_pc(&self, image: &Image) -> u32 {
        image.label("root").expect("corpus case has a root label")
    }

    pub fn loop_body_pcs(&self, image: &Image) -> Vec<u32> {
        self.loop_body
            .iter()
            .map(|l| image.label(l).expect("loop label"))
            .collect()
    }

    pub fn collect(&self) -> Collected {
        let image = self.image();
        let map = Case::map();
        let run = run(&image, &map, &self.stimulus, self.max_steps).expect("corpus map is valid");
        Collected { image, map, run }
    }
}

const HEAD: &str = ".org 0x08000000\n";

/// A checksum loop over a zeroed buffer; touches only R8-R11.
fn filler(out: &mut String, tag: &str, iters: u32) {
    let _ = write!(
        out,
        "        MOV R8, #0x20008000\n        MOV R9, #{iters}\n        MOV R10, #0\n\
         fill_{tag}: LDRB R11, [R8], #1\n        ADD R10, R10, R11\n        SUBS R9, R9, #1\n        BNE fill_{tag}\n"
    );
}

fn deep_iters(deep: bool, base: u32) -> u32 {
    if deep {
        base
    } else {
        0
    }
}

fn maybe_filler(out: &mut String, iters: u32) {
    if iters > 0 {
        filler(out, "a", iters);
    }
}

fn null_store(v: u32, deep: bool) -> Case {
    let mut s = String::from(HEAD);
    let _ = write!(
        s,
        "main:   MOV R1, #0x40000000\n        LDRB R4, [R1]\n        MOV R2, #0x20000040\n        STR R4, [R2]\n\
         root:   MOV R3, #0\n"
    );
    maybe_filler(&mut s, deep_iters(deep, 12 + 3 * v));
    let _ = write!(
        s,
        "        LDR R5, [R2]\n        ADD R4, R4, R5\n        STR R4, [R3, #{}]\n",
        4 * v
    );
    Case {
        name: format!("null_store_{}{v}", if deep { "deep_" } else { "" }),
        family: Family::NullStore,
        source: s,
        stimulus: vec![0x11 + v as u8],
        max_steps: 100_000,
        reason: CrashReason::InvalidMemoryWrite,
        deep,
        history_write_root: false,
        loop_body: vec![],
    }
}

fn index_store(v: u32, deep: bool) -> Case {
    let mut s = String::from(HEAD);
    let _ = write!(
        s,
        "main:   MOV R1, #0x40000000\n        LDRB R2, [R1]\n        MOV R5, #0x20000100\n        MOV R0, #0x55\n\
         root:   LSL R2, R2, #{}\n",
        12 + v
    );
    maybe_filler(&mut s, deep_iters(deep, 10 + 2 * v));
    s.push_str("        STR R0, [R5, R2]\n");
    Case {
        name: format!("index_store_{}{v}", if deep { "deep_" } else { "" }),
        family: Family::IndexStore,
        source: s,
        stimulus: vec![0x40 + v as u8],
        max_steps: 100_000,
        reason: CrashReason::InvalidMemoryWrite,
        deep,
        history_write_root: false,
        loop_body: vec![],
    }
}

fn alias(v: u32, deep: bool) -> Case {
    let slot = 0x2000_0100 + 16 + 4 * v;
    let mut s = String::from(HEAD);
    let _ = write!(
        s,
        "main:   MOV R1, #0x40000000\n        LDR R0, [R1]\n        LDR R5, [R1]\n        MOV R2, #0x20000400\n\
         \x20       STR R2, [R5, #{d}]\n        LDR R3, [R5, #{d}]\n\
         root:   STR R0, [R5, #{d}]\n        STR R3, [R2]\n",
        d = 16 + 4 * v
    );
    maybe_filler(&mut s, deep_iters(deep, 14 + 2 * v));
    let _ = write!(
        s,
        "        MOV R7, #0x{slot:x}\n        LDR R6, [R7]\n        LDR R2, [R6, #4]\n"
    );
    let ptr = 0x3000_0000u32 | (v << 8);
    // The record base arrives at run time, like a received frame buffer.
    let mut stim = ptr.to_le_bytes().to_vec();
    stim.extend(0x2000_0100u32.to_le_bytes());
    Case {
        name: format!("alias_{}{v}", if deep { "deep_" } else { "" }),
        family: Family::Alias,
        source: s,
        stimulus: stim,
        max_steps: 100_000,
        reason: CrashReason::InvalidMemoryRead,
        deep,
        history_write_root: true,
        loop_body: vec![],
    }
}

fn fn_pointer(v: u32, deep: bool) -> Case {
    let idx = v % 2;
    let other = 1 - idx;
    let mut s = String::from(HEAD);
    let _ = write!(
        s,
        "main:   MOV R5, #0x20000200\n        MOV R0, #handler\n        STR R0, [R5]\n        STR R0, [R5, #4]\n\
         \x20       MOV R1, #0x40000000\n        LDRB R2, [R1]\n        LDR R4, [R1]\n\
         root:   STR R4, [R5, R2, LSL #2]\n\
         \x20       MOV R7, #0x{ok:x}\n        LDR R6, [R7]\n        BLX R6\n",
        ok = 0x2000_0200 + 4 * other
    );
    maybe_filler(&mut s, deep_iters(deep, 14 + 2 * v));
    let _ = write!(
        s,
        "        MOV R7, #0x{bad:x}\n        LDR R6, [R7]\n        BLX R6\n        B .\n\
         handler: ADD R0, R0, #1\n        BX LR\n",
        bad = 0x2000_0200 + 4 * idx
    );
    let mut stim = vec![idx as u8];
    stim.extend((0x3000_0000u32 | (v << 4)).to_le_bytes());
    Case {
        name: format!("fn_pointer_{}{v}", if deep { "deep_" } else { "" }),
        family: Family::FnPointer,
        source: s,
        stimulus: stim,
        max_steps: 100_000,
        reason: CrashReason::InvalidInstructionExecution,
        deep,
        history_write_root: true,
        loop_body: vec![],
    }
}

fn stack_smash(v: u32, deep: bool) -> Case {
    let mut s = String::from(HEAD);
    s.push_str(
        "main:   MOV R1, #0x40000000\n        LDRB R2, [R1]\n        LDR R3, [R1]\n        MOV R4, #7\n\
         \x20       BL func\n        B .\n\
         func:   PUSH {R4, LR}\n        SUB SP, SP, #16\n        MOV R4, #0\n        STR R4, [SP]\n        MOV R0, SP\n\
         root:   STR R3, [R0, R2, LSL #2]\n",
    );
    maybe_filler(&mut s, deep_iters(deep, 14 + 2 * v));
    s.push_str("        LDR R4, [SP]\n        ADD SP, SP, #16\n        POP {R4, PC}\n");
    let mut stim = vec![5u8];
    stim.extend((0x3000_0000u32 | (v << 12)).to_le_bytes());
    Case {
        name: format!("stack_smash_{}{v}", if deep { "deep_" } else { "" }),
        family: Family::StackSmash,
        source: s,
        stimulus: stim,
        max_steps: 100_000,
        reason: CrashReason::InvalidInstructionExecution,
        deep,
        history_write_root: true,
        loop_body: vec![],
    }
}

fn memcpy(v: u32) -> Case {
    let n = 24 + 4 * v;
    let mut s = String::from(HEAD);
    s.push_str(
        "main:   MOV R1, #0x40000000\n        LDRB R2, [R1]\n        MOV R5, #0x20000000\n\
         root:   STR R2, [R5, #8]\n",
    );
    filler(&mut s, "a", 60 + 10 * v);
    s.push_str(
        "        MOV R6, #0x20000000\n        LDR R3, [R6, #8]\n        MOV R0, #0x20000100\n        MOV R4, #0x20000300\n\
         copy:   SUBS R3, R3, #1\n\
         body_ld: LDRB R7, [R4, R3]\n\
         body_st: STRB R7, [R0, R3]\n        BNE copy\n\
         \x20       MOV R7, #0x20000110\n        LDR R6, [R7]\n        LDR R2, [R6]\n",
    );
    s.push_str(".org 0x20000110\n        .word 0x20000200\n.org 0x20000300\n");
    let fill = 0x41 + v;
    for _ in 0..8 {
        let _ = writeln!(s, "        .byte {}", vec![format!("0x{fill:x}"); 8].join(", "));
    }
    Case {
        name: format!("memcpy_{v}"),
        family: Family::Memcpy,
        source: s,
        stimulus: vec![n as u8],
        max_steps: 100_000,
        reason: CrashReason::InvalidMemoryRead,
        deep: true,
        history_write_root: true,
        loop_body: vec!["body_ld", "body_st"],
    }
}

/// The ground-truth corpus: 27 cases across all crash shapes.
pub fn ground_truth_corpus() -> Vec<Case> {
    let mut out = Vec::new();
    for deep in [false, true] {
        let count = if deep { 2 } else { 3 };
        for v in 0..count {
            out.push(null_store(v, deep));
            out.push(alias(v, deep));
            out.push(fn_pointer(v, deep));
            out.push(stack_smash(v, deep));
        }
        for v in 0..2 {
            out.push(index_store(v, deep));
        }
    }
    for v in 0..3 {
        out.push(memcpy(v));
    }
    out
}

/// A store/load alias loop running for about `actions` steps before an
/// invalid read through the loop-carried value.
pub fn scaling_case(actions: u32) -> Case {
    let iters = actions.saturating_sub(6).div_ceil(6).max(1);
    let mut s = String::from(HEAD);
    let _ = write!(
        s,
        "main:   MOV R5, #0x20000000\n        MOV R6, #0x20000000\n        MOV R1, #0x40000000\n\
         root:   LDRB R0, [R1]\n        MOV R9, #{iters}\n\
         loop:   STR R0, [R5, #4]\n        LDR R2, [R6, #4]\n        ADD R0, R2, #3\n        AND R0, R0, #0xff\n\
         \x20       SUBS R9, R9, #1\n        BNE loop\n        LDR R4, [R0]\n"
    );
    Case {
        name: format!("scaling_{actions}"),
        family: Family::Scaling,
        source: s,
        stimulus: vec![0x21],
        max_steps: actions as u64 * 2 + 100,
        reason: CrashReason::InvalidMemoryRead,
        deep: true,
        history_write_root: false,
        loop_body: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microvm::Outcome;

    #[test]
    fn every_case_crashes_as_labelled() {
        let corpus = ground_truth_corpus();
        assert!(corpus.len() >= 25);
        for case in &corpus {
            let c = case.collect();
            match c.run.outcome {
                Outcome::Crashed(d) => assert_eq!(d.reason, case.reason, "{}", case.name),
                other => panic!("{}: {other:?}", case.name),
            }
        }
    }

    #[test]
    fn scaling_length_is_close_to_target() {
        let c = scaling_case(10_000).collect();
        let n = c.run.footprint.actions.len();
        assert!((9_900..=10_100).contains(&n), "{n}");
    }
}
