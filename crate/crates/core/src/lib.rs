//! Crash root-cause analysis over recorded execution footprints.
//!
//! A crashing program is rerun on [`microvm`], which records every executed
//! instruction and memory access. [`reverse_exec`] turns that footprint into
//! a use-define chain and recovers values backward, [`taint`] walks back from
//! the crash, and [`ranker`] orders what it finds.

pub mod corpus;
pub mod event_log;
pub mod isa;
pub mod microvm;
pub mod par;
pub mod pipeline;
pub mod ranker;
pub mod reverse_exec;
pub mod taint;

pub use event_log::{CrashDescriptor, CrashReason, Culprit, Footprint};
pub use isa::{assemble, Image};
pub use microvm::{run, MemoryMap, Outcome};
pub use par::Parallelism;
pub use pipeline::{analyze, AnalysisConfig, Report};
