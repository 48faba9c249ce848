//! The analysis pipeline and its report.

use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::event_log::{Culprit, Footprint};
use crate::isa::Image;
use crate::par::{self, Parallelism};
use crate::ranker::{score, top_k, RankInput, RankParams, ScoredInstruction, Strategies};
use crate::reverse_exec::{build_chain, ChainError, Mode, RecoveryStats, UseDefChain};
use crate::taint::{identify_sink, propagate, SinkError, SinkLoc, TaintResult};

pub const REPORT_SCHEMA: &str = "report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Full,
    Last(usize),
    Percent(u32),
}

impl Depth {
    pub fn parse(s: &str) -> Option<Depth> {
        if s == "full" {
            return Some(Depth::Full);
        }
        if let Some(p) = s.strip_suffix('%') {
            let p: u32 = p.parse().ok()?;
            return (1..=100).contains(&p).then_some(Depth::Percent(p));
        }
        let n: usize = s.parse().ok()?;
        (n >= 1).then_some(Depth::Last(n))
    }

    /// Number of trailing actions kept out of `len`.
    pub fn keep(self, len: usize) -> usize {
        match self {
            Depth::Full => len,
            Depth::Last(n) => n.min(len),
            Depth::Percent(p) => ((len * p as usize).div_ceil(100)).clamp(1, len.max(1)),
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Full => f.write_str("full"),
            Depth::Last(n) => write!(f, "{n}"),
            Depth::Percent(p) => write!(f, "{p}%"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisConfig {
    pub depth: Depth,
    pub strategies: Strategies,
    pub mode: Mode,
    pub top_k: usize,
    pub params: RankParams,
    pub format: OutputFormat,
    pub timings: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            depth: Depth::Full,
            strategies: Strategies::BOTH,
            mode: Mode::WithEvents,
            top_k: 10,
            params: RankParams::default(),
            format: OutputFormat::Text,
            timings: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("footprint has no crash record")]
    NoCrash,
    #[error("footprint was recorded from image {found}, not {expected}")]
    ImageMismatch { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Sink(#[from] SinkError),
}

impl AnalyzeError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            AnalyzeError::NoCrash => "E_NO_CRASH",
            AnalyzeError::ImageMismatch { .. } => "E_IMAGE_MISMATCH",
            AnalyzeError::BadConfig(_) => "E_BAD_CONFIG",
            AnalyzeError::Chain(ChainError::InconsistentEvidence { .. }) => "E_INCONSISTENT_EVIDENCE",
            AnalyzeError::Chain(ChainError::MissingInstruction { .. }) => "E_MISSING_INSTRUCTION",
            AnalyzeError::Chain(ChainError::EventArityMismatch { .. }) => "E_EVENT_ARITY",
            AnalyzeError::Chain(ChainError::NoActions) => "E_EMPTY_FOOTPRINT",
            AnalyzeError::Sink(SinkError::UnsupportedCrashShape(_)) => "E_UNSUPPORTED_CRASH_SHAPE",
            AnalyzeError::Sink(SinkError::OutsideWindow(_)) => "E_UNSUPPORTED_CRASH_SHAPE",
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CrashSummary {
    pub reason: &'static str,
    pub trace_index: u64,
    pub pc: String,
    pub fault: String,
    pub culprit: Option<String>,
    pub sink: Vec<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConfigEcho {
    pub depth: String,
    pub strategies: &'static str,
    pub recovery: &'static str,
    pub top_k: usize,
    pub sigma: f64,
    pub beta: f64,
    pub min_reps: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct WindowSummary {
    pub total_actions: usize,
    pub analyzed_actions: usize,
    pub first_index: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RecoverySummary {
    pub nodes: usize,
    pub known_values: usize,
    pub known_addrs: usize,
    pub passes: usize,
    pub unresolved_uses: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TaintSummary {
    pub tainted_occurrences: usize,
    pub tainted_pcs: usize,
    pub visited_nodes: usize,
    pub unresolved: usize,
    pub live_in: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RankedEntry {
    pub rank: usize,
    pub score: f64,
    pub pc: String,
    pub text: String,
    pub occurrences: usize,
    pub first: u64,
    pub last: u64,
    pub tags: Vec<&'static str>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct Timings {
    pub chain_build_ms: f64,
    pub recovery_ms: f64,
    pub taint_ms: f64,
    pub ranking_ms: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.chain_build_ms + self.recovery_ms + self.taint_ms + self.ranking_ms
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Report {
    pub schema: &'static str,
    pub image: String,
    pub crash: CrashSummary,
    pub config: ConfigEcho,
    pub window: WindowSummary,
    pub recovery: RecoverySummary,
    pub taint: TaintSummary,
    pub unresolved: usize,
    pub ranked: Vec<RankedEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Everything an analysis produced, for callers that need more than the
/// report.
pub struct Analysis {
    pub chain: UseDefChain,
    pub stats: RecoveryStats,
    pub taint: TaintResult,
    pub scored: Vec<ScoredInstruction>,
    pub timings: Timings,
    pub report: Report,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn hex(v: u32) -> String {
    format!("0x{v:x}")
}

pub fn analyze(image: &Image, fp: &Footprint, cfg: &AnalysisConfig) -> Result<Report, AnalyzeError> {
    analyze_full(image, fp, cfg).map(|a| a.report)
}

pub fn analyze_full(image: &Image, fp: &Footprint, cfg: &AnalysisConfig) -> Result<Analysis, AnalyzeError> {
    if cfg.top_k == 0 {
        return Err(AnalyzeError::BadConfig("top_k must be at least 1".into()));
    }
    if cfg.params.min_reps < 2 {
        return Err(AnalyzeError::BadConfig("min_reps must be at least 2".into()));
    }
    if !(cfg.params.sigma > 0.0 && cfg.params.sigma.is_finite())
        || !(cfg.params.beta >= 0.0 && cfg.params.beta.is_finite())
    {
        return Err(AnalyzeError::BadConfig(
            "sigma must be positive and beta nonnegative".into(),
        ));
    }
    let crash = fp.crash.ok_or(AnalyzeError::NoCrash)?;
    let expected = image.id_hash();
    if fp.header.image != expected {
        return Err(AnalyzeError::ImageMismatch {
            expected,
            found: fp.header.image.clone(),
        });
    }
    let total = fp.actions.len();
    let keep = cfg.depth.keep(total);
    let sliced;
    let window = if keep < total {
        sliced = fp.slice_last(keep).expect("keep within range");
        &sliced
    } else {
        fp
    };

    let t0 = Instant::now();
    let mut chain = build_chain(window, image)?;
    let t1 = Instant::now();
    let stats = chain.recover(cfg.mode)?;
    let t2 = Instant::now();
    let sink = identify_sink(&crash, &chain)?;
    let taint = propagate(&chain, &sink);
    let t3 = Instant::now();
    let pcs: Vec<u32> = window.actions.iter().map(|a| a.pc).collect();
    let input = RankInput {
        pcs: &pcs,
        first_index: window.actions[0].index,
        crash_index: crash.index,
        crash_pc: crash.pc,
    };
    let scored = score(&taint, &input, cfg.strategies, &cfg.params);
    let t4 = Instant::now();
    let timings = Timings {
        chain_build_ms: ms(t1 - t0),
        recovery_ms: ms(t2 - t1),
        taint_ms: ms(t3 - t2),
        ranking_ms: ms(t4 - t3),
    };

    let ranked = top_k(&scored, cfg.top_k)
        .iter()
        .map(|s| RankedEntry {
            rank: s.rank,
            score: s.score,
            pc: hex(s.pc),
            text: image.instr_at(s.pc).map(|i| i.text.clone()).unwrap_or_default(),
            occurrences: s.occurrences.len(),
            first: s.first(),
            last: s.last(),
            tags: s.tags.names(),
        })
        .collect();
    let report = Report {
        schema: REPORT_SCHEMA,
        image: fp.header.image.clone(),
        crash: CrashSummary {
            reason: crash.reason.name(),
            trace_index: crash.index,
            pc: hex(crash.pc),
            fault: hex(crash.fault),
            culprit: crash.culprit.map(|c: Culprit| c.to_string()),
            sink: sink
                .locations
                .iter()
                .map(|l| match l {
                    SinkLoc::Reg(r) => r.to_string(),
                    SinkLoc::Mem(a) => format!("mem({})", hex(*a)),
                })
                .collect(),
        },
        config: ConfigEcho {
            depth: cfg.depth.to_string(),
            strategies: cfg.strategies.name(),
            recovery: match cfg.mode {
                Mode::WithEvents => "events",
                Mode::NoEvents => "noevents",
            },
            top_k: cfg.top_k,
            sigma: cfg.params.sigma,
            beta: cfg.params.beta,
            min_reps: cfg.params.min_reps,
        },
        window: WindowSummary {
            total_actions: total,
            analyzed_actions: keep,
            first_index: window.actions[0].index,
            truncated: keep < total,
        },
        recovery: RecoverySummary {
            nodes: chain.nodes.len(),
            known_values: stats.known_values,
            known_addrs: stats.known_addrs,
            passes: stats.passes,
            unresolved_uses: stats.unresolved,
        },
        taint: TaintSummary {
            tainted_occurrences: taint.occurrences.len(),
            tainted_pcs: taint.addresses.len(),
            visited_nodes: taint.visited,
            unresolved: taint.unresolved,
            live_in: taint.live_in,
        },
        unresolved: taint.unresolved,
        ranked,
        timings: cfg.timings.then_some(timings),
    };
    Ok(Analysis {
        chain,
        stats,
        taint,
        scored,
        timings,
        report,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self, timings: Option<&Timings>) -> String {
        let mut out = String::new();
        let c = &self.crash;
        let _ = writeln!(
            out,
            "crash: {} at {} (trace index {}), fault {}",
            c.reason, c.pc, c.trace_index, c.fault
        );
        if let Some(k) = &c.culprit {
            let _ = writeln!(out, "culprit: {k}");
        }
        let _ = writeln!(out, "sink: {}", c.sink.join(", "));
        let g = &self.config;
        let _ = writeln!(
            out,
            "config: depth={} strategies={} recovery={} top={} sigma={} beta={} min-reps={}",
            g.depth, g.strategies, g.recovery, g.top_k, g.sigma, g.beta, g.min_reps
        );
        let w = &self.window;
        let _ = writeln!(
            out,
            "window: {} of {} actions from index {}",
            w.analyzed_actions, w.total_actions, w.first_index
        );
        let _ = writeln!(
            out,
            "tainted: {} occurrences, {} instructions; unresolved {}; live-in {}",
            self.taint.tainted_occurrences, self.taint.tainted_pcs, self.unresolved, self.taint.live_in
        );
        if let Some(t) = timings.or(self.timings.as_ref()) {
            let _ = writeln!(
                out,
                "time: chain {:.3} ms, recovery {:.3} ms, taint {:.3} ms, ranking {:.3} ms",
                t.chain_build_ms, t.recovery_ms, t.taint_ms, t.ranking_ms
            );
        }
        let _ = writeln!(
            out,
            "{:>4}  {:>7}  {:>10}  {:<28} {:>6}  {:>8}  {:>8}  tags",
            "rank", "score", "pc", "instruction", "count", "first", "last"
        );
        for e in &self.ranked {
            let _ = writeln!(
                out,
                "{:>4}  {:>7.4}  {:>10}  {:<28} {:>6}  {:>8}  {:>8}  {}",
                e.rank,
                e.score,
                e.pc,
                e.text,
                e.occurrences,
                e.first,
                e.last,
                e.tags.join(",")
            );
        }
        out
    }
}

/// One unit of batch work.
pub struct Job<'a> {
    pub image: &'a Image,
    pub footprint: &'a Footprint,
    pub config: AnalysisConfig,
}

/// Analyzes independent footprints, in parallel when asked and available.
pub fn analyze_batch(jobs: &[Job<'_>], mode: Parallelism) -> Vec<Result<Report, AnalyzeError>> {
    par::map(jobs, mode, |j| analyze(j.image, j.footprint, &j.config))
}
