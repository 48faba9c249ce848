//! Suspicious scores for tainted instructions.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::taint::TaintResult;

/// Longest loop body considered, in instructions.
pub const MAX_BODY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopRegion {
    /// Position in the action sequence, not a trace index.
    pub start: usize,
    pub body: Vec<u32>,
    pub reps: usize,
}

impl LoopRegion {
    pub fn len(&self) -> usize {
        self.body.len() * self.reps
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    /// 0-based iteration holding position `p`, if inside the region.
    pub fn iteration(&self, p: usize) -> Option<usize> {
        (p >= self.start && p < self.start + self.len()).then(|| (p - self.start) / self.body.len())
    }
}

/// Greedy left-to-right search for runs of at least `min_reps` identical
/// consecutive bodies, preferring the shortest body at each start.
pub fn detect_loops(pcs: &[u32], min_reps: usize) -> Vec<LoopRegion> {
    assert!(min_reps >= 2, "min_reps must be at least 2");
    let n = pcs.len();
    let mut next_same = vec![usize::MAX; n];
    let mut last: HashMap<u32, usize> = HashMap::new();
    for i in (0..n).rev() {
        if let Some(&j) = last.get(&pcs[i]) {
            next_same[i] = j;
        }
        last.insert(pcs[i], i);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = next_same[i];
        let mut found = None;
        while j != usize::MAX && j - i <= MAX_BODY {
            let l = j - i;
            // Not enough trace left for min_reps bodies.
            if i + l * min_reps > n {
                break;
            }
            let mut m = 0;
            while i + m + l < n && pcs[i + m] == pcs[i + m + l] {
                m += 1;
            }
            let reps = 1 + m / l;
            if reps >= min_reps {
                found = Some((l, reps));
                break;
            }
            j = next_same[j];
        }
        match found {
            Some((l, reps)) => {
                out.push(LoopRegion {
                    start: i,
                    body: pcs[i..i + l].to_vec(),
                    reps,
                });
                i += l * reps;
            }
            None => i += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Strategies {
    pub rl: bool,
    pub hw: bool,
}

impl Strategies {
    pub const NONE: Strategies = Strategies { rl: false, hw: false };
    pub const RL: Strategies = Strategies { rl: true, hw: false };
    pub const HW: Strategies = Strategies { rl: false, hw: true };
    pub const BOTH: Strategies = Strategies { rl: true, hw: true };

    pub fn name(self) -> &'static str {
        match (self.rl, self.hw) {
            (false, false) => "none",
            (true, false) => "rl",
            (false, true) => "hw",
            (true, true) => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Strategies> {
        Some(match s {
            "none" => Self::NONE,
            "rl" => Self::RL,
            "hw" => Self::HW,
            "both" => Self::BOTH,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankParams {
    pub sigma: f64,
    pub beta: f64,
    pub min_reps: usize,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            sigma: 0.1,
            beta: 1.0,
            min_reps: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tags {
    pub loop_suppressed: bool,
    pub history_write: bool,
    pub sink_site: bool,
}

impl Tags {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.loop_suppressed {
            v.push("loop_suppressed");
        }
        if self.history_write {
            v.push("history_write");
        }
        if self.sink_site {
            v.push("sink_site");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstruction {
    pub pc: u32,
    pub score: f64,
    pub rank: usize,
    /// Trace indices of tainted occurrences, ascending.
    pub occurrences: Vec<u64>,
    pub tags: Tags,
}

impl ScoredInstruction {
    pub fn first(&self) -> u64 {
        self.occurrences[0]
    }

    pub fn last(&self) -> u64 {
        *self.occurrences.last().expect("nonempty")
    }
}

/// Trace geometry the ranker needs besides the taint result.
pub struct RankInput<'a> {
    /// pc of every action in the analyzed window, in order.
    pub pcs: &'a [u32],
    /// Trace index of `pcs[0]`.
    pub first_index: u64,
    pub crash_index: u64,
    pub crash_pc: u32,
}

pub fn score(
    taint: &TaintResult,
    input: &RankInput<'_>,
    strategies: Strategies,
    params: &RankParams,
) -> Vec<ScoredInstruction> {
    let mut per_pc: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for &(ix, pc) in &taint.occurrences {
        per_pc.entry(pc).or_default().push(ix);
    }
    let interior = if strategies.rl {
        let mut flags = vec![false; input.pcs.len()];
        for r in detect_loops(input.pcs, params.min_reps) {
            let l = r.body.len();
            flags[r.start + l..r.start + l * (r.reps - 1)].fill(true);
        }
        flags
    } else {
        Vec::new()
    };
    let crash = input.crash_index;
    let frac = |ix: u64| {
        if crash == 0 {
            0.0
        } else {
            crash.saturating_sub(ix) as f64 / crash as f64
        }
    };
    let mut hw_frac: HashMap<u32, f64> = HashMap::new();
    for &(ix, pc) in &taint.history_writes {
        let f = frac(ix);
        let e = hw_frac.entry(pc).or_insert(f);
        *e = e.max(f);
    }
    let mut out: Vec<ScoredInstruction> = per_pc
        .into_iter()
        .map(|(pc, occ)| {
            let mut s = 1.0;
            let mut tags = Tags {
                sink_site: pc == input.crash_pc && occ.last() == Some(&crash),
                ..Tags::default()
            };
            if strategies.rl
                && occ.iter().all(|&ix| {
                    let p = (ix - input.first_index) as usize;
                    interior.get(p).copied().unwrap_or(false)
                })
            {
                s *= params.sigma;
                tags.loop_suppressed = true;
            }
            if strategies.hw {
                if let Some(&f) = hw_frac.get(&pc) {
                    s *= 1.0 + params.beta * f;
                    tags.history_write = true;
                }
            }
            ScoredInstruction {
                pc,
                score: s,
                rank: 0,
                occurrences: occ,
                tags,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.first().cmp(&b.first()))
            .then(a.pc.cmp(&b.pc))
    });
    for (k, s) in out.iter_mut().enumerate() {
        s.rank = k + 1;
    }
    out
}

pub fn top_k(scored: &[ScoredInstruction], k: usize) -> &[ScoredInstruction] {
    &scored[..k.min(scored.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_repetition() {
        let r = detect_loops(&[1, 2, 3, 1, 2, 3, 1, 2, 3], 3);
        assert_eq!(
            r,
            vec![LoopRegion {
                start: 0,
                body: vec![1, 2, 3],
                reps: 3
            }]
        );
    }

    #[test]
    fn increasing_has_no_loops() {
        let pcs: Vec<u32> = (0..100).map(|k| k * 4).collect();
        assert!(detect_loops(&pcs, 3).is_empty());
    }

    #[test]
    fn shortest_body_wins() {
        let r = detect_loops(&[7, 7, 7, 7, 7, 7], 3);
        assert_eq!(r[0].body, vec![7]);
        assert_eq!(r[0].reps, 6);
    }

    #[test]
    fn two_reps_are_not_enough() {
        assert!(detect_loops(&[1, 2, 1, 2, 9], 3).is_empty());
    }

    fn taint_of(occ: &[(u64, u32)]) -> TaintResult {
        TaintResult {
            occurrences: occ.to_vec(),
            addresses: occ.iter().map(|o| o.1).collect(),
            ..TaintResult::default()
        }
    }

    #[test]
    fn none_orders_by_distance_then_pc() {
        let t = taint_of(&[(0, 0x20), (0, 0x10), (5, 0x30)]);
        let pcs = [0x10, 0x14, 0x18, 0x1c, 0x20, 0x30];
        let input = RankInput {
            pcs: &pcs,
            first_index: 0,
            crash_index: 5,
            crash_pc: 0x30,
        };
        let s = score(&t, &input, Strategies::NONE, &RankParams::default());
        assert!(s.iter().all(|x| x.score == 1.0));
        let order: Vec<u32> = s.iter().map(|x| x.pc).collect();
        assert_eq!(order, vec![0x10, 0x20, 0x30]);
        assert!(s[2].tags.sink_site);
        assert_eq!(top_k(&s, 10).len(), 3);
        assert_eq!(top_k(&s, 1)[0].pc, 0x10);
    }

    #[test]
    fn loop_interior_is_suppressed_boundaries_are_not() {
        // setup, then body [a, b] x 5, then crash
        let mut pcs = vec![0x100];
        for _ in 0..5 {
            pcs.extend([0x200, 0x204]);
        }
        pcs.push(0x300);
        let idx = |p: usize| p as u64;
        let t = taint_of(&[
            (0, 0x100),
            (idx(3), 0x200),
            (idx(4), 0x204),
            (idx(10), 0x204),
            (11, 0x300),
        ]);
        let input = RankInput {
            pcs: &pcs,
            first_index: 0,
            crash_index: 11,
            crash_pc: 0x300,
        };
        let s = score(&t, &input, Strategies::RL, &RankParams::default());
        let by_pc: HashMap<u32, &ScoredInstruction> = s.iter().map(|x| (x.pc, x)).collect();
        assert!(by_pc[&0x200].tags.loop_suppressed);
        // 0x204 also occurs in the last iteration.
        assert!(!by_pc[&0x204].tags.loop_suppressed);
        assert_eq!(s.last().unwrap().pc, 0x200);
    }

    #[test]
    fn history_write_boost_grows_with_distance() {
        let mut t = taint_of(&[(10, 0x10), (80, 0x20), (100, 0x30)]);
        t.history_writes = vec![(10, 0x10), (80, 0x20)];
        let pcs = vec![0u32; 101];
        let input = RankInput {
            pcs: &pcs,
            first_index: 0,
            crash_index: 100,
            crash_pc: 0x30,
        };
        let s = score(&t, &input, Strategies::HW, &RankParams::default());
        assert_eq!(s[0].pc, 0x10);
        assert!((s[0].score - 1.9).abs() < 1e-12);
        assert!(s[0].tags.history_write);
    }
}
