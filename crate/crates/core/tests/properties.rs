#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rca_core::corpus::{ground_truth_corpus, Case};
use rca_core::event_log::Footprint;
use rca_core::isa::effects::{effects_when, Execution};
use rca_core::isa::exec::{step_into, SparseMemory, Touched};
use rca_core::isa::{assemble, invert, step_forward, Class, MachineState, Register, FLAGS_MASK};
use rca_core::microvm::FullTrace;
use rca_core::pipeline::{analyze_full, AnalysisConfig};
use rca_core::ranker::{detect_loops, score, RankInput, RankParams, Strategies, MAX_BODY};
use rca_core::reverse_exec::{analyze_chain, Mode};
use rca_core::taint::{identify_sink, propagate, TaintResult};

use common::{interesting_u32, oracle_taint, random_instr, run_traced, soundness_violations};

fn whole_memory() -> SparseMemory {
    let mut m = SparseMemory::new();
    m.map(0, 0x8000_0000);
    m.map(0x8000_0000, 0x8000_0000);
    m
}

fn random_state(rng: &mut StdRng, pc: u32) -> MachineState {
    let mut s = MachineState::default();
    for r in 0..Register::COUNT {
        s.regs[r] = interesting_u32(rng);
    }
    s.set(Register::APSR, rng.gen::<u32>() & FLAGS_MASK);
    s.set(Register::PC, pc);
    s
}

fn pick_class(k: usize) -> Class {
    Class::ALL[k % Class::ALL.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn invert_agrees_with_forward(seed: u64, k in 0usize..64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let addr = rng.gen::<u32>() & !3;
        let instr = random_instr(&mut rng, pick_class(k), addr);
        let pre = random_state(&mut rng, addr);
        let mut mem = whole_memory();
        if let Ok((post, acc)) = step_forward(&pre, &instr, &mut mem) {
            let mut after = [None; Register::COUNT];
            for r in 0..Register::COUNT {
                if rng.gen_bool(0.6) {
                    after[r] = Some(post.regs[r]);
                }
            }
            let before = invert(&instr, &after, &acc).expect("consistent evidence");
            for r in 0..Register::COUNT {
                if let Some(v) = before[r] {
                    prop_assert_eq!(v, pre.regs[r], "{} reg {}", instr.text, r);
                }
            }
        }
    }

    #[test]
    fn effects_cover_observed_traffic(seed: u64, k in 0usize..64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let addr = rng.gen::<u32>() & !3;
        let instr = random_instr(&mut rng, pick_class(k), addr);
        let pre = random_state(&mut rng, addr);
        let mut mem = whole_memory();
        let mut acc = Vec::new();
        let mut t = Touched::default();
        if let Ok(post) = step_into(&pre, &instr, &mut mem, &mut acc, &mut t) {
            let taken = !instr.is_conditional() || instr.cond.holds(pre.get(Register::APSR));
            let e = effects_when(&instr, if taken { Execution::Taken } else { Execution::Skipped });
            let mask = |it: &mut dyn Iterator<Item = rca_core::isa::Location>| {
                it.filter_map(|l| l.reg()).fold(0u32, |m, r| m | 1 << r.index())
            };
            let uses = mask(&mut e.uses());
            let defs = mask(&mut e.defines());
            prop_assert_eq!(t.reads & !uses, 0, "{}: unlisted reads", instr.text);
            prop_assert_eq!(t.writes & !defs, 0, "{}: unlisted writes", instr.text);
            prop_assert_eq!(e.mem_slots().count(), acc.len(), "{}", instr.text);
            // Registers that changed value must have been written.
            for r in 0..Register::COUNT {
                if post.regs[r] != pre.regs[r] {
                    prop_assert!(t.writes & (1 << r) != 0, "{}: silent write to {}", instr.text, r);
                }
            }
        }
    }

    #[test]
    fn flags_only_move_when_allowed(seed: u64, k in 0usize..64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let addr = rng.gen::<u32>() & !3;
        let instr = random_instr(&mut rng, pick_class(k), addr);
        let pre = random_state(&mut rng, addr);
        let mut t = Touched::default();
        if let Ok(post) = step_into(&pre, &instr, &mut whole_memory(), &mut Vec::new(), &mut t) {
            let apsr = 1 << Register::APSR.index();
            if !instr.sets_flags {
                prop_assert_eq!(post.get(Register::APSR), pre.get(Register::APSR));
                prop_assert_eq!(t.writes & apsr, 0);
            }
            if !instr.is_conditional() && !matches!(instr.class, Class::ADC) && !instr.sets_flags {
                prop_assert_eq!(t.reads & apsr, 0, "{}", instr.text);
            }
            prop_assert_eq!(post.get(Register::APSR) & !FLAGS_MASK, 0);
        }
    }

    #[test]
    fn listing_reassembles(seed: u64, n in 1usize..40) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut src = String::from(".org 0x1000\n");
        for j in 0..n {
            let class = pick_class(rng.gen());
            let i = random_instr(&mut rng, class, 0x1000 + 4 * j as u32);
            src.push_str(&i.text);
            src.push('\n');
        }
        let img = assemble(&src).expect("rendered text assembles");
        let again = assemble(&img.listing()).expect("listing assembles");
        prop_assert_eq!(&img, &again);
        prop_assert_eq!(img.id_hash(), again.id_hash());
    }

    #[test]
    fn footprint_roundtrip_and_slices(seed: u64, cut in 1usize..80) {
        let mut rng = StdRng::seed_from_u64(seed);
        let fp = common::random_footprint(&mut rng);
        let text = fp.to_jsonl().unwrap();
        prop_assert_eq!(&Footprint::parse(&text).unwrap(), &fp);
        let n = cut.min(fp.actions.len());
        let s = fp.slice_last(n).unwrap();
        s.validate().unwrap();
        prop_assert_eq!(s.actions.len(), n);
        prop_assert_eq!(s.last_action(), fp.last_action());
        prop_assert_eq!(s.crash, fp.crash);
        let from = s.first_index().unwrap();
        prop_assert_eq!(s.data.len(), fp.data.iter().filter(|d| d.index >= from).count());
        prop_assert_eq!(&Footprint::parse(&s.to_jsonl().unwrap()).unwrap(), &s);
        prop_assert!(fp.slice_last(0).is_err());
        prop_assert!(fp.slice_last(fp.actions.len() + 1).is_err());
    }

    #[test]
    fn reported_loops_really_repeat(pcs in prop::collection::vec(0u32..6, 0..300), reps in 2usize..5) {
        let regions = detect_loops(&pcs, reps);
        let mut end = 0;
        for r in &regions {
            prop_assert!(r.start >= end, "regions overlap");
            prop_assert!(r.reps >= reps && !r.body.is_empty() && r.body.len() <= MAX_BODY);
            for it in 0..r.reps {
                let at = r.start + it * r.body.len();
                prop_assert_eq!(&pcs[at..at + r.body.len()], &r.body[..]);
            }
            // No shorter period explains the first repetitions.
            for l in 1..r.body.len() {
                let periodic = (0..l * (reps - 1)).all(|p| r.start + p + l < pcs.len() && pcs[r.start + p] == pcs[r.start + p + l]);
                prop_assert!(!periodic, "body {:?} has shorter period {}", r.body, l);
            }
            end = r.start + r.len();
        }
    }

    #[test]
    fn constructed_loop_is_found(prefix in 0usize..20, body_len in 1usize..12, k in 3usize..9, suffix in 0usize..20) {
        let mut pcs: Vec<u32> = (0..prefix as u32).map(|x| 0x1000 + 4 * x).collect();
        let body: Vec<u32> = (0..body_len as u32).map(|x| 0x2000 + 4 * x).collect();
        for _ in 0..k {
            pcs.extend(&body);
        }
        pcs.extend((0..suffix as u32).map(|x| 0x3000 + 4 * x));
        let r = detect_loops(&pcs, 3);
        prop_assert_eq!(r.len(), 1);
        prop_assert_eq!(r[0].start, prefix);
        prop_assert_eq!(&r[0].body, &body);
        prop_assert_eq!(r[0].reps, k);
    }

    #[test]
    fn ranking_preserves_membership(
        occ in prop::collection::btree_set((0u64..500, 0u32..40), 1..60),
        hw_mask in any::<u64>(),
        sigma in 0.01f64..1.0,
        beta in 0.0f64..4.0,
    ) {
        let occurrences: Vec<(u64, u32)> = {
            let mut v: Vec<(u64, u32)> = occ.iter().map(|&(i, p)| (i, p * 4)).collect();
            v.sort();
            v
        };
        let history_writes = occurrences.iter().copied().enumerate().filter(|(j, _)| hw_mask >> (j % 64) & 1 == 1).map(|(_, o)| o).collect();
        let t = TaintResult {
            addresses: occurrences.iter().map(|o| o.1).collect(),
            occurrences,
            history_writes,
            ..TaintResult::default()
        };
        let pcs: Vec<u32> = (0..500u32).map(|i| (i % 7) * 4).collect();
        let input = RankInput { pcs: &pcs, first_index: 0, crash_index: 499, crash_pc: 0 };
        let params = RankParams { sigma, beta, min_reps: 3 };
        for s in [Strategies::NONE, Strategies::RL, Strategies::HW, Strategies::BOTH] {
            let out = score(&t, &input, s, &params);
            let got: BTreeSet<u32> = out.iter().map(|x| x.pc).collect();
            prop_assert_eq!(&got, &t.addresses);
            for (j, x) in out.iter().enumerate() {
                prop_assert_eq!(x.rank, j + 1);
                prop_assert!(x.score > 0.0);
            }
            prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}

#[test]
fn recovery_is_sound_in_both_modes() {
    for case in ground_truth_corpus() {
        let image = case.image();
        let traced = run_traced(&image, &Case::map(), &case.stimulus, case.max_steps);
        for mode in [Mode::WithEvents, Mode::NoEvents] {
            let chain = analyze_chain(&traced.footprint, &image, mode).unwrap();
            let bad = soundness_violations(&chain, &traced);
            assert!(bad.is_empty(), "{} {mode:?}: {bad:?}", case.name);
        }
    }
}

#[test]
fn events_never_lose_knowledge() {
    for case in ground_truth_corpus() {
        let c = case.collect();
        let fp = &c.run.footprint;
        let with = analyze_chain(fp, &c.image, Mode::WithEvents).unwrap();
        let without = analyze_chain(fp, &c.image, Mode::NoEvents).unwrap();
        for id in 0..with.nodes.len() as u32 {
            if without.value(id).is_some() {
                assert_eq!(with.value(id), without.value(id), "{} node {id}", case.name);
            }
            if without.addr(id).is_some() {
                assert_eq!(with.addr(id), without.addr(id), "{} node {id}", case.name);
            }
        }
        assert_eq!(with.unresolved_count(), 0, "{}", case.name);
        let crash = fp.crash.as_ref().unwrap();
        let tw: BTreeSet<_> = propagate(&with, &identify_sink(crash, &with).unwrap())
            .occurrences
            .into_iter()
            .collect();
        if let Ok(sink) = identify_sink(crash, &without) {
            let tn: BTreeSet<_> = propagate(&without, &sink).occurrences.into_iter().collect();
            assert!(tn.is_subset(&tw), "{}", case.name);
        }
    }
}

#[test]
fn truncated_windows_match_restricted_oracle() {
    for case in ground_truth_corpus() {
        let image = case.image();
        let traced = run_traced(&image, &Case::map(), &case.stimulus, case.max_steps);
        let len = traced.footprint.actions.len();
        let full: BTreeSet<(u64, u32)> = analyze_full(&image, &traced.footprint, &AnalysisConfig::default())
            .unwrap()
            .taint
            .occurrences
            .into_iter()
            .collect();
        let mut prev: Option<BTreeSet<(u64, u32)>> = None;
        for keep in [len / 4, len / 2, 3 * len / 4, len] {
            let keep = keep.max(1);
            let slice = traced.footprint.slice_last(keep).unwrap();
            let a = analyze_full(&image, &slice, &AnalysisConfig::default()).unwrap();
            let got: BTreeSet<(u64, u32)> = a.taint.occurrences.iter().copied().collect();
            let start = slice.first_index().unwrap();
            assert_eq!(got, oracle_taint(&traced, &image, start), "{} keep {keep}", case.name);
            assert!(got.is_subset(&full), "{}", case.name);
            if let Some(p) = &prev {
                assert!(p.is_subset(&got), "{}: deeper window lost taint", case.name);
            }
            // The sink site is always tainted.
            let crash = slice.crash.unwrap();
            assert!(got.iter().any(|&(ix, _)| ix == crash.index), "{}", case.name);
            prev = Some(got);
        }
    }
}

#[test]
fn vm_is_deterministic_and_logs_every_access() {
    for case in ground_truth_corpus() {
        let image = case.image();
        let map = Case::map();
        let vm = rca_core::microvm::Vm::new(&image, &map).unwrap();
        let a = vm.run(&case.stimulus, case.max_steps).unwrap();
        let b = vm.run(&case.stimulus, case.max_steps).unwrap();
        assert_eq!(a.footprint.to_jsonl().unwrap(), b.footprint.to_jsonl().unwrap());
        assert!(rca_core::microvm::replay_check(
            &image,
            &map,
            &case.stimulus,
            &a.footprint
        ));
        let mut trace = FullTrace::default();
        let c = vm
            .run_observed(&case.stimulus, case.max_steps, true, &mut trace)
            .unwrap();
        assert_eq!(c.footprint, a.footprint);
        assert_eq!(trace.steps.len(), a.footprint.actions.len());
        for s in &trace.steps {
            let logged = a.footprint.data_for(s.index);
            assert_eq!(logged.len(), s.accesses.len(), "{} #{}", case.name, s.index);
            for (d, x) in logged.iter().zip(&s.accesses) {
                assert_eq!((d.kind, d.addr, d.width, d.value), (x.kind, x.addr, x.width, x.value));
            }
            let instr = image.instr_at(s.pc).unwrap();
            if s.post.is_some() && !instr.is_conditional() {
                assert_eq!(s.accesses.len(), instr.access_count());
            }
        }
    }
}

/// Straight-line programs over a small RAM window ending in a read through
/// a masked, therefore unmapped, address.
fn random_program(rng: &mut StdRng, n: usize) -> String {
    let mut s = String::from(
        ".org 0x08000000\nmain: MOV R0, #0x20000000\nMOV R1, #0x20000040\nMOV R2, #0x20000080\nMOV R3, #0x200000c0\n",
    );
    for r in 4..8 {
        s.push_str(&format!("MOV R{r}, #0x{:x}\n", rng.gen::<u16>()));
    }
    let conds = ["", "", "", "EQ", "NE", "CS", "MI"];
    let mut pushed = 0;
    for _ in 0..n {
        let d = rng.gen_range(4..8);
        let a = rng.gen_range(4..8);
        let b = rng.gen_range(4..8);
        let base = rng.gen_range(0..4);
        let disp = 4 * rng.gen_range(0..12);
        let line = match rng.gen_range(0..12) {
            0 => format!("ADD R{d}, R{a}, R{b}"),
            1 => format!("SUBS R{d}, R{a}, #{}", rng.gen_range(0..9)),
            2 => format!("EOR R{d}, R{a}, #0x{:x}", rng.gen::<u8>()),
            3 => format!("LSL R{d}, R{a}, #{}", rng.gen_range(0..8)),
            4 => format!("CMP R{a}, R{b}"),
            5 => format!("STR{} R{a}, [R{base}, #{disp}]", conds[rng.gen_range(0..conds.len())]),
            6 => format!("LDR{} R{d}, [R{base}, #{disp}]", conds[rng.gen_range(0..conds.len())]),
            7 => format!("STRB R{a}, [R{base}, #{}]", disp + rng.gen_range(0..4)),
            8 => format!("LDRH R{d}, [R{base}, #{}]", disp + 2 * rng.gen_range(0..2)),
            9 => format!("MUL R{d}, R{a}, R{b}"),
            10 if pushed < 4 => {
                pushed += 1;
                format!("PUSH {{R{a}}}")
            }
            10 => {
                pushed -= 1;
                format!("POP {{R{d}}}")
            }
            _ => format!("MOV R{d}, R{a}"),
        };
        s.push_str(&line);
        s.push('\n');
    }
    let k = rng.gen_range(4..8);
    s.push_str(&format!("AND R9, R{k}, #0xfc\nLDR R8, [R9]\n"));
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_programs_match_the_oracle(seed: u64, n in 1usize..80) {
        let mut rng = StdRng::seed_from_u64(seed);
        let src = random_program(&mut rng, n);
        let image = assemble(&src).unwrap();
        let traced = run_traced(&image, &Case::map(), &[], 10_000);
        let a = analyze_full(&image, &traced.footprint, &AnalysisConfig::default()).unwrap();
        let got: BTreeSet<(u64, u32)> = a.taint.occurrences.iter().copied().collect();
        prop_assert_eq!(got, oracle_taint(&traced, &image, 0), "{}", src);
        let bad = soundness_violations(&a.chain, &traced);
        prop_assert!(bad.is_empty(), "{:?}\n{}", bad, src);
        let without = analyze_chain(&traced.footprint, &image, Mode::NoEvents).unwrap();
        let bad = soundness_violations(&without, &traced);
        prop_assert!(bad.is_empty(), "no events: {:?}\n{}", bad, src);
    }
}
