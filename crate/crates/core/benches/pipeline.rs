use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use rca_core::corpus::{ground_truth_corpus, scaling_case, Case, Collected};
use rca_core::microvm::{NullObserver, Vm};
use rca_core::pipeline::{analyze, analyze_batch, AnalysisConfig, Job};
use rca_core::Parallelism;

fn batch(c: &mut Criterion) {
    // Corpus plus a few long traces so there is real work to spread.
    let mut cases = ground_truth_corpus();
    cases.extend([20_000, 30_000, 40_000].map(scaling_case));
    let collected: Vec<Collected> = cases.iter().map(Case::collect).collect();
    let jobs: Vec<Job<'_>> = collected
        .iter()
        .map(|c| Job {
            image: &c.image,
            footprint: &c.run.footprint,
            config: AnalysisConfig::default(),
        })
        .collect();
    let mut g = c.benchmark_group("batch");
    g.throughput(Throughput::Elements(jobs.len() as u64));
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}").to_lowercase()), |b| {
            b.iter(|| analyze_batch(&jobs, mode))
        });
    }
    g.finish();
}

fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("analyze");
    g.sample_size(10);
    for n in [10_000u32, 20_000, 40_000, 80_000] {
        let col = scaling_case(n).collect();
        g.throughput(Throughput::Elements(col.run.footprint.actions.len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &col, |b, col| {
            b.iter(|| analyze(&col.image, &col.run.footprint, &AnalysisConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn collection(c: &mut Criterion) {
    let case = scaling_case(80_000);
    let image = case.image();
    let map = Case::map();
    let vm = Vm::new(&image, &map).unwrap();
    let mut g = c.benchmark_group("collect");
    g.sample_size(10);
    for record in [false, true] {
        let name = if record { "events" } else { "silent" };
        g.bench_function(name, |b| {
            b.iter(|| {
                vm.run_observed(&case.stimulus, case.max_steps, record, &mut NullObserver)
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, batch, scaling, collection);
criterion_main!(benches);
