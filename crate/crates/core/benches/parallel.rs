//! Sequential vs. rayon execution on the corpus-scale hot paths:
//! wireframe rendering and the overlap/alignment metrics.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layoutgen::exec::Parallelism;
use layoutgen::layout::Layout;

fn sample_layouts(count: usize) -> Vec<Layout> {
    use layoutgen::corpus::synth::{synthesize_corpus, SynthConfig};
    let cfg = SynthConfig::default();
    synthesize_corpus(&cfg, count, 0xBE7C4)
        .into_iter()
        .map(|r| r.layout)
        .collect()
}

fn bench_render(c: &mut Criterion) {
    use layoutgen::render::{render_wireframe, RenderConfig};
    let layouts = sample_layouts(64);
    let cfg = RenderConfig { width: 128, height: 128, ..RenderConfig::default() };
    let mut group = c.benchmark_group("render_wireframes");
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| {
                layoutgen::exec::map_items(mode, &layouts, |l| {
                    render_wireframe(l, 3, &cfg).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    use layoutgen::metrics::{alignment, overlap};
    let layouts = sample_layouts(256);
    let mut group = c.benchmark_group("overlap_alignment");
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| {
                let o = overlap(&layouts, mode);
                let a = alignment(&layouts, mode);
                (o, a)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_metrics);
criterion_main!(benches);
