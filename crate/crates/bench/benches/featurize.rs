use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posh::{build_graph, RunConfig};
use posh_bench::chains;

fn featurize(c: &mut Criterion) {
    let fc = RunConfig::default().featurize_config().unwrap();
    let mut g = c.benchmark_group("build_graph");
    for len in [64usize, 256] {
        let chain = chains(1, len).pop().unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(len), &chain, |b, ch| b.iter(|| build_graph(ch, &fc).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, featurize);
criterion_main!(benches);
