use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posh::sampling::precompute_min_length;
use posh::{kabsch, tm_fragment};
use posh_bench::chains;

fn tmscore(c: &mut Criterion) {
    let mut g = c.benchmark_group("tmscore");
    for len in [60usize, 200] {
        let ch = chains(1, len).pop().unwrap();
        g.bench_with_input(BenchmarkId::new("fragment_half", len), &ch, |b, ch| b.iter(|| tm_fragment(ch, len / 4, len / 2).unwrap()));
        let ca = ch.ca_coords();
        g.bench_with_input(BenchmarkId::new("kabsch", len), &ca, |b, ca| b.iter(|| kabsch(ca, ca).unwrap()));
    }
    let ch = chains(1, 80).pop().unwrap();
    g.sample_size(10);
    g.bench_function("min_length_80", |b| b.iter(|| precompute_min_length(&ch, 0.9).unwrap()));
    g.finish();
}

criterion_group!(benches, tmscore);
criterion_main!(benches);
