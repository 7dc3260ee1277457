use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use posh::CodeDatabase;
use posh_bench::random_codes;

fn search(c: &mut Criterion) {
    let mut g = c.benchmark_group("search");
    g.sample_size(20);
    for n in [10_000usize, 100_000] {
        let db = CodeDatabase::build(400, random_codes(n, 400, 1)).unwrap();
        let q = random_codes(1, 400, 2).pop().unwrap();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("top10", n), &db, |b, db| b.iter(|| db.search(&q, 10).unwrap()));
        g.bench_with_input(BenchmarkId::new("top10_parallel", n), &db, |b, db| b.iter(|| db.search_parallel(&q, 10).unwrap()));
    }
    g.finish();
}

fn hamming(c: &mut Criterion) {
    let codes = random_codes(2, 400, 3);
    c.bench_function("hamming_400", |b| b.iter(|| posh::hamming(&codes[0].words, &codes[1].words, 400).unwrap()));
}

criterion_group!(benches, search, hamming);
criterion_main!(benches);
