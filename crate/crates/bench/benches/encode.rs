use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posh::encoder::forward_batch;
use posh::neural::Tape;
use posh::objective::total_loss;
use posh::{build_graph, encode, init_params, Mode, RunConfig};
use posh_bench::chains;

fn encode_one(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let fc = cfg.featurize_config().unwrap();
    let enc = init_params::<f32>(&cfg.encoder_config(), 1).unwrap();
    let mut g = c.benchmark_group("encode");
    g.sample_size(20);
    for len in [64usize, 256] {
        let graph = build_graph(&chains(1, len).pop().unwrap(), &fc).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(len), &graph, |b, gr| b.iter(|| encode(gr, &enc, Mode::Infer).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig { hidden: 64, n_layers: 3, code_length: 64, negatives: 16, k_nn: 16, ..RunConfig::default() };
    let fc = cfg.featurize_config().unwrap();
    let enc = init_params::<f32>(&cfg.encoder_config(), 1).unwrap();
    let graphs: Vec<_> = chains(18, 60).iter().map(|ch| build_graph(ch, &fc).unwrap()).collect();
    let refs: Vec<_> = graphs.iter().collect();
    let loss_cfg = cfg.loss_config();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    g.bench_function("batch18_len60", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let fwd = forward_batch(&mut tape, &enc, &refs, Mode::Train).unwrap();
            let loss = total_loss(&mut tape, fwd.y, &loss_cfg).unwrap();
            tape.backward(loss.total).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, encode_one, train_step);
criterion_main!(benches);
