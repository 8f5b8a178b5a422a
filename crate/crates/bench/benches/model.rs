use criterion::{criterion_group, criterion_main, Criterion};
use pcinterp::config::ModelConfig;
use pcinterp::losses::LossWeights;
use pcinterp::model::FastPci;
use pcinterp::params::ParamStore;
use pcinterp::synth::{dataset, SceneTemplate};
use pcinterp::train::sample_gradients;

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let ds = dataset(0, 1, 1, &SceneTemplate::default()).unwrap();
    let seq = ds.train_iter().next().unwrap().unwrap();
    let mut store = ParamStore::<f32>::new();
    let m = FastPci::new(&mut store, &cfg, 0).unwrap();
    let mut g = c.benchmark_group("model_l1024");
    g.sample_size(10);
    g.bench_function("interpolate", |b| {
        b.iter(|| m.interpolate(&store, &seq.frames[0], &seq.frames[4], 0.5, 0).unwrap())
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| sample_gradients(&m, &store, &seq, 0.5, 0, &LossWeights::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
