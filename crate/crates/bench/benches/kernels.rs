use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pcinterp::kernels::{fps, knn};
use pcinterp::metrics::{chamfer, emd_approx, emd_exact};
use pcinterp::oracle::random_points;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [256, 1024, 4096] {
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        c.bench_with_input(BenchmarkId::new("knn_k8", n), &n, |bch, _| bch.iter(|| knn(&a, &b, 8).unwrap()));
        c.bench_with_input(BenchmarkId::new("fps_quarter", n), &n, |bch, _| bch.iter(|| fps(&a, n / 4, 0).unwrap()));
        c.bench_with_input(BenchmarkId::new("chamfer", n), &n, |bch, _| bch.iter(|| chamfer(&a, &b).unwrap()));
    }
    let mut g = c.benchmark_group("emd");
    g.sample_size(10);
    for n in [64, 256, 1024] {
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        g.bench_with_input(BenchmarkId::new("exact", n), &n, |bch, _| bch.iter(|| emd_exact(&a, &b).unwrap()));
        g.bench_with_input(BenchmarkId::new("approx", n), &n, |bch, _| bch.iter(|| emd_approx(&a, &b, None).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
