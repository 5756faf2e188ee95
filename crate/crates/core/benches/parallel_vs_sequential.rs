//! Worker pool of one thread against the default pool on the data-parallel
//! kernels. Build with `--no-default-features` for the rayon-free path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cbcnn::cnn::{ArchConfig, Network};
use cbcnn::numerics::{Matrix, RngStream, Tensor3};
use cbcnn::par;
use cbcnn::smote::{self, SmoteConfig};

fn images(n: usize, shape: (usize, usize, usize)) -> Vec<Tensor3> {
    let mut rng = RngStream::new(5);
    (0..n)
        .map(|_| {
            let len = shape.0 * shape.1 * shape.2;
            Tensor3::from_data(shape.0, shape.1, shape.2, (0..len).map(|_| rng.unit()).collect()).unwrap()
        })
        .collect()
}

fn kernels(c: &mut Criterion) {
    let shape = (16, 16, 6);
    let net = Network::new(shape, ArchConfig::default().layers(), &RngStream::new(1)).unwrap();
    let batch = images(20, shape);
    let mut rng = RngStream::new(2);
    let minority = Matrix::new(200, 60, (0..12_000).map(|_| rng.normal()).collect()).unwrap();
    let smote_cfg = SmoteConfig::default();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (label, jobs) in [("sequential", 1), ("parallel", 0)] {
        group.bench_function(BenchmarkId::new("batch_backward", label), |b| {
            b.iter(|| par::with_jobs(jobs, || par::map(&batch, |x| net.backward(x, 1).unwrap().0)))
        });
        group.bench_function(BenchmarkId::new("score_batch", label), |b| {
            b.iter(|| par::with_jobs(jobs, || net.score_batch(&batch).unwrap()))
        });
        group.bench_function(BenchmarkId::new("smote_generate", label), |b| {
            b.iter(|| par::with_jobs(jobs, || smote::generate(&minority, &smote_cfg, 2000, &RngStream::new(3)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
