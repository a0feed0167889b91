use std::hint::black_box;

use clear_core::audit::{audit_all, AuditConfig};
use clear_core::latent::{pca_fit, EmbeddingStore, Metric};
use clear_core::matrix::Matrix;
use clear_core::rng::Rng;
use clear_core::scarf::{encode, info_nce_with_grad, EncoderWeights, ScarfConfig};
use clear_core::tabular::BerLevel;
use clear_core::trees::{fit_tree, TreeParams};
use criterion::{criterion_group, criterion_main, Criterion};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn store(n: usize) -> EmbeddingStore {
    let mut rng = Rng::new(3);
    let ids = (0..n).map(|i| format!("B{i:05}")).collect();
    let labels = (0..n).map(|_| BerLevel::from_ordinal(rng.below(15))).collect();
    EmbeddingStore::new(ids, random(n, 32, 4), Some(labels)).unwrap()
}

fn knn(c: &mut Criterion) {
    let s = store(5000);
    c.bench_function("knn k=10 over 5000x32", |b| {
        b.iter(|| s.knn(black_box("B02500"), 10, Metric::Euclidean).unwrap())
    });
    let small = store(2000);
    c.bench_function("audit_all 2000 records", |b| {
        b.iter(|| audit_all(&small, &AuditConfig::default()).unwrap())
    });
}

fn contrastive(c: &mut Criterion) {
    let a = random(16, 32, 1);
    let p = random(16, 32, 2);
    c.bench_function("info_nce with grad, batch 16", |b| {
        b.iter(|| info_nce_with_grad(black_box(&a), black_box(&p), 1.0).unwrap())
    });
    let config = ScarfConfig::default();
    let w = EncoderWeights::init(27, &config, &mut Rng::new(5)).unwrap();
    let x = random(16, 27, 6);
    let xc = random(16, 27, 7);
    c.bench_function("scarf step gradients, batch 16", |b| {
        b.iter(|| w.pair_loss_and_grads(black_box(&x), black_box(&xc), 1.0).unwrap())
    });
    let rows = random(5000, 27, 8);
    c.bench_function("encode 5000 rows", |b| b.iter(|| encode(&w, black_box(&rows)).unwrap()));
}

fn pca(c: &mut Criterion) {
    let m = random(5000, 32, 9);
    c.bench_function("pca 5000x32 to 2", |b| b.iter(|| pca_fit(black_box(&m), 2).unwrap()));
}

fn tree(c: &mut Criterion) {
    let x = random(2000, 20, 10);
    let y: Vec<usize> = x.rows().map(|r| usize::from(r[0] + r[1] > 0.0) + usize::from(r[2] > 0.5)).collect();
    c.bench_function("cart fit 2000x20", |b| {
        b.iter(|| fit_tree(black_box(&x), &y, 3, TreeParams::default()).unwrap())
    });
}

criterion_group!(benches, knn, contrastive, pca, tree);
criterion_main!(benches);
