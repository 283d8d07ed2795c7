//! Sequential vs rayon kernels on the shapes the training loop actually
//! hits. The two paths are bitwise identical by construction; these benches
//! show what the `parallel` feature buys on each hot spot.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use exgrg_core::dense::{
    gram_into_par, gram_into_seq, matmul_into_par, matmul_into_seq, pairwise_sqdist_par,
    pairwise_sqdist_seq, Mat,
};
use exgrg_core::graph::generate_sbm;
use exgrg_core::nn::{encoder_forward, normalize_adjacency, Activation, Encoder, Features, Norm};
use exgrg_core::relgraph::{f_k_rowwise, similarity_matrix, Metric};
use exgrg_core::sparse::{csr_matmul_dense_into_par, csr_matmul_dense_into_seq, CsrMatrix, SparseOperand};

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| next()).collect())
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_512x512x512");
    let a = rand_mat(512, 512, 1);
    let b = rand_mat(512, 512, 2);
    let mut out = Mat::zeros(512, 512);
    group.bench_function(BenchmarkId::new("seq", 512), |bench| {
        bench.iter(|| matmul_into_seq(&mut out, &a, &b))
    });
    group.bench_function(BenchmarkId::new("par", 512), |bench| {
        bench.iter(|| matmul_into_par(&mut out, &a, &b))
    });
    group.finish();
}

fn bench_pairwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_sqdist_512x128");
    let x = rand_mat(512, 128, 3);
    group.bench_function("seq", |bench| bench.iter(|| pairwise_sqdist_seq(&x)));
    group.bench_function("par", |bench| bench.iter(|| pairwise_sqdist_par(&x)));
    group.finish();
}

fn bench_gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram_512x128");
    let x = rand_mat(512, 128, 4);
    let mut out = Mat::zeros(512, 512);
    group.bench_function("seq", |bench| bench.iter(|| gram_into_seq(&mut out, &x, &x)));
    group.bench_function("par", |bench| bench.iter(|| gram_into_par(&mut out, &x, &x)));
    group.finish();
}

fn bench_spmv(c: &mut Criterion) {
    let g = generate_sbm(8, 128, 0.05, 0.005, 4, 9).unwrap();
    let dense = rand_mat(g.num_nodes, 128, 5);
    let mut out = Mat::zeros(g.num_nodes, 128);
    let csr = g.adjacency.clone();
    let mut group = c.benchmark_group("csr_matmul_1024n_x128");
    group.bench_function("seq", |bench| {
        bench.iter(|| csr_matmul_dense_into_seq(&mut out, &csr, &dense))
    });
    group.bench_function("par", |bench| {
        bench.iter(|| csr_matmul_dense_into_par(&mut out, &csr, &dense))
    });
    group.finish();
}

fn bench_knn_pipeline(c: &mut Criterion) {
    let h = rand_mat(512, 128, 6);
    let mut group = c.benchmark_group("similarity_topk_512");
    group.bench_function("cosine_topk32", |bench| {
        bench.iter(|| {
            let s = similarity_matrix(&h, Metric::Cosine);
            f_k_rowwise(&s, 32)
        })
    });
    group.finish();
}

fn bench_encoder_forward(c: &mut Criterion) {
    let g = generate_sbm(4, 256, 0.02, 0.002, 64, 11).unwrap();
    let norm = normalize_adjacency(&g.adjacency);
    let x = SparseOperand::new(CsrMatrix::from_dense(&g.features));
    let mut rng = exgrg_core::rng::seeded(0, "bench", 0);
    let encoder = Encoder::new(&[64, 256, 128], Activation::Prelu, Norm::Batch, &mut rng);
    c.bench_function("encoder_forward_1024n", |bench| {
        bench.iter(|| {
            let mut tape = exgrg_core::autodiff::Tape::new();
            let staged = encoder.stage(&mut tape, false);
            encoder_forward(&mut tape, &staged.layers, &norm, Features::Sparse(&x)).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_pairwise,
    bench_gram,
    bench_spmv,
    bench_knn_pipeline,
    bench_encoder_forward
);
criterion_main!(benches);
