//! Parallel vs sequential comparison for the batch-parallel kernels. The
//! sequential path is the same code routed through `force_sequential`, so
//! the two series measure rayon dispatch against plain loops on identical
//! work.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpt_core::parallel::force_sequential;
use vpt_core::{Graph, Tensor};

fn conv_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::uniform(&[16, 16, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 16, 3, 3], -0.3, 0.3, &mut rng);
    let b = Tensor::uniform(&[32], -0.1, 0.1, &mut rng);

    let mut group = c.benchmark_group("conv2d_forward_batch16");
    for (label, seq) in [("parallel", false), ("sequential", true)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &seq, |bench, &seq| {
            force_sequential(seq);
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), false);
                let wv = g.leaf(w.clone(), false);
                let bv = g.leaf(b.clone(), false);
                g.conv2d(xv, wv, bv, 1, 1).unwrap()
            });
            force_sequential(false);
        });
    }
    group.finish();
}

fn conv_backward_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = Tensor::uniform(&[8, 8, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[16, 8, 3, 3], -0.3, 0.3, &mut rng);
    let b = Tensor::uniform(&[16], -0.1, 0.1, &mut rng);

    let mut group = c.benchmark_group("conv2d_train_step_batch8");
    for (label, seq) in [("parallel", false), ("sequential", true)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &seq, |bench, &seq| {
            force_sequential(seq);
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.leaf(w.clone(), true);
                let bv = g.leaf(b.clone(), true);
                let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
                let r = g.relu(y);
                let s = g.sum(r);
                g.backward(s).unwrap();
                g.grad(wv).unwrap().data()[0]
            });
            force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, conv_batch, conv_backward_batch);
criterion_main!(benches);
