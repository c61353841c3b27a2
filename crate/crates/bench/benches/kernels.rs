use criterion::{criterion_group, criterion_main, Criterion};
use dgae_core::nn::{Graph, Tensor};
use dgae_core::rng::Rng;

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(0, 0);
    let x: Tensor<f32> = rng.normal_tensor(&[16, 32, 16, 16]);
    let w: Tensor<f32> = rng.normal_tensor(&[32, 32, 3, 3]);
    c.bench_function("conv2d 16x32x16x16 k3 fwd", |b| {
        b.iter(|| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            g.conv2d(xv, wv, None, 1, 1).unwrap()
        })
    });
    c.bench_function("conv2d 16x32x16x16 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = g.sum_squares(y);
            g.backward(l).unwrap()
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = Rng::new(1, 0);
    let qkv: Tensor<f32> = rng.normal_tensor(&[16, 3 * 64, 8, 8]);
    c.bench_function("attention 16x64x8x8 4 heads fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v = g.variable(qkv.clone());
            let y = g.attention(v, 4).unwrap();
            let l = g.sum_squares(y);
            g.backward(l).unwrap()
        })
    });
}

criterion_group!(benches, conv, attention);
criterion_main!(benches);
