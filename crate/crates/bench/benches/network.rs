use boxdenoise3d_core::net::model::{forward_values, ModelConfig, ModelParams, SceneInputs};
use boxdenoise3d_core::net::tensor::Tensor;
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(cfg: &ModelConfig, n: usize) -> SceneInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = |shape: &[usize]| {
        let total: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    SceneInputs {
        geo: t(&[n, 29]),
        pt: t(&[n, 9, cfg.channels]),
        roi: t(&[n, cfg.roi_input_dim()]),
    }
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig {
        hidden_dim: 64,
        channels: 16,
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, 1).unwrap();
    for n in [25usize, 100] {
        let scene = inputs(&cfg, n);
        c.bench_function(&format!("forward_n{n}_d64"), |b| {
            b.iter(|| forward_values(black_box(&params), &cfg, &scene).unwrap())
        });
    }
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
