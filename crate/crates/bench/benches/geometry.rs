use boxdenoise3d_core::geom::{iou_3d, iou_bev};
use boxdenoise3d_core::{Box3D, Vec3};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pairs(n: usize) -> Vec<(Box3D, Box3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|_| {
            let cx = rng.gen_range(-10.0..10.0);
            let cz = rng.gen_range(8.0..50.0);
            let a = Box3D::new(
                0,
                Vec3::new(cx, 0.8, cz),
                (1.5, 1.63, 3.9),
                rng.gen_range(-3.1..3.1),
                0.9,
            );
            let b = Box3D::new(
                0,
                Vec3::new(cx + rng.gen_range(-2.0..2.0), 0.8, cz + rng.gen_range(-2.0..2.0)),
                (1.45, 1.7, 4.1),
                rng.gen_range(-3.1..3.1),
                0.9,
            );
            (a, b)
        })
        .collect()
}

fn bench_iou(c: &mut Criterion) {
    let pairs = random_pairs(256);
    c.bench_function("iou_3d_256_pairs", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for (x, y) in &pairs {
                acc += iou_3d(black_box(x), black_box(y));
            }
            acc
        })
    });
    c.bench_function("iou_bev_256_pairs", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for (x, y) in &pairs {
                acc += iou_bev(black_box(x), black_box(y));
            }
            acc
        })
    });
}

criterion_group!(benches, bench_iou);
criterion_main!(benches);
