use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pccs::data::Sample;
use pccs::geometry::{Provenance, SegMask, SignedDistanceMap};
use pccs::metrics::image_metrics;
use pccs::model::{NetConfig, Network};
use pccs::parallel::{par_map, seq_map};
use pccs::trainer::predict;

fn blobs(seed: u64, size: usize) -> SegMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; size * size];
    for _ in 0..3 {
        let (cy, cx, r) = (
            rng.gen_range(0..size),
            rng.gen_range(0..size),
            rng.gen_range(3..size / 3),
        );
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y.abs_diff(cy), x.abs_diff(cx));
                if dy * dy + dx * dx <= r * r {
                    labels[y * size + x] = 1;
                }
            }
        }
    }
    SegMask::new(size, size, 2, labels, Provenance::GroundTruth).unwrap()
}

fn distance_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("distance_maps");
    for size in [64, 128] {
        let masks: Vec<SegMask> = (0..32).map(|s| blobs(s, size)).collect();
        group.bench_with_input(BenchmarkId::new("seq", size), &masks, |b, m| {
            b.iter(|| seq_map(black_box(m), SignedDistanceMap::from_mask))
        });
        group.bench_with_input(BenchmarkId::new("par", size), &masks, |b, m| {
            b.iter(|| par_map(black_box(m), SignedDistanceMap::from_mask))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let net = Network::new(
        NetConfig {
            num_classes: 2,
            widths: vec![8, 16, 32, 32],
            fused_dim: 32,
        },
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Sample> = (0..16)
        .map(|i| {
            let mask = blobs(100 + i, 64);
            let image = mask
                .labels()
                .iter()
                .map(|&l| f64::from(l) + rng.gen_range(-0.5..0.5))
                .collect();
            Sample {
                id: format!("b{i}"),
                h: 64,
                w: 64,
                image,
                mask: Some(mask),
            }
        })
        .collect();
    let score =
        |s: &Sample| image_metrics(&predict(&net, s).unwrap(), s.mask.as_ref().unwrap()).unwrap();
    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| seq_map(black_box(&samples), score)));
    group.bench_function("par", |b| b.iter(|| par_map(black_box(&samples), score)));
    group.finish();
}

criterion_group!(benches, distance_maps, evaluation);
criterion_main!(benches);
