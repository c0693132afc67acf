use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use factorcodec::audio::{compute_mel_batch, AudioBuffer, MelConfig};
use factorcodec::par::Exec;
use factorcodec::quant::nearest_indices;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn vq_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (k, dim, n) = (256, 64, 2000);
    let entries: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut group = c.benchmark_group("vq_search");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| nearest_indices(black_box(&entries), dim, black_box(&data), exec))
        });
    }
    group.finish();
}

fn mel_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clips: Vec<AudioBuffer> = (0..8)
        .map(|_| AudioBuffer::new((0..16_000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap())
        .collect();
    let cfg = MelConfig::default();
    let mut group = c.benchmark_group("mel_batch");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| compute_mel_batch(black_box(&clips), &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, vq_search, mel_batch);
criterion_main!(benches);
