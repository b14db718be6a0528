use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tpa_core::attention::causal_mask;
use tpa_core::sample::{random_block, random_matrix};
use tpa_core::{
    dense_decode, flash_decode, flash_decode_parallel, specialized_full_attention, DenseKvCache,
    FactorizedKvCache, NoCount, Query, TpaConfig,
};

const HEADS: usize = 32;
const DIM: usize = 64;

fn fill(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tpa_cache(cfg: &TpaConfig, m: usize, rng: &mut ChaCha8Rng) -> FactorizedKvCache {
    let (rk, rv) = (cfg.rank_k, cfg.rank_v);
    FactorizedKvCache::from_parts(
        cfg,
        m,
        fill(m * rk * HEADS, rng),
        fill(m * rk * DIM, rng),
        fill(m * rv * HEADS, rng),
        fill(m * rv * DIM, rng),
    )
    .unwrap()
}

fn decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = TpaConfig::new(HEADS * DIM, HEADS, DIM, 16, 1, 1);
    let mut group = c.benchmark_group("decode");
    group.sample_size(20);
    for log2 in [10, 12, 14] {
        let m = 1usize << log2;
        group.throughput(Throughput::Elements(m as u64));
        let cache = tpa_cache(&cfg, m, &mut rng);
        let q = Query::Factored(random_block(16, HEADS, DIM, &mut rng));
        group.bench_with_input(BenchmarkId::new("tpa", m), &m, |b, _| {
            b.iter(|| black_box(flash_decode(&q, &cache, 64).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("tpa-2-threads", m), &m, |b, _| {
            b.iter(|| black_box(flash_decode_parallel(&q, &cache, 64, 2, None).unwrap()))
        });

        let mut dense = DenseKvCache::with_capacity(HEADS, DIM, DIM, m).unwrap();
        for _ in 0..m {
            dense
                .append(
                    &random_matrix(HEADS, DIM, &mut rng),
                    &random_matrix(HEADS, DIM, &mut rng),
                )
                .unwrap();
        }
        let qd = random_matrix(HEADS, DIM, &mut rng);
        group.bench_with_input(BenchmarkId::new("mha", m), &m, |b, _| {
            b.iter(|| black_box(dense_decode(&qd, &dense, &mut NoCount).unwrap()))
        });
    }
    group.finish();
}

fn block_size(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = TpaConfig::new(HEADS * DIM, HEADS, DIM, 16, 1, 1);
    let m = 1 << 13;
    let cache = tpa_cache(&cfg, m, &mut rng);
    let q = Query::Factored(random_block(16, HEADS, DIM, &mut rng));
    let mut group = c.benchmark_group("block_size");
    group.sample_size(20);
    for bs in [1, 16, 64, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(bs), &bs, |b, &bs| {
            b.iter(|| black_box(flash_decode(&q, &cache, bs).unwrap()))
        });
    }
    group.finish();
}

fn full_sequence(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, d) = (8, 32);
    let mut group = c.benchmark_group("specialized_full");
    group.sample_size(10);
    for t in [128, 512] {
        let q: Vec<Query> = (0..t)
            .map(|_| Query::Factored(random_block(8, h, d, &mut rng)))
            .collect();
        let k: Vec<_> = (0..t).map(|_| random_block(2, h, d, &mut rng)).collect();
        let v: Vec<_> = (0..t).map(|_| random_block(2, h, d, &mut rng)).collect();
        let mask = causal_mask(t, t);
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, _| {
            b.iter(|| black_box(specialized_full_attention(&q, &k, &v, &mask, 64).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, decode, block_size, full_sequence);
criterion_main!(benches);
