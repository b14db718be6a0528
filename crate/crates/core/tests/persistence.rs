use std::fs::File;
use std::io::{BufReader, BufWriter};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpa_core::io::{read_cache, read_header, read_weights, write_cache, write_weights};
use tpa_core::rope::DEFAULT_BASE;
use tpa_core::sample::random_matrix;
use tpa_core::{
    bytes_per_token, compute_factors, decode_loop, flash_decode, rope_for, FactorWeights,
    FactorizedKvCache, TpaConfig, Variant,
};

fn bits(m: &tpa_core::Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn weights_round_trip_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        TpaConfig::new(10, 3, 4, 2, 1, 1),
        TpaConfig::new(10, 3, 4, 2, 1, 1).with_variant(Variant::KvOnly),
        TpaConfig::new(10, 3, 4, 2, 2, 1).with_variant(Variant::NonContextualA),
        TpaConfig::new(10, 3, 4, 2, 2, 1).with_variant(Variant::NonContextualB),
        TpaConfig::new(10, 3, 4, 2, 2, 2).with_variant(Variant::SharedB),
        TpaConfig::new(10, 3, 8, 2, 2, 2).third_order(4, 2),
    ];
    let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
    for (i, cfg) in configs.iter().enumerate() {
        let w = FactorWeights::init(cfg, i as u64).unwrap();
        let path = dir.path().join(format!("w{i}.bin"));
        write_weights(BufWriter::new(File::create(&path).unwrap()), &w).unwrap();
        let back = read_weights(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(back.cfg, w.cfg);
        assert_eq!(back.shares_b(), w.shares_b());
        let (a, b) = (
            compute_factors(&w, &x).unwrap(),
            compute_factors(&back, &x).unwrap(),
        );
        assert_eq!(a, b);
        assert_eq!(bits(&back.w_o), bits(&w.w_o));
    }
}

#[test]
fn shared_b_is_stored_once() {
    let w = FactorWeights::init(
        &TpaConfig::new(6, 2, 4, 1, 2, 2).with_variant(Variant::SharedB),
        1,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_weights(&mut buf, &w).unwrap();
    let header = read_header(&buf[..]).unwrap();
    let vb = header.tensors.iter().find(|t| t.name == "v.b").unwrap();
    let kb = header.tensors.iter().find(|t| t.name == "k.b").unwrap();
    assert_eq!(vb.alias_of.as_deref(), Some("k.b"));
    assert_eq!(vb.offset, kb.offset);
}

#[test]
fn cache_snapshot_reproduces_decode() {
    let cfg = TpaConfig::new(8, 4, 8, 4, 2, 1);
    let w = FactorWeights::init(&cfg, 3).unwrap();
    let rope = rope_for(&w, DEFAULT_BASE).unwrap();
    let xs = random_matrix(40, 8, &mut ChaCha8Rng::seed_from_u64(3));
    let run = decode_loop(&xs, &w, &rope, 8).unwrap();
    let mut buf = Vec::new();
    write_cache(&mut buf, &run.cache).unwrap();
    let back = read_cache(&buf[..]).unwrap();
    assert_eq!(back, run.cache);
    let (q, _, _) = tpa_core::prepare_token(&w, xs.row(39), 39, &rope).unwrap();
    assert_eq!(
        bits(&flash_decode(&q, &back, 8).unwrap()),
        bits(&run.outputs[39])
    );
}

#[test]
fn accounting_is_exact_up_to_large_m() {
    let cfg = TpaConfig::new(2, 32, 64, 16, 1, 1);
    let per = bytes_per_token(&cfg, 2);
    assert_eq!(per, 384);
    let table = tpa_core::RopeTable::new(64, DEFAULT_BASE).unwrap();
    let mut cache = FactorizedKvCache::with_capacity(&cfg, 100_000).unwrap();
    let k = tpa_core::FactorBlock::new(
        tpa_core::Matrix::zeros(1, 32),
        tpa_core::Matrix::zeros(1, 64),
    )
    .unwrap();
    for t in 0..100_000 {
        cache
            .append(&tpa_core::pre_rotate_key(&k, t, &table).unwrap(), &k)
            .unwrap();
        if t % 9_999 == 0 {
            assert_eq!(cache.logical_bytes(2), per * (t + 1));
        }
    }
    assert_eq!(cache.logical_bytes(2), per * 100_000);
    assert_eq!(cache.logical_bytes(8), bytes_per_token(&cfg, 8) * 100_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_weights_round_trip(seed: u64, h in 1usize..5, half in 1usize..5, r in 1usize..4) {
        let cfg = TpaConfig::new(5, h, 2 * half, r, r, r);
        let w = FactorWeights::init(&cfg, seed).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        let back = read_weights(&buf[..]).unwrap();
        let mut again = Vec::new();
        write_weights(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
    }
}
