use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpa_core::attention::{attention_reference, HeadTensor};
use tpa_core::kv_cache::numbers_per_token;
use tpa_core::linalg::softmax_lse;
use tpa_core::rope::DEFAULT_BASE;
use tpa_core::sample::random_matrix;
use tpa_core::{
    compute_factors, gqa_as_tpa, grouped_attention_native, materialized_forward, mha_as_tpa,
    mqa_as_tpa, GroupedWeights, RopeTable,
};

fn inputs(t: usize, d: usize, seed: u64) -> tpa_core::Matrix {
    random_matrix(t, d, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn mha_forward_matches_native() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = GroupedWeights::random(8, 4, 4, 6, &mut rng);
    let tpa = mha_as_tpa(&w).unwrap();
    let rope = RopeTable::new(6, DEFAULT_BASE).unwrap();
    for t in [1, 5, 32] {
        let xs = inputs(t, 8, t as u64);
        for (rope, causal) in [(None, true), (Some(&rope), true), (Some(&rope), false)] {
            let native = grouped_attention_native(&w, &xs, rope, causal).unwrap();
            let ours = materialized_forward(&tpa, &xs, rope, causal).unwrap();
            assert!(native.max_abs_diff(&ours) < 1e-12, "T={t}");
        }
    }
}

#[test]
fn zero_input_gives_zero_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = GroupedWeights::random(5, 2, 2, 4, &mut rng);
    let f = compute_factors(&mha_as_tpa(&w).unwrap(), &[0.0; 5]).unwrap();
    assert!(f.q.materialize().as_slice().iter().all(|&x| x == 0.0));
    assert!(f.k.materialize().as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_slices_give_raw_inputs() {
    // h=2, d_model=4, d_h=2, W_i picks coordinates 2i..2i+2.
    let pick =
        |i: usize| tpa_core::Matrix::from_fn(4, 2, |r, c| if r == 2 * i + c { 1.0 } else { 0.0 });
    let w = GroupedWeights {
        w_q: vec![pick(0), pick(1)],
        w_k: vec![pick(0), pick(1)],
        w_v: vec![pick(0), pick(1)],
        w_o: tpa_core::Matrix::identity(4),
    };
    let tpa = mha_as_tpa(&w).unwrap();
    let x = [1.0, 2.0, 3.0, 4.0];
    let q = compute_factors(&tpa, &x).unwrap().q.materialize();
    assert_eq!(q.row(0), &[1.0, 2.0]);
    assert_eq!(q.row(1), &[3.0, 4.0]);
}

#[test]
fn mqa_forward_matches_native() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = GroupedWeights::random(7, 3, 1, 4, &mut rng);
    let tpa = mqa_as_tpa(&w).unwrap();
    let rope = RopeTable::new(4, DEFAULT_BASE).unwrap();
    let xs = inputs(20, 7, 4);
    let native = grouped_attention_native(&w, &xs, Some(&rope), true).unwrap();
    let ours = materialized_forward(&tpa, &xs, Some(&rope), true).unwrap();
    assert!(native.max_abs_diff(&ours) < 1e-12);
    assert_eq!(numbers_per_token(&tpa.cfg), 2 * (3 + 4));
}

#[test]
fn gqa_forward_matches_native() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = GroupedWeights::random(8, 4, 2, 4, &mut rng);
    let tpa = gqa_as_tpa(&w).unwrap();
    let rope = RopeTable::new(4, DEFAULT_BASE).unwrap();
    let xs = inputs(6, 8, 6);
    let native = grouped_attention_native(&w, &xs, Some(&rope), true).unwrap();
    let ours = materialized_forward(&tpa, &xs, Some(&rope), true).unwrap();
    assert!(native.max_abs_diff(&ours) < 1e-12);
}

#[test]
fn gqa_boundaries_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs = inputs(9, 6, 8);
    let full = GroupedWeights::random(6, 4, 4, 2, &mut rng);
    let a = materialized_forward(&gqa_as_tpa(&full).unwrap(), &xs, None, true).unwrap();
    let b = materialized_forward(&mha_as_tpa(&full).unwrap(), &xs, None, true).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let one = GroupedWeights::random(6, 4, 1, 2, &mut rng);
    let ga = gqa_as_tpa(&one).unwrap();
    let ma = mqa_as_tpa(&one).unwrap();
    assert_eq!(ga.key.a.matrix().as_slice(), ma.key.a.matrix().as_slice());
    let a = materialized_forward(&ga, &xs, None, true).unwrap();
    let b = materialized_forward(&ma, &xs, None, true).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouped_constructions_match_native(seed: u64, t in 1usize..33, groups_log in 0u32..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = 1usize << groups_log;
        let w = GroupedWeights::random(6, 4, g, 4, &mut rng);
        let rope = RopeTable::new(4, DEFAULT_BASE).unwrap();
        let xs = random_matrix(t, 6, &mut rng);
        let native = grouped_attention_native(&w, &xs, Some(&rope), true).unwrap();
        let ours = materialized_forward(&gqa_as_tpa(&w).unwrap(), &xs, Some(&rope), true).unwrap();
        prop_assert!(native.max_abs_diff(&ours) < 1e-12);
    }

    #[test]
    fn outputs_lie_in_value_hull(seed: u64, t in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| HeadTensor::new(t, 2, 3, random_matrix(1, t * 6, rng).into_vec()).unwrap();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let out = attention_reference(&q, &k, &v, true).unwrap();
        for i in 0..t {
            for h in 0..2 {
                let logits: Vec<f64> = (0..=i)
                    .map(|s| tpa_core::linalg::dot(q.vector(i, h), k.vector(s, h)) / 3f64.sqrt())
                    .collect();
                let (p, _) = softmax_lse(&logits, None).unwrap();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for e in 0..3 {
                    let combo: f64 = p.iter().enumerate().map(|(s, w)| w * v.vector(s, h)[e]).sum();
                    prop_assert!((combo - out.vector(i, h)[e]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_output_ignores_future(seed: u64, t in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cut = rng.random_range(0..t - 1);
        let mk = |rng: &mut ChaCha8Rng| HeadTensor::new(t, 2, 2, random_matrix(1, t * 4, rng).into_vec()).unwrap();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let mut k2 = k.as_slice().to_vec();
        let mut v2 = v.as_slice().to_vec();
        for x in &mut k2[(cut + 1) * 4..] { *x = rng.random_range(-5.0..5.0); }
        for x in &mut v2[(cut + 1) * 4..] { *x = rng.random_range(-5.0..5.0); }
        let a = attention_reference(&q, &k, &v, true).unwrap();
        let b = attention_reference(&q, &HeadTensor::new(t, 2, 2, k2).unwrap(), &HeadTensor::new(t, 2, 2, v2).unwrap(), true).unwrap();
        for i in 0..=cut {
            prop_assert_eq!(a.token(i), b.token(i));
        }
    }
}
