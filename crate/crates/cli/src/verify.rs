//! Randomized invariant suites, one per module, runnable from the command line.
//!
//! Every property draws from its own generator seeded from the run seed and
//! the property name, so a property's inputs do not depend on which other
//! suites were selected.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tpa_core::attention::{attention_reference, attention_reference_masked, HeadTensor};
use tpa_core::cost::tpa_decode_coeff;
use tpa_core::linalg::{matmul, softmax_lse, MASK_NEG};
use tpa_core::rope::DEFAULT_BASE;
use tpa_core::sample::{random_block, random_matrix, random_vector};
use tpa_core::{
    apply_rope_rows, attention_params, block_forward, block_forward_at, causal_mask,
    compression_ratio, decode_flops, decode_loop, dense_decode, flash_decode,
    flash_decode_parallel, flash_decode_with, gqa_as_tpa, grouped_attention_native,
    higher_order_transform, kv_numbers_per_token, materialize, materialized_forward, mha_as_tpa,
    mqa_as_tpa, pre_rotate_key, prepare_sequence, rope_for, rotate_query,
    specialized_full_attention, specialized_speedup_holds, xavier_bound, xavier_init, BlockWeights,
    DenseKvCache, FactorBlock, FactorWeights, FactorizedKvCache, GroupedWeights, MacCounts, Matrix,
    Mechanism, MechanismSpec, NoCount, Query, RopeTable, TpaConfig, TpaError,
};

/// Suite names accepted by the filter, in run order.
pub const SUITES: &[&str] = &[
    "linalg",
    "factor",
    "rope",
    "attention",
    "kv-cache",
    "flash",
    "cost",
    "block",
];

/// Deliberate faults used to check that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Injection {
    /// Unmask one masked cache position in the kernel under test only.
    CorruptMask,
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::CorruptMask => f.write_str("corrupt-mask"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Suite name fragments; empty selects every suite.
    pub filter: Vec<String>,
    pub inject: Option<Injection>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub trials: usize,
    pub millis: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub filter: Vec<String>,
    pub injected: Option<String>,
    pub suites: Vec<&'static str>,
    pub passed: usize,
    pub failed: usize,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }
}

struct Failure(String);

impl From<TpaError> for Failure {
    fn from(e: TpaError) -> Self {
        Failure(e.to_string())
    }
}

type Check = Result<(), Failure>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(Failure(format!($($fmt)+)));
        }
    };
}

struct Ctx {
    rng: ChaCha8Rng,
    inject: Option<Injection>,
}

struct Property {
    suite: &'static str,
    name: &'static str,
    trials: usize,
    check: fn(&mut Ctx) -> Check,
}

const fn prop(
    suite: &'static str,
    name: &'static str,
    trials: usize,
    check: fn(&mut Ctx) -> Check,
) -> Property {
    Property {
        suite,
        name,
        trials,
        check,
    }
}

const PROPERTIES: &[Property] = &[
    prop("linalg", "matmul_is_associative", 64, matmul_is_associative),
    prop(
        "linalg",
        "softmax_is_shift_invariant",
        64,
        softmax_is_shift_invariant,
    ),
    prop(
        "linalg",
        "transpose_reverses_products",
        64,
        transpose_reverses_products,
    ),
    prop(
        "factor",
        "materialize_matches_outer_sum",
        256,
        materialize_matches_outer_sum,
    ),
    prop(
        "factor",
        "third_order_matches_definition",
        64,
        third_order_matches_definition,
    ),
    prop(
        "factor",
        "xavier_samples_within_bound",
        8,
        xavier_samples_within_bound,
    ),
    prop(
        "rope",
        "rotated_factor_matches_rotated_rows",
        128,
        rotated_factor_matches_rotated_rows,
    ),
    prop(
        "rope",
        "scores_depend_on_offset_only",
        128,
        scores_depend_on_offset_only,
    ),
    prop(
        "rope",
        "higher_order_rotation_through_b",
        32,
        higher_order_rotation_through_b,
    ),
    prop(
        "attention",
        "mha_reduction_matches_native",
        16,
        mha_reduction_matches_native,
    ),
    prop(
        "attention",
        "mqa_reduction_matches_native",
        16,
        mqa_reduction_matches_native,
    ),
    prop(
        "attention",
        "gqa_reduction_matches_native",
        16,
        gqa_reduction_matches_native,
    ),
    prop(
        "attention",
        "causal_outputs_ignore_future",
        32,
        causal_outputs_ignore_future,
    ),
    prop(
        "kv-cache",
        "cached_factors_round_trip",
        32,
        cached_factors_round_trip,
    ),
    prop("kv-cache", "bytes_follow_formula", 32, bytes_follow_formula),
    prop(
        "kv-cache",
        "append_enforces_position",
        16,
        append_enforces_position,
    ),
    prop(
        "flash",
        "flash_matches_reference",
        48,
        flash_matches_reference,
    ),
    prop("flash", "blocking_is_invisible", 48, blocking_is_invisible),
    prop(
        "flash",
        "masked_positions_are_inert",
        48,
        masked_positions_are_inert,
    ),
    prop(
        "flash",
        "parallel_merge_matches_serial",
        32,
        parallel_merge_matches_serial,
    ),
    prop(
        "flash",
        "decode_loop_matches_specialized",
        4,
        decode_loop_matches_specialized,
    ),
    prop(
        "cost",
        "worked_example_coefficients",
        1,
        worked_example_coefficients,
    ),
    prop("cost", "kv_formulas_hold", 256, kv_formulas_hold),
    prop(
        "cost",
        "counters_match_cost_model",
        32,
        counters_match_cost_model,
    ),
    prop(
        "block",
        "zero_sublayers_are_identity",
        8,
        zero_sublayers_are_identity,
    ),
    prop("block", "block_is_causal", 8, block_is_causal),
    prop(
        "block",
        "block_is_shift_invariant",
        8,
        block_is_shift_invariant,
    ),
];

/// Names of every property as `suite/property`.
pub fn property_names() -> Vec<String> {
    PROPERTIES
        .iter()
        .map(|p| format!("{}/{}", p.suite, p.name))
        .collect()
}

fn selected(suite: &str, filter: &[String]) -> bool {
    filter.is_empty() || filter.iter().any(|f| suite.contains(f.as_str()))
}

fn property_seed(seed: u64, suite: &str, name: &str) -> u64 {
    // FNV-1a over the qualified name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in suite.bytes().chain(*b"/").chain(name.bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

pub fn run(opts: &VerifyOptions) -> VerifyReport {
    let mut properties = Vec::new();
    let suites: Vec<&'static str> = SUITES
        .iter()
        .copied()
        .filter(|s| selected(s, &opts.filter))
        .collect();
    for p in PROPERTIES.iter().filter(|p| suites.contains(&p.suite)) {
        let mut ctx = Ctx {
            rng: ChaCha8Rng::seed_from_u64(property_seed(opts.seed, p.suite, p.name)),
            inject: opts.inject,
        };
        let start = Instant::now();
        let mut detail = None;
        for trial in 0..p.trials {
            if let Err(Failure(msg)) = (p.check)(&mut ctx) {
                detail = Some(format!("trial {trial}: {msg}"));
                break;
            }
        }
        properties.push(PropertyResult {
            suite: p.suite,
            property: p.name,
            passed: detail.is_none(),
            trials: p.trials,
            millis: start.elapsed().as_secs_f64() * 1e3,
            detail,
        });
    }
    let failed = properties.iter().filter(|p| !p.passed).count();
    VerifyReport {
        seed: opts.seed,
        filter: opts.filter.clone(),
        injected: opts.inject.map(|i| i.to_string()),
        suites,
        passed: properties.len() - failed,
        failed,
        properties,
    }
}

fn head_tensor(slices: &[Matrix]) -> Result<HeadTensor, Failure> {
    Ok(HeadTensor::from_tokens(slices)?)
}

// linalg

fn matmul_is_associative(c: &mut Ctx) -> Check {
    let (m, k, n, p) = (
        c.rng.random_range(1..8),
        c.rng.random_range(1..8),
        c.rng.random_range(1..8),
        c.rng.random_range(1..8),
    );
    let a = random_matrix(m, k, &mut c.rng);
    let b = random_matrix(k, n, &mut c.rng);
    let d = random_matrix(n, p, &mut c.rng);
    let lhs = matmul(&matmul(&a, &b)?, &d)?;
    let rhs = matmul(&a, &matmul(&b, &d)?)?;
    let diff = lhs.max_abs_diff(&rhs);
    ensure!(diff < 1e-12, "(AB)C vs A(BC) differ by {diff:e}");
    Ok(())
}

fn softmax_is_shift_invariant(c: &mut Ctx) -> Check {
    let n = c.rng.random_range(1..24);
    let logits: Vec<f64> = (0..n).map(|_| c.rng.random_range(-30.0..30.0)).collect();
    let shift = c.rng.random_range(-100.0..100.0);
    let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
    let (p, lse) = softmax_lse(&logits, None)?;
    let (q, lse2) = softmax_lse(&shifted, None)?;
    let diff = tpa_core::linalg::max_abs_diff(&p, &q);
    ensure!(diff < 1e-12, "probabilities moved by {diff:e}");
    ensure!(
        (lse2 - lse - shift).abs() < 1e-10,
        "log-sum-exp did not shift"
    );
    Ok(())
}

fn transpose_reverses_products(c: &mut Ctx) -> Check {
    let (m, k, n) = (
        c.rng.random_range(1..9),
        c.rng.random_range(1..9),
        c.rng.random_range(1..9),
    );
    let a = random_matrix(m, k, &mut c.rng);
    let b = random_matrix(k, n, &mut c.rng);
    let lhs = matmul(&a, &b)?.transpose();
    let rhs = matmul(&b.transpose(), &a.transpose())?;
    ensure!(lhs.max_abs_diff(&rhs) < 1e-13, "(AB)ᵀ != BᵀAᵀ");
    Ok(())
}

// factor

fn materialize_matches_outer_sum(c: &mut Ctx) -> Check {
    let (r, h, d) = (
        c.rng.random_range(1..=4),
        c.rng.random_range(1..=8),
        c.rng.random_range(1..=16),
    );
    let block = random_block(r, h, d, &mut c.rng);
    let expected = Matrix::from_fn(h, d, |i, j| {
        (0..r)
            .map(|k| block.a[(k, i)] * block.b[(k, j)])
            .sum::<f64>()
            / r as f64
    });
    let diff = materialize(&block).max_abs_diff(&expected);
    ensure!(diff < 1e-12, "R={r} h={h} d={d}: deviation {diff:e}");
    Ok(())
}

fn third_order_matches_definition(c: &mut Ctx) -> Check {
    let (r, h, db, dc) = (
        c.rng.random_range(1..4),
        c.rng.random_range(1..6),
        c.rng.random_range(1..5),
        c.rng.random_range(1..4),
    );
    let a = random_matrix(r, h, &mut c.rng);
    let b = random_matrix(r, db, &mut c.rng);
    let cm = random_matrix(r, dc, &mut c.rng);
    let block = FactorBlock::third_order(a.clone(), b.clone(), cm.clone())?;
    let expected = Matrix::from_fn(h, db * dc, |i, col| {
        let (j, k) = (col / db, col % db);
        (0..r)
            .map(|x| a[(x, i)] * cm[(x, j)] * b[(x, k)])
            .sum::<f64>()
            / r as f64
    });
    let diff = block.materialize().max_abs_diff(&expected);
    ensure!(diff < 1e-13, "deviation {diff:e}");
    Ok(())
}

fn xavier_samples_within_bound(c: &mut Ctx) -> Check {
    let (n_in, n_out) = (c.rng.random_range(1..300), c.rng.random_range(1..300));
    let bound = xavier_bound(n_in, n_out);
    ensure!(
        bound == (6.0 / (n_in + n_out) as f64).sqrt(),
        "bound formula"
    );
    let w = xavier_init(n_in, n_out, c.rng.random());
    ensure!(w.shape() == (n_out, n_in), "shape {:?}", w.shape());
    ensure!(
        w.as_slice().iter().all(|x| x.abs() <= bound),
        "sample outside ±{bound}"
    );
    Ok(())
}

// rope

fn rotated_factor_matches_rotated_rows(c: &mut Ctx) -> Check {
    let dim = 2 * c.rng.random_range(1..9);
    let table = RopeTable::new(dim, DEFAULT_BASE)?;
    let t = c.rng.random_range(0..4096);
    let block = random_block(
        c.rng.random_range(1..5),
        c.rng.random_range(1..7),
        dim,
        &mut c.rng,
    );
    let via_factor = rotate_query(&Query::Factored(block.clone()), t, &table)?.materialize();
    let via_rows = apply_rope_rows(&table, t as i64, &block.materialize())?;
    let diff = via_factor.max_abs_diff(&via_rows);
    ensure!(diff < 1e-12, "t={t}: deviation {diff:e}");
    Ok(())
}

fn scores_depend_on_offset_only(c: &mut Ctx) -> Check {
    let table = RopeTable::new(8, DEFAULT_BASE)?;
    let (t, s) = (
        c.rng.random_range(0..=1024i64),
        c.rng.random_range(0..=1024i64),
    );
    let q = random_block(3, 4, 8, &mut c.rng).materialize();
    let k = random_block(2, 4, 8, &mut c.rng).materialize();
    let lhs = matmul(
        &apply_rope_rows(&table, t, &q)?,
        &apply_rope_rows(&table, s, &k)?.transpose(),
    )?;
    let rhs = matmul(&apply_rope_rows(&table, t - s, &q)?, &k.transpose())?;
    let diff = lhs.max_abs_diff(&rhs);
    ensure!(diff < 1e-10, "t={t} s={s}: deviation {diff:e}");
    Ok(())
}

fn higher_order_rotation_through_b(c: &mut Ctx) -> Check {
    let db = [2, 4, 8][c.rng.random_range(0..3)];
    let dc = [1, 2, 4][c.rng.random_range(0..3)];
    let t = c.rng.random_range(0..2048usize);
    let table = RopeTable::new(db, DEFAULT_BASE)?;
    let block = FactorBlock::third_order(
        random_matrix(3, 4, &mut c.rng),
        random_matrix(3, db, &mut c.rng),
        random_matrix(3, dc, &mut c.rng),
    )?;
    let lhs = matmul(
        &block.materialize(),
        &higher_order_transform(&table, t as i64, dc)?,
    )?;
    let rotated = pre_rotate_key(&block, t, &table)?;
    let diff = lhs.max_abs_diff(&rotated.block().materialize());
    ensure!(diff < 1e-11, "d_b={db} d_c={dc} t={t}: deviation {diff:e}");
    Ok(())
}

// attention

fn reduction_case(
    c: &mut Ctx,
    groups: impl Fn(usize) -> usize,
    build: fn(&GroupedWeights) -> tpa_core::Result<FactorWeights>,
) -> Check {
    let h = [1, 2, 4, 8][c.rng.random_range(0..4)];
    let dh = 2 * c.rng.random_range(1..4);
    let d = c.rng.random_range(2..10);
    let w = GroupedWeights::random(d, h, groups(h), dh, &mut c.rng);
    let t = c.rng.random_range(1..=32);
    let xs = random_matrix(t, d, &mut c.rng);
    let rope = RopeTable::new(dh, DEFAULT_BASE)?;
    let native = grouped_attention_native(&w, &xs, Some(&rope), true)?;
    let ours = materialized_forward(&build(&w)?, &xs, Some(&rope), true)?;
    let diff = native.max_abs_diff(&ours);
    ensure!(
        diff < 1e-12,
        "h={h} g={} T={t}: deviation {diff:e}",
        w.groups()
    );
    Ok(())
}

fn mha_reduction_matches_native(c: &mut Ctx) -> Check {
    reduction_case(c, |h| h, mha_as_tpa)
}

fn mqa_reduction_matches_native(c: &mut Ctx) -> Check {
    reduction_case(c, |_| 1, mqa_as_tpa)
}

fn gqa_reduction_matches_native(c: &mut Ctx) -> Check {
    let shift = c.rng.random_range(0..4u32);
    reduction_case(c, move |h| (h >> shift).max(1), gqa_as_tpa)
}

fn causal_outputs_ignore_future(c: &mut Ctx) -> Check {
    let t = c.rng.random_range(2..16);
    let cut = c.rng.random_range(0..t - 1);
    let mk = |rng: &mut ChaCha8Rng| HeadTensor::new(t, 2, 4, random_vector(t * 8, rng));
    let (q, k, v) = (mk(&mut c.rng)?, mk(&mut c.rng)?, mk(&mut c.rng)?);
    let mut k2 = k.as_slice().to_vec();
    let mut v2 = v.as_slice().to_vec();
    for x in k2[(cut + 1) * 8..]
        .iter_mut()
        .chain(v2[(cut + 1) * 8..].iter_mut())
    {
        *x = c.rng.random_range(-5.0..5.0);
    }
    let a = attention_reference(&q, &k, &v, true)?;
    let b = attention_reference(
        &q,
        &HeadTensor::new(t, 2, 4, k2)?,
        &HeadTensor::new(t, 2, 4, v2)?,
        true,
    )?;
    for i in 0..=cut {
        ensure!(
            a.token(i) == b.token(i),
            "row {i} changed when tokens after {cut} changed"
        );
    }
    Ok(())
}

// kv-cache

struct Instance {
    cache: FactorizedKvCache,
    keys: Vec<FactorBlock>,
    values: Vec<FactorBlock>,
}

fn instance(cfg: &TpaConfig, m: usize, rng: &mut ChaCha8Rng) -> Result<Instance, Failure> {
    let table = RopeTable::new(cfg.head_dim, DEFAULT_BASE)?;
    let mut cache = FactorizedKvCache::with_capacity(cfg, m)?;
    let (mut keys, mut values) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for t in 0..m {
        let k = pre_rotate_key(
            &random_block(cfg.rank_k, cfg.heads, cfg.head_dim, rng),
            t,
            &table,
        )?;
        let v = random_block(cfg.rank_v, cfg.heads, cfg.value_dim(), rng);
        cache.append(&k, &v)?;
        keys.push(k.into_block());
        values.push(v);
    }
    Ok(Instance {
        cache,
        keys,
        values,
    })
}

fn random_config(rng: &mut ChaCha8Rng) -> TpaConfig {
    TpaConfig::new(
        4,
        rng.random_range(1..9),
        2 * rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    )
}

fn cached_factors_round_trip(c: &mut Ctx) -> Check {
    let cfg = random_config(&mut c.rng);
    let m = c.rng.random_range(1..40);
    let inst = instance(&cfg, m, &mut c.rng)?;
    for t in 0..m {
        ensure!(
            inst.cache.key(t).as_ref() == Some(&inst.keys[t]),
            "key {t} differs"
        );
        ensure!(
            inst.cache.value(t).as_ref() == Some(&inst.values[t]),
            "value {t} differs"
        );
    }
    ensure!(inst.cache.key(m).is_none(), "read past the end");
    Ok(())
}

fn bytes_follow_formula(c: &mut Ctx) -> Check {
    let cfg = random_config(&mut c.rng);
    let m = c.rng.random_range(1..64);
    let inst = instance(&cfg, m, &mut c.rng)?;
    let per = cfg.rank_k * (cfg.heads + cfg.head_dim) + cfg.rank_v * (cfg.heads + cfg.value_dim());
    for elem in [2, 4, 8] {
        ensure!(
            inst.cache.logical_bytes(elem) == per * m * elem,
            "bytes at {elem} bytes/element"
        );
    }
    let ratio = compression_ratio(&cfg);
    let expected = per as f64 / (cfg.heads * (cfg.head_dim + cfg.value_dim())) as f64;
    ensure!(
        (ratio - expected).abs() < 1e-15,
        "compression ratio {ratio} vs {expected}"
    );
    Ok(())
}

fn append_enforces_position(c: &mut Ctx) -> Check {
    let cfg = random_config(&mut c.rng);
    let table = RopeTable::new(cfg.head_dim, DEFAULT_BASE)?;
    let mut cache = FactorizedKvCache::new(&cfg)?;
    let m = c.rng.random_range(0..8);
    let v = random_block(cfg.rank_v, cfg.heads, cfg.head_dim, &mut c.rng);
    let k = random_block(cfg.rank_k, cfg.heads, cfg.head_dim, &mut c.rng);
    for t in 0..m {
        cache.append(&pre_rotate_key(&k, t, &table)?, &v)?;
    }
    let wrong = m + c.rng.random_range(1..5);
    match cache.append(&pre_rotate_key(&k, wrong, &table)?, &v) {
        Err(TpaError::Position {
            rotated_at,
            expected,
        }) if rotated_at == wrong && expected == m => {}
        other => {
            return Err(Failure(format!(
                "append at {wrong} into length {m} gave {other:?}"
            )))
        }
    }
    ensure!(cache.len() == m, "failed append changed the length");
    Ok(())
}

// flash

fn reference(q: &Query, inst: &Instance, mask: Option<&[f64]>) -> Result<Matrix, Failure> {
    let ks: Vec<_> = inst.keys.iter().map(FactorBlock::materialize).collect();
    let vs: Vec<_> = inst.values.iter().map(FactorBlock::materialize).collect();
    let mask = mask
        .map(|m| Matrix::new(1, m.len(), m.to_vec()))
        .transpose()?;
    let out = attention_reference_masked(
        &head_tensor(&[q.materialize()])?,
        &head_tensor(&ks)?,
        &head_tensor(&vs)?,
        mask.as_ref(),
    )?;
    Ok(out.token(0))
}

fn flash_case(c: &mut Ctx) -> Result<(Instance, Query), Failure> {
    let cfg = random_config(&mut c.rng);
    let m = c.rng.random_range(1..80);
    let inst = instance(&cfg, m, &mut c.rng)?;
    let q = Query::Factored(random_block(
        cfg.rank_q,
        cfg.heads,
        cfg.head_dim,
        &mut c.rng,
    ));
    Ok((inst, q))
}

fn flash_matches_reference(c: &mut Ctx) -> Check {
    let (inst, q) = flash_case(c)?;
    let bs = [1, 2, 7, 64][c.rng.random_range(0..4)];
    let diff = flash_decode(&q, &inst.cache, bs)?.max_abs_diff(&reference(&q, &inst, None)?);
    ensure!(
        diff < 1e-10,
        "M={} block {bs}: deviation {diff:e}",
        inst.cache.len()
    );
    Ok(())
}

fn blocking_is_invisible(c: &mut Ctx) -> Check {
    let (inst, q) = flash_case(c)?;
    let base = flash_decode(&q, &inst.cache, 1)?;
    for bs in [2, 7, 64] {
        let diff = flash_decode(&q, &inst.cache, bs)?.max_abs_diff(&base);
        ensure!(diff < 1e-12, "block {bs} vs 1: deviation {diff:e}");
    }
    Ok(())
}

fn masked_positions_are_inert(c: &mut Ctx) -> Check {
    let (inst, q) = flash_case(c)?;
    let m = inst.cache.len();
    let mut mask: Vec<f64> = (0..m)
        .map(|_| {
            if c.rng.random_bool(0.4) {
                MASK_NEG
            } else {
                0.0
            }
        })
        .collect();
    mask[c.rng.random_range(0..m)] = 0.0;
    if m > 1 && mask.iter().all(|&x| x == 0.0) {
        mask[(c.rng.random_range(0..m) + 1) % m] = MASK_NEG;
    }
    let expected = reference(&q, &inst, Some(&mask))?;
    let mut used = mask.clone();
    if c.inject == Some(Injection::CorruptMask) {
        if let Some(x) = used.iter_mut().find(|x| **x == MASK_NEG) {
            *x = 0.0;
        }
    }
    let bs = c.rng.random_range(1..10);
    let got = flash_decode_with(&q, &inst.cache, bs, Some(&used), &mut NoCount)?;
    let diff = got.max_abs_diff(&expected);
    ensure!(
        diff < 1e-10,
        "masked decode deviates from the masked reference by {diff:e}"
    );
    Ok(())
}

fn parallel_merge_matches_serial(c: &mut Ctx) -> Check {
    let (inst, q) = flash_case(c)?;
    let bs = c.rng.random_range(1..17);
    let threads = c.rng.random_range(1..6);
    let serial = flash_decode(&q, &inst.cache, bs)?;
    let diff = flash_decode_parallel(&q, &inst.cache, bs, threads, None)?.max_abs_diff(&serial);
    ensure!(diff < 1e-12, "{threads} threads: deviation {diff:e}");
    Ok(())
}

fn decode_loop_matches_specialized(c: &mut Ctx) -> Check {
    let cfg = TpaConfig::new(12, 4, 8, 4, 2, 2);
    let w = FactorWeights::init(&cfg, c.rng.random())?;
    let rope = rope_for(&w, DEFAULT_BASE)?;
    let t = c.rng.random_range(1..=128);
    let bs = c.rng.random_range(1..33);
    let xs = random_matrix(t, 12, &mut c.rng);
    let run = decode_loop(&xs, &w, &rope, bs)?;
    let (q, k, v) = prepare_sequence(&w, &xs, &rope, 0)?;
    let mut mask = causal_mask(t, t);
    if c.inject == Some(Injection::CorruptMask) && t > 1 {
        mask[(0, t - 1)] = 0.0;
    }
    let full = specialized_full_attention(&q, &k, &v, &mask, bs)?;
    for (i, out) in run.outputs.iter().enumerate() {
        let diff = out.max_abs_diff(&full.token(i));
        ensure!(diff < 1e-10, "T={t} row {i}: deviation {diff:e}");
    }
    Ok(())
}

// cost

fn worked_example_coefficients(_: &mut Ctx) -> Check {
    let mha = MechanismSpec::mha(2048, 32, 64);
    ensure!(
        decode_flops(&mha)?.attention_coeff == 4096,
        "MHA coefficient"
    );
    ensure!(attention_params(&mha)? == 16_777_216, "MHA parameters");
    for ((rq, rk, rv), coeff) in [
        ((16, 1, 1), 3648),
        ((16, 2, 2), 7296),
        ((8, 1, 1), 2880),
        ((8, 2, 2), 5760),
    ] {
        let spec = MechanismSpec::tpa(Mechanism::Tpa, 2048, 32, 64, (rq, rk, rv));
        let got = decode_flops(&spec)?.attention_coeff;
        ensure!(got == coeff, "{spec}: coefficient {got} vs {coeff}");
    }
    let mla = MechanismSpec::mla(7168, 64, 128, 512, 1536, 64);
    ensure!(kv_numbers_per_token(&mla)? == 576, "MLA cache width");
    ensure!(
        decode_flops(&mla)?.attention_coeff == 69_632,
        "MLA coefficient"
    );
    Ok(())
}

fn kv_formulas_hold(c: &mut Ctx) -> Check {
    let (d, h, dh) = (
        c.rng.random_range(1..4096u64),
        c.rng.random_range(1..128u64),
        c.rng.random_range(1..256u64),
    );
    let (rq, rk, rv) = (
        c.rng.random_range(1..32u64),
        c.rng.random_range(1..8u64),
        c.rng.random_range(1..8u64),
    );
    let divisors: Vec<u64> = (1..=h).filter(|g| h % g == 0).collect();
    let g = divisors[c.rng.random_range(0..divisors.len())];
    ensure!(
        kv_numbers_per_token(&MechanismSpec::mha(d, h, dh))? == 2 * h * dh,
        "MHA"
    );
    ensure!(
        kv_numbers_per_token(&MechanismSpec::mqa(d, h, dh))? == 2 * dh,
        "MQA"
    );
    ensure!(
        kv_numbers_per_token(&MechanismSpec::gqa(d, h, dh, g))? == 2 * g * dh,
        "GQA"
    );
    let t = |k| MechanismSpec::tpa(k, d, h, dh, (rq, rk, rv));
    ensure!(
        kv_numbers_per_token(&t(Mechanism::Tpa))? == (rk + rv) * (h + dh),
        "TPA"
    );
    ensure!(
        kv_numbers_per_token(&t(Mechanism::TpaNonCtxA))? == (rk + rv) * dh,
        "TPA_NonCtxA"
    );
    ensure!(
        kv_numbers_per_token(&t(Mechanism::TpaNonCtxB))? == (rk + rv) * h,
        "TPA_NonCtxB"
    );
    Ok(())
}

fn counters_match_cost_model(c: &mut Ctx) -> Check {
    let h = [1, 2, 4, 8][c.rng.random_range(0..4)];
    let d = 2 * c.rng.random_range(1..9);
    let (rq, rk, rv) = (
        c.rng.random_range(1..6),
        c.rng.random_range(1..4),
        c.rng.random_range(1..4),
    );
    let cfg = TpaConfig::new(4, h, d, rq, rk, rv);
    let m = c.rng.random_range(1..50);
    let inst = instance(&cfg, m, &mut c.rng)?;
    let q = Query::Factored(random_block(rq, h, d, &mut c.rng));
    let mut counts = MacCounts::default();
    flash_decode_with(&q, &inst.cache, c.rng.random_range(1..9), None, &mut counts)?;
    let (h, d, m) = (h as u64, d as u64, m as u64);
    let coeff = tpa_decode_coeff(rq as u64, rk as u64, rv as u64, h, d, d);
    ensure!(
        counts.total() == coeff * m,
        "counted {} vs {} x {m}",
        counts.total(),
        coeff
    );

    let mut dense = DenseKvCache::new(h as usize, d as usize, d as usize)?;
    for _ in 0..m {
        dense.append(
            &random_matrix(h as usize, d as usize, &mut c.rng),
            &random_matrix(h as usize, d as usize, &mut c.rng),
        )?;
    }
    let mut dc = MacCounts::default();
    dense_decode(
        &random_matrix(h as usize, d as usize, &mut c.rng),
        &dense,
        &mut dc,
    )?;
    ensure!(
        dc.total() == 2 * h * d * m,
        "dense counted {} vs {}",
        dc.total(),
        2 * h * d * m
    );
    let spec = MechanismSpec::tpa(Mechanism::Tpa, 4, h, d, (rq as u64, rk as u64, rv as u64));
    let check = specialized_speedup_holds(&spec, d, d)?;
    ensure!(
        check.rhs * m == dc.total(),
        "inequality right side vs dense count"
    );
    Ok(())
}

// block

fn zero_sublayers_are_identity(c: &mut Ctx) -> Check {
    let cfg = TpaConfig::new(16, 2, 8, 2, 1, 1);
    let mut w = BlockWeights::init(&cfg, 24, c.rng.random())?;
    w.tpa.w_o = std::sync::Arc::new(Matrix::zeros(w.tpa.w_o.rows(), w.tpa.w_o.cols()));
    w.w3 = Matrix::zeros(w.w3.rows(), w.w3.cols());
    let rope = RopeTable::new(8, DEFAULT_BASE)?;
    let xs = random_matrix(c.rng.random_range(1..8), 16, &mut c.rng);
    ensure!(
        block_forward(&xs, &w, &rope)? == xs,
        "block with zero output maps is not the identity"
    );
    Ok(())
}

fn block_is_causal(c: &mut Ctx) -> Check {
    let cfg = TpaConfig::new(16, 2, 8, 2, 1, 1);
    let w = BlockWeights::init(&cfg, 24, c.rng.random())?;
    let rope = RopeTable::new(8, DEFAULT_BASE)?;
    let t = c.rng.random_range(2..10);
    let xs = random_matrix(t, 16, &mut c.rng);
    let cut = c.rng.random_range(0..t - 1);
    let mut ys = xs.clone();
    for r in cut + 1..t {
        ys.row_mut(r)
            .copy_from_slice(&random_vector(16, &mut c.rng));
    }
    let (a, b) = (
        block_forward(&xs, &w, &rope)?,
        block_forward(&ys, &w, &rope)?,
    );
    for r in 0..=cut {
        ensure!(a.row(r) == b.row(r), "row {r} depends on later tokens");
    }
    Ok(())
}

fn block_is_shift_invariant(c: &mut Ctx) -> Check {
    let cfg = TpaConfig::new(16, 2, 8, 2, 2, 1);
    let w = BlockWeights::init(&cfg, 24, c.rng.random())?;
    let rope = RopeTable::new(8, DEFAULT_BASE)?;
    let xs = random_matrix(6, 16, &mut c.rng);
    let delta = c.rng.random_range(1..2000);
    let diff =
        block_forward(&xs, &w, &rope)?.max_abs_diff(&block_forward_at(&xs, &w, &rope, delta)?);
    ensure!(diff < 1e-10, "shift {delta}: deviation {diff:e}");
    Ok(())
}
