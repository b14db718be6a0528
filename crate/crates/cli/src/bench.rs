//! Decode-time sweeps: per-token decode latency against cache length.
//!
//! Caches and queries are generated before timing starts; a timed sample is
//! one decode step for every sequence in the batch.

use std::hint::black_box;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpa_core::kv_cache::numbers_per_token;
use tpa_core::sample::{random_block, random_matrix};
use tpa_core::{
    dense_decode, flash_decode, flash_decode_parallel, DenseKvCache, FactorizedKvCache, Matrix,
    NoCount, Query, TpaConfig,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BenchMechanism {
    /// Factorized cache, blocked decode.
    Tpa,
    /// Dense cache with one key/value head per query head.
    Mha,
    /// Dense cache with a single key/value head.
    Mqa,
    /// Dense cache with `groups` key/value heads.
    Gqa,
}

impl BenchMechanism {
    pub fn name(self) -> &'static str {
        match self {
            BenchMechanism::Tpa => "tpa",
            BenchMechanism::Mha => "mha",
            BenchMechanism::Mqa => "mqa",
            BenchMechanism::Gqa => "gqa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    pub mechanisms: Vec<BenchMechanism>,
    pub batch_sizes: Vec<usize>,
    pub d_models: Vec<usize>,
    pub d_h: usize,
    /// `(R_Q, R_K, R_V)` for TPA.
    pub ranks: (usize, usize, usize),
    /// Key/value heads for GQA.
    pub groups: usize,
    /// Cache lengths, powers of two in ascending order.
    pub seq_lens: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub threads: usize,
    pub block_size: usize,
    /// Points whose caches would exceed this many bytes are skipped.
    pub byte_budget: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            mechanisms: vec![BenchMechanism::Tpa, BenchMechanism::Mha],
            batch_sizes: vec![1],
            d_models: vec![2048],
            d_h: 64,
            ranks: (16, 1, 1),
            groups: 4,
            seq_lens: (10..=17).map(|p| 1 << p).collect(),
            repetitions: 5,
            warmup: 2,
            seed: 0,
            output: PathBuf::from("bench.csv"),
            threads: 1,
            block_size: tpa_core::flash::DEFAULT_BLOCK,
            byte_budget: 2 << 30,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Usage(format!("invalid bench plan: {msg}")));
        if self.mechanisms.is_empty()
            || self.batch_sizes.is_empty()
            || self.d_models.is_empty()
            || self.seq_lens.is_empty()
        {
            return bad(
                "mechanisms, batch sizes, model widths and sequence lengths must be non-empty"
                    .into(),
            );
        }
        if self.repetitions < 3 {
            return bad(format!(
                "repetitions must be at least 3, got {}",
                self.repetitions
            ));
        }
        if let Some(&m) = self.seq_lens.iter().find(|m| !m.is_power_of_two()) {
            return bad(format!("sequence length {m} is not a power of two"));
        }
        if self.seq_lens.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sequence lengths must be strictly ascending".into());
        }
        if self.batch_sizes.contains(&0) {
            return bad("batch sizes must be positive".into());
        }
        if self.d_h == 0 || self.threads == 0 || self.block_size == 0 {
            return bad("d_h, threads and block size must be positive".into());
        }
        let (rq, rk, rv) = self.ranks;
        if rq == 0 || rk == 0 || rv == 0 {
            return bad("ranks must be positive".into());
        }
        for &d in &self.d_models {
            if d == 0 || d % self.d_h != 0 {
                return bad(format!(
                    "d_model {d} is not a positive multiple of d_h {}",
                    self.d_h
                ));
            }
            let heads = d / self.d_h;
            if self.mechanisms.contains(&BenchMechanism::Gqa)
                && (self.groups == 0 || !heads.is_multiple_of(self.groups))
            {
                return bad(format!(
                    "{} groups do not divide {heads} heads",
                    self.groups
                ));
            }
        }
        Ok(())
    }

    pub fn heads(&self, d_model: usize) -> usize {
        d_model / self.d_h
    }
}

/// Command-line overrides applied on top of a plan file.
#[derive(Debug, Clone, Default)]
pub struct BenchOverrides {
    pub mechanisms: Option<Vec<BenchMechanism>>,
    pub batch_sizes: Option<Vec<usize>>,
    pub d_models: Option<Vec<usize>>,
    pub d_h: Option<usize>,
    pub ranks: Option<(usize, usize, usize)>,
    pub groups: Option<usize>,
    pub seq_lens: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub block_size: Option<usize>,
    pub byte_budget: Option<u64>,
}

impl BenchOverrides {
    pub fn apply(self, plan: &mut BenchPlan) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { plan.$f = v; })* };
        }
        set!(
            mechanisms,
            batch_sizes,
            d_models,
            d_h,
            ranks,
            groups,
            seq_lens,
            repetitions,
            warmup,
            seed,
            output,
            threads,
            block_size,
            byte_budget
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mechanism: &'static str,
    pub batch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_h: usize,
    pub kv_heads: Option<usize>,
    pub r_q: Option<usize>,
    pub r_k: Option<usize>,
    pub r_v: Option<usize>,
    pub seq_len: usize,
    pub log2_seq_len: u32,
    pub threads: usize,
    pub repetitions: usize,
    pub cache_bytes: u64,
    pub median_s: Option<f64>,
    pub min_s: Option<f64>,
    pub log2_median_s: Option<f64>,
    /// `ok`, or `skipped-budget` when the cache would exceed the byte budget.
    pub status: &'static str,
}

/// Result of timing an empty kernel through the same harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DryRun {
    pub empty_median_s: f64,
    pub smallest_median_s: f64,
    pub ratio: f64,
    pub ok: bool,
}

/// Largest allowed ratio of empty-kernel time to the fastest real point.
pub const DRY_RUN_LIMIT: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub dry_run: Option<DryRun>,
}

/// Wall times in seconds of `reps` calls of `f`, after `warmup` untimed calls.
pub fn measure(warmup: usize, reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect()
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn cache_bytes(
    plan: &BenchPlan,
    mech: BenchMechanism,
    batch: usize,
    d_model: usize,
    m: usize,
) -> u64 {
    let heads = plan.heads(d_model);
    let per_token = match mech {
        BenchMechanism::Tpa => numbers_per_token(&tpa_config(plan, d_model)),
        _ => 2 * kv_heads(plan, mech, heads) * plan.d_h,
    };
    (batch * m * per_token * std::mem::size_of::<f64>()) as u64
}

fn tpa_config(plan: &BenchPlan, d_model: usize) -> TpaConfig {
    let (rq, rk, rv) = plan.ranks;
    TpaConfig::new(d_model, plan.heads(d_model), plan.d_h, rq, rk, rv)
}

fn kv_heads(plan: &BenchPlan, mech: BenchMechanism, heads: usize) -> usize {
    match mech {
        BenchMechanism::Mha | BenchMechanism::Tpa => heads,
        BenchMechanism::Mqa => 1,
        BenchMechanism::Gqa => plan.groups,
    }
}

fn fill(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tpa_cache(cfg: &TpaConfig, m: usize, rng: &mut ChaCha8Rng) -> Result<FactorizedKvCache> {
    let (rk, rv, h, d) = (cfg.rank_k, cfg.rank_v, cfg.heads, cfg.head_dim);
    let (a_k, b_k) = (fill(m * rk * h, rng), fill(m * rk * d, rng));
    let (a_v, b_v) = (fill(m * rv * h, rng), fill(m * rv * d, rng));
    Ok(FactorizedKvCache::from_parts(cfg, m, a_k, b_k, a_v, b_v)?)
}

fn dense_cache(kv: usize, d: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<DenseKvCache> {
    let mut cache = DenseKvCache::with_capacity(kv, d, d, m)?;
    for _ in 0..m {
        cache.append(&random_matrix(kv, d, rng), &random_matrix(kv, d, rng))?;
    }
    Ok(cache)
}

/// Times one point; returns the sorted-order statistics input.
fn time_point(
    plan: &BenchPlan,
    mech: BenchMechanism,
    batch: usize,
    d_model: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        plan.seed ^ ((m as u64) << 20) ^ ((d_model as u64) << 4) ^ batch as u64,
    );
    let heads = plan.heads(d_model);
    let (reps, warmup) = (plan.repetitions, plan.warmup);
    match mech {
        BenchMechanism::Tpa => {
            let cfg = tpa_config(plan, d_model);
            let caches = (0..batch)
                .map(|_| tpa_cache(&cfg, m, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let queries: Vec<Query> = (0..batch)
                .map(|_| Query::Factored(random_block(cfg.rank_q, heads, plan.d_h, &mut rng)))
                .collect();
            let mut failure = None;
            let times = measure(warmup, reps, || {
                for (q, c) in queries.iter().zip(&caches) {
                    let out = if plan.threads > 1 {
                        flash_decode_parallel(q, c, plan.block_size, plan.threads, None)
                    } else {
                        flash_decode(q, c, plan.block_size)
                    };
                    match out {
                        Ok(o) => {
                            black_box(o);
                        }
                        Err(e) => failure = Some(e),
                    }
                }
            });
            match failure {
                Some(e) => Err(e.into()),
                None => Ok(times),
            }
        }
        _ => {
            let kv = kv_heads(plan, mech, heads);
            let caches = (0..batch)
                .map(|_| dense_cache(kv, plan.d_h, m, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let queries: Vec<Matrix> = (0..batch)
                .map(|_| random_matrix(heads, plan.d_h, &mut rng))
                .collect();
            let mut failure = None;
            let times = measure(warmup, reps, || {
                for (q, c) in queries.iter().zip(&caches) {
                    match dense_decode(q, c, &mut NoCount) {
                        Ok(o) => {
                            black_box(o);
                        }
                        Err(e) => failure = Some(e),
                    }
                }
            });
            match failure {
                Some(e) => Err(e.into()),
                None => Ok(times),
            }
        }
    }
}

/// Runs every point of the plan in order mechanism, batch, d_model, seq_len.
/// With `dry_run`, also times an empty kernel through the same harness.
pub fn run(
    plan: &BenchPlan,
    dry_run: bool,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchOutcome> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &mech in &plan.mechanisms {
        for &batch in &plan.batch_sizes {
            for &d_model in &plan.d_models {
                let heads = plan.heads(d_model);
                let tpa = mech == BenchMechanism::Tpa;
                for &m in &plan.seq_lens {
                    let bytes = cache_bytes(plan, mech, batch, d_model, m);
                    let mut row = BenchRow {
                        mechanism: mech.name(),
                        batch,
                        d_model,
                        heads,
                        d_h: plan.d_h,
                        kv_heads: (!tpa).then(|| kv_heads(plan, mech, heads)),
                        r_q: tpa.then_some(plan.ranks.0),
                        r_k: tpa.then_some(plan.ranks.1),
                        r_v: tpa.then_some(plan.ranks.2),
                        seq_len: m,
                        log2_seq_len: m.trailing_zeros(),
                        threads: if tpa { plan.threads } else { 1 },
                        repetitions: plan.repetitions,
                        cache_bytes: bytes,
                        median_s: None,
                        min_s: None,
                        log2_median_s: None,
                        status: "skipped-budget",
                    };
                    if bytes <= plan.byte_budget {
                        let times = time_point(plan, mech, batch, d_model, m)?;
                        let med = median(&times);
                        row.median_s = Some(med);
                        row.min_s = times.iter().copied().reduce(f64::min);
                        row.log2_median_s = Some(med.log2());
                        row.status = "ok";
                    }
                    progress(&row);
                    rows.push(row);
                }
            }
        }
    }
    let dry_run = dry_run.then(|| {
        let empty = median(&measure(plan.warmup, plan.repetitions, || black_box(())));
        let smallest = rows
            .iter()
            .filter_map(|r| r.median_s)
            .fold(f64::INFINITY, f64::min);
        let ratio = empty / smallest;
        DryRun {
            empty_median_s: empty,
            smallest_median_s: smallest,
            ratio,
            ok: ratio < DRY_RUN_LIMIT,
        }
    });
    Ok(BenchOutcome { rows, dry_run })
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    Ok(())
}

/// Least-squares slope of `log2(median)` against `log2(seq_len)` over the
/// measured rows.
pub fn log_log_slope(rows: &[&BenchRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.log2_median_s.map(|y| (r.log2_seq_len as f64, y)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}
