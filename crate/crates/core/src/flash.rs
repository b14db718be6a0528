//! Factor-space attention: blocked online-softmax decoding over the factorized
//! cache, and the full-sequence path that never materializes Q, K or V.

use std::ops::Range;

use crate::attention::HeadTensor;
use crate::counters::{MacSink, NoCount};
use crate::error::{Result, TpaError};
use crate::factor::{compute_factors, FactorBlock, FactorWeights, Order, Query};
use crate::kv_cache::FactorizedKvCache;
use crate::linalg::{dot, is_masked, Matrix};
use crate::rope::{pre_rotate_key, rotate_query, PreRotatedKey, RopeTable};

pub const DEFAULT_BLOCK: usize = 64;

/// Per-token logits for one query against cached key factors.
///
/// Factored queries use the head-shared feature dots `P = B_Q·B_Kᵀ` followed
/// by per-head rank mixing; dense queries dot every head against each key
/// feature row.
#[derive(Debug, Clone)]
pub struct QueryScorer {
    heads: usize,
    dim: usize,
    rank_k: usize,
    kind: ScorerKind,
    scale: f64,
    p: Vec<f64>,
}

#[derive(Debug, Clone)]
enum ScorerKind {
    Factored {
        rank_q: usize,
        /// `R_Q×D`.
        b_q: Vec<f64>,
        /// `A_Qᵀ`, `H×R_Q`.
        a_qt: Vec<f64>,
    },
    /// `H×D`.
    Dense { q: Vec<f64> },
}

impl QueryScorer {
    pub fn new(q: &Query, rank_k: usize) -> Result<Self> {
        if rank_k == 0 {
            return Err(TpaError::Config("rank_k must be at least 1".into()));
        }
        match q {
            Query::Factored(block) => {
                block.validate()?;
                if !block.is_finite() {
                    return Err(TpaError::NonFinite("query factors"));
                }
                let block = block.to_second_order();
                let (rq, h, d) = (block.rank(), block.heads(), block.b.cols());
                let a_qt = block.a.transpose().into_vec();
                Ok(Self {
                    heads: h,
                    dim: d,
                    rank_k,
                    kind: ScorerKind::Factored {
                        rank_q: rq,
                        b_q: block.b.into_vec(),
                        a_qt,
                    },
                    scale: 1.0 / ((d as f64).sqrt() * rq as f64 * rank_k as f64),
                    p: vec![0.0; rq * rank_k],
                })
            }
            Query::Dense(m) => {
                if !m.is_finite() {
                    return Err(TpaError::NonFinite("dense query"));
                }
                let (h, d) = m.shape();
                Ok(Self {
                    heads: h,
                    dim: d,
                    rank_k,
                    kind: ScorerKind::Dense {
                        q: m.as_slice().to_vec(),
                    },
                    scale: 1.0 / ((d as f64).sqrt() * rank_k as f64),
                    p: Vec::new(),
                })
            }
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes the `H` scaled logits of one key (`a_k: R_K×H`, `b_k: R_K×D`).
    #[inline]
    pub fn score<S: MacSink>(&mut self, a_k: &[f64], b_k: &[f64], out: &mut [f64], sink: &mut S) {
        let (h, d, rk) = (self.heads, self.dim, self.rank_k);
        match &self.kind {
            ScorerKind::Factored { rank_q, b_q, a_qt } => {
                let rq = *rank_q;
                for r in 0..rq {
                    let bq = &b_q[r * d..(r + 1) * d];
                    for s in 0..rk {
                        self.p[r * rk + s] = dot(bq, &b_k[s * d..(s + 1) * d]);
                    }
                }
                sink.score((rq * rk * d) as u64);
                for (i, o) in out.iter_mut().enumerate().take(h) {
                    let aq = &a_qt[i * rq..(i + 1) * rq];
                    let mut acc = 0.0;
                    for s in 0..rk {
                        let mut t = 0.0;
                        for (r, &a) in aq.iter().enumerate() {
                            t += a * self.p[r * rk + s];
                        }
                        acc += t * a_k[s * h + i];
                    }
                    *o = acc * self.scale;
                }
                sink.mix((h * rk * (rq + 1)) as u64);
            }
            ScorerKind::Dense { q } => {
                for (i, o) in out.iter_mut().enumerate().take(h) {
                    let qi = &q[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for s in 0..rk {
                        acc += dot(qi, &b_k[s * d..(s + 1) * d]) * a_k[s * h + i];
                    }
                    *o = acc * self.scale;
                }
                sink.score((h * rk * d) as u64);
                sink.mix((h * rk) as u64);
            }
        }
    }
}

/// Running output `y (H×E)`, normalizer and max per head.
///
/// `sum` is the normalizer relative to `max`, so the log-sum-exp is
/// `max + ln(sum)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    heads: usize,
    dim: usize,
    y: Vec<f64>,
    sum: Vec<f64>,
    max: Vec<f64>,
}

impl DecodeState {
    pub fn new(heads: usize, dim: usize) -> Self {
        Self {
            heads,
            dim,
            y: vec![0.0; heads * dim],
            sum: vec![0.0; heads],
            max: vec![f64::NEG_INFINITY; heads],
        }
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Per-head log-sum-exp of everything absorbed so far.
    pub fn lse(&self) -> Vec<f64> {
        self.max
            .iter()
            .zip(&self.sum)
            .map(|(m, s)| m + s.ln())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.iter().all(|&s| s == 0.0)
    }

    /// Moves head `h` to running max `m_new ≥ max[h]`.
    #[inline]
    fn rebase(&mut self, h: usize, m_new: f64) {
        let old = self.max[h];
        if m_new > old {
            if old != f64::NEG_INFINITY {
                let alpha = (old - m_new).exp();
                self.sum[h] *= alpha;
                for y in &mut self.y[h * self.dim..(h + 1) * self.dim] {
                    *y *= alpha;
                }
            }
            self.max[h] = m_new;
        }
    }

    /// Merges a partial computed over a disjoint set of keys.
    pub fn fuse(&mut self, other: &DecodeState) {
        debug_assert_eq!((self.heads, self.dim), (other.heads, other.dim));
        for h in 0..self.heads {
            if other.sum[h] == 0.0 {
                continue;
            }
            let m = self.max[h].max(other.max[h]);
            self.rebase(h, m);
            let beta = (other.max[h] - m).exp();
            self.sum[h] += other.sum[h] * beta;
            let dst = &mut self.y[h * self.dim..(h + 1) * self.dim];
            for (a, b) in dst
                .iter_mut()
                .zip(&other.y[h * other.dim..(h + 1) * other.dim])
            {
                *a += b * beta;
            }
        }
    }

    /// `scale · y / sum` as an `H×E` matrix.
    pub fn finalize(&self, scale: f64) -> Result<Matrix> {
        if self.is_empty() {
            return Err(TpaError::DegenerateRow { row: 0 });
        }
        let mut out = Matrix::zeros(self.heads, self.dim);
        for h in 0..self.heads {
            let norm = scale / self.sum[h];
            for (o, y) in out
                .row_mut(h)
                .iter_mut()
                .zip(&self.y[h * self.dim..(h + 1) * self.dim])
            {
                *o = y * norm;
            }
        }
        Ok(out)
    }
}

/// Decoder for one query against a factorized cache.
#[derive(Debug, Clone)]
pub struct FlashDecoder<'c> {
    cache: &'c FactorizedKvCache,
    scorer: QueryScorer,
    logits: Vec<f64>,
    keep: Vec<bool>,
    w: Vec<f64>,
}

impl<'c> FlashDecoder<'c> {
    pub fn new(q: &Query, cache: &'c FactorizedKvCache) -> Result<Self> {
        if cache.is_empty() {
            return Err(TpaError::Empty("decode against an empty cache"));
        }
        let scorer = QueryScorer::new(q, cache.rank_k())?;
        if scorer.heads() != cache.heads() || scorer.dim() != cache.key_dim() {
            return Err(TpaError::shape(
                "flash_decode query",
                format!("{} heads x {}", cache.heads(), cache.key_dim()),
                format!("{} heads x {}", scorer.heads(), scorer.dim()),
            ));
        }
        Ok(Self {
            cache,
            scorer,
            logits: Vec::new(),
            keep: Vec::new(),
            w: vec![0.0; cache.rank_v()],
        })
    }

    pub fn state(&self) -> DecodeState {
        DecodeState::new(self.cache.heads(), self.cache.value_dim())
    }

    /// Absorbs cache tokens `range` into `state`. Masked tokens are skipped
    /// entirely; a fully masked block leaves `state` untouched.
    pub fn absorb<S: MacSink>(
        &mut self,
        state: &mut DecodeState,
        range: Range<usize>,
        mask: Option<&[f64]>,
        sink: &mut S,
    ) -> Result<()> {
        let c = self.cache;
        let (h, d, e, rk, rv) = (
            c.heads(),
            c.key_dim(),
            c.value_dim(),
            c.rank_k(),
            c.rank_v(),
        );
        let n = range.len();
        self.logits.resize(n * h, 0.0);
        self.keep.clear();
        let mut block_max = vec![f64::NEG_INFINITY; h];
        for (j, t) in range.clone().enumerate() {
            let bias = mask.map_or(0.0, |m| m[t]);
            if is_masked(bias) {
                self.keep.push(false);
                continue;
            }
            self.keep.push(true);
            let out = &mut self.logits[j * h..(j + 1) * h];
            self.scorer.score(
                &c.a_k()[t * rk * h..(t + 1) * rk * h],
                &c.b_k()[t * rk * d..(t + 1) * rk * d],
                out,
                sink,
            );
            for (l, bm) in out.iter_mut().zip(&mut block_max) {
                *l += bias;
                if !l.is_finite() {
                    return Err(TpaError::NonFinite("attention logits"));
                }
                *bm = bm.max(*l);
            }
        }
        if block_max[0] == f64::NEG_INFINITY {
            return Ok(());
        }
        for (i, &m) in block_max.iter().enumerate() {
            state.rebase(i, m);
        }
        for (j, t) in range.enumerate() {
            if !self.keep[j] {
                continue;
            }
            let a_v = &c.a_v()[t * rv * h..(t + 1) * rv * h];
            let b_v = &c.b_v()[t * rv * e..(t + 1) * rv * e];
            for i in 0..h {
                let p = (self.logits[j * h + i] - state.max[i]).exp();
                state.sum[i] += p;
                for u in 0..rv {
                    self.w[u] = p * a_v[u * h + i];
                }
                let y = &mut state.y[i * e..(i + 1) * e];
                for u in 0..rv {
                    let wu = self.w[u];
                    for (ye, &be) in y.iter_mut().zip(&b_v[u * e..(u + 1) * e]) {
                        *ye += wu * be;
                    }
                }
            }
            sink.value((h * rv * (1 + e)) as u64);
        }
        Ok(())
    }

    /// Blocked pass over `range` into a fresh state.
    pub fn partial<S: MacSink>(
        &mut self,
        range: Range<usize>,
        block_size: usize,
        mask: Option<&[f64]>,
        sink: &mut S,
    ) -> Result<DecodeState> {
        let mut state = self.state();
        let mut start = range.start;
        while start < range.end {
            let end = (start + block_size).min(range.end);
            self.absorb(&mut state, start..end, mask, sink)?;
            start = end;
        }
        Ok(state)
    }

    pub fn value_scale(&self) -> f64 {
        1.0 / self.cache.rank_v() as f64
    }
}

fn check_args(cache: &FactorizedKvCache, block_size: usize, mask: Option<&[f64]>) -> Result<()> {
    if block_size == 0 {
        return Err(TpaError::Config("block_size must be at least 1".into()));
    }
    if let Some(m) = mask {
        if m.len() != cache.len() {
            return Err(TpaError::shape("decode mask", cache.len(), m.len()));
        }
    }
    Ok(())
}

/// Attention output `H×E` of query `q` over every cached token.
pub fn flash_decode(q: &Query, cache: &FactorizedKvCache, block_size: usize) -> Result<Matrix> {
    flash_decode_with(q, cache, block_size, None, &mut NoCount)
}

/// [`flash_decode`] with an optional additive mask over cache positions and a
/// MAC counter.
pub fn flash_decode_with<S: MacSink>(
    q: &Query,
    cache: &FactorizedKvCache,
    block_size: usize,
    mask: Option<&[f64]>,
    sink: &mut S,
) -> Result<Matrix> {
    check_args(cache, block_size, mask)?;
    let mut dec = FlashDecoder::new(q, cache)?;
    let state = dec.partial(0..cache.len(), block_size, mask, sink)?;
    state.finalize(dec.value_scale())
}

/// Splits the cache into `threads` contiguous, block-aligned partitions,
/// decodes them concurrently and merges the partials in ascending order.
pub fn flash_decode_parallel(
    q: &Query,
    cache: &FactorizedKvCache,
    block_size: usize,
    threads: usize,
    mask: Option<&[f64]>,
) -> Result<Matrix> {
    check_args(cache, block_size, mask)?;
    let dec = FlashDecoder::new(q, cache)?;
    let blocks = cache.len().div_ceil(block_size);
    let parts = threads.clamp(1, blocks);
    let per = blocks.div_ceil(parts);
    let ranges: Vec<Range<usize>> = (0..parts)
        .map(|p| {
            (p * per * block_size).min(cache.len())..((p + 1) * per * block_size).min(cache.len())
        })
        .filter(|r| !r.is_empty())
        .collect();
    let partials: Vec<Result<DecodeState>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let mut d = dec.clone();
                scope.spawn(move || d.partial(r, block_size, mask, &mut NoCount))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut state = dec.state();
    for p in partials {
        state.fuse(&p?);
    }
    state.finalize(dec.value_scale())
}

fn pack(
    blocks: &[FactorBlock],
    rank: usize,
    heads: usize,
    dim: usize,
    what: &'static str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(blocks.len() * rank * heads);
    let mut b = Vec::with_capacity(blocks.len() * rank * dim);
    for blk in blocks {
        let blk = blk.to_second_order();
        if blk.a.shape() != (rank, heads) || blk.b.shape() != (rank, dim) {
            return Err(TpaError::shape(
                what,
                format!("a ({rank}, {heads}), b ({rank}, {dim})"),
                format!("a {:?}, b {:?}", blk.a.shape(), blk.b.shape()),
            ));
        }
        if !blk.is_finite() {
            return Err(TpaError::NonFinite(what));
        }
        a.extend_from_slice(blk.a.as_slice());
        b.extend_from_slice(blk.b.as_slice());
    }
    Ok((a, b))
}

/// Full-sequence attention computed from factors.
///
/// `q` are (already rotated) query factors for `T_q` tokens, `k`/`v` the key
/// (rotated) and value factors for `T_k` tokens, `mask` an additive
/// `T_q×T_k` mask. Keys are visited in blocks of `block_size`; each block's
/// per-head values `s_V·A_Vᵀ·B_V` are formed once and shared by every query.
pub fn specialized_full_attention(
    q: &[Query],
    k: &[FactorBlock],
    v: &[FactorBlock],
    mask: &Matrix,
    block_size: usize,
) -> Result<HeadTensor> {
    let (t_q, t_k) = (q.len(), k.len());
    if t_q == 0 || t_k == 0 {
        return Err(TpaError::Empty("attention over an empty sequence"));
    }
    if v.len() != t_k {
        return Err(TpaError::shape("value tokens", t_k, v.len()));
    }
    if mask.shape() != (t_q, t_k) {
        return Err(TpaError::shape(
            "attention mask",
            format!("({t_q}, {t_k})"),
            format!("{:?}", mask.shape()),
        ));
    }
    if block_size == 0 {
        return Err(TpaError::Config("block_size must be at least 1".into()));
    }
    let k0 = k[0].to_second_order();
    let v0 = v[0].to_second_order();
    let (rk, h, d) = (k0.rank(), k0.heads(), k0.b.cols());
    let (rv, e) = (v0.rank(), v0.b.cols());
    let (a_k, b_k) = pack(k, rk, h, d, "key factors")?;
    let (a_v, b_v) = pack(v, rv, h, e, "value factors")?;
    let mut scorers = q
        .iter()
        .map(|qi| {
            let s = QueryScorer::new(qi, rk)?;
            if (s.heads(), s.dim()) != (h, d) {
                return Err(TpaError::shape(
                    "query factors",
                    format!("{h} heads x {d}"),
                    format!("{} heads x {}", s.heads(), s.dim()),
                ));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<DecodeState> = (0..t_q).map(|_| DecodeState::new(h, e)).collect();
    let s_v = 1.0 / rv as f64;
    let mut v_blk = Vec::new();
    let mut logits = Vec::new();
    let mut start = 0;
    while start < t_k {
        let end = (start + block_size).min(t_k);
        let n = end - start;
        // V_blk[j][i][:] = s_V Σ_u A_V[u][i] B_V[u][:]
        v_blk.clear();
        v_blk.resize(n * h * e, 0.0);
        for j in 0..n {
            let t = start + j;
            let av = &a_v[t * rv * h..(t + 1) * rv * h];
            let bv = &b_v[t * rv * e..(t + 1) * rv * e];
            for i in 0..h {
                let dst = &mut v_blk[(j * h + i) * e..(j * h + i + 1) * e];
                for u in 0..rv {
                    let w = s_v * av[u * h + i];
                    for (o, &b) in dst.iter_mut().zip(&bv[u * e..(u + 1) * e]) {
                        *o += w * b;
                    }
                }
            }
        }
        logits.resize(n * h, 0.0);
        for (qi, (scorer, state)) in scorers.iter_mut().zip(&mut states).enumerate() {
            let row = mask.row(qi);
            let mut block_max = vec![f64::NEG_INFINITY; h];
            for j in 0..n {
                let t = start + j;
                if is_masked(row[t]) {
                    continue;
                }
                let out = &mut logits[j * h..(j + 1) * h];
                scorer.score(
                    &a_k[t * rk * h..(t + 1) * rk * h],
                    &b_k[t * rk * d..(t + 1) * rk * d],
                    out,
                    &mut NoCount,
                );
                for (l, bm) in out.iter_mut().zip(&mut block_max) {
                    *l += row[t];
                    if !l.is_finite() {
                        return Err(TpaError::NonFinite("attention logits"));
                    }
                    *bm = bm.max(*l);
                }
            }
            if block_max[0] == f64::NEG_INFINITY {
                continue;
            }
            for (i, &m) in block_max.iter().enumerate() {
                state.rebase(i, m);
            }
            for j in 0..n {
                if is_masked(row[start + j]) {
                    continue;
                }
                for i in 0..h {
                    let p = (logits[j * h + i] - state.max[i]).exp();
                    state.sum[i] += p;
                    let y = &mut state.y[i * e..(i + 1) * e];
                    for (o, &val) in y
                        .iter_mut()
                        .zip(&v_blk[(j * h + i) * e..(j * h + i + 1) * e])
                    {
                        *o += p * val;
                    }
                }
            }
        }
        start = end;
    }
    let mut out = HeadTensor::zeros(t_q, h, e);
    for (qi, state) in states.iter().enumerate() {
        let m = state
            .finalize(1.0)
            .map_err(|_| TpaError::DegenerateRow { row: qi })?;
        for i in 0..h {
            out.vector_mut(qi, i).copy_from_slice(m.row(i));
        }
    }
    Ok(out)
}

/// Factors of one token with RoPE applied for position `t`: rotated query,
/// pre-rotated key, and value.
pub fn prepare_token(
    w: &FactorWeights,
    x: &[f64],
    t: usize,
    rope: &RopeTable,
) -> Result<(Query, PreRotatedKey, FactorBlock)> {
    let f = compute_factors(w, x)?;
    let q = rotate_query(&f.q, t, rope)?;
    let k = pre_rotate_key(&f.k, t, rope)?;
    Ok((q, k, f.v))
}

/// Rotated factors of a whole sequence (`T×d_model`) whose first token sits
/// at position `start`.
pub fn prepare_sequence(
    w: &FactorWeights,
    xs: &Matrix,
    rope: &RopeTable,
    start: usize,
) -> Result<(Vec<Query>, Vec<FactorBlock>, Vec<FactorBlock>)> {
    let mut qs = Vec::with_capacity(xs.rows());
    let mut ks = Vec::with_capacity(xs.rows());
    let mut vs = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let (q, k, v) = prepare_token(w, xs.row(t), start + t, rope)?;
        qs.push(q);
        ks.push(k.into_block());
        vs.push(v);
    }
    Ok((qs, ks, vs))
}

/// RoPE table over the rotated feature width of `w` (`d_b` for third order).
pub fn rope_for(w: &FactorWeights, base: f64) -> Result<RopeTable> {
    let dim = match w.cfg.order {
        Order::Second => w.cfg.head_dim,
        Order::Third => w.cfg.d_b,
    };
    RopeTable::new(dim, base)
}

#[derive(Debug, Clone)]
pub struct DecodeRun {
    /// One `h×E` output per step.
    pub outputs: Vec<Matrix>,
    pub cache: FactorizedKvCache,
}

/// Autoregressive decoding of a token stream: at step `t` the token's key is
/// pre-rotated and cached, then its rotated query attends to positions `≤ t`.
pub fn decode_loop(
    xs: &Matrix,
    w: &FactorWeights,
    rope: &RopeTable,
    block_size: usize,
) -> Result<DecodeRun> {
    if xs.rows() == 0 {
        return Err(TpaError::Empty("decode_loop needs at least one token"));
    }
    let mut cache = FactorizedKvCache::with_capacity(&w.cfg, xs.rows())?;
    let mut outputs = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let (q, k, v) = prepare_token(w, xs.row(t), t, rope)?;
        cache.append(&k, &v)?;
        outputs.push(flash_decode(&q, &cache, block_size)?);
    }
    Ok(DecodeRun { outputs, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_reference, causal_mask};
    use crate::counters::MacCounts;
    use crate::factor::TpaConfig;
    use crate::rope::DEFAULT_BASE;
    use crate::sample::{random_block, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled_cache(cfg: &TpaConfig, m: usize, rng: &mut ChaCha8Rng) -> FactorizedKvCache {
        let table = RopeTable::new(cfg.head_dim, DEFAULT_BASE).unwrap();
        let mut cache = FactorizedKvCache::new(cfg).unwrap();
        for t in 0..m {
            let k = pre_rotate_key(
                &random_block(cfg.rank_k, cfg.heads, cfg.head_dim, rng),
                t,
                &table,
            )
            .unwrap();
            cache
                .append(
                    &k,
                    &random_block(cfg.rank_v, cfg.heads, cfg.value_dim(), rng),
                )
                .unwrap();
        }
        cache
    }

    fn materialized(q: &Query, cache: &FactorizedKvCache) -> Matrix {
        let m = cache.len();
        let qt = HeadTensor::from_tokens(&[q.materialize()]).unwrap();
        let ks: Vec<Matrix> = (0..m)
            .map(|t| cache.key(t).unwrap().materialize())
            .collect();
        let vs: Vec<Matrix> = (0..m)
            .map(|t| cache.value(t).unwrap().materialize())
            .collect();
        let out = attention_reference(
            &qt,
            &HeadTensor::from_tokens(&ks).unwrap(),
            &HeadTensor::from_tokens(&vs).unwrap(),
            false,
        )
        .unwrap();
        out.token(0)
    }

    #[test]
    fn single_entry_returns_value() {
        let cfg = TpaConfig::new(4, 2, 4, 2, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = filled_cache(&cfg, 1, &mut rng);
        let q = Query::Factored(random_block(2, 2, 4, &mut rng));
        let out = flash_decode(&q, &cache, 4).unwrap();
        assert!(out.max_abs_diff(&cache.value(0).unwrap().materialize()) < 1e-15);
    }

    #[test]
    fn matches_materialized_oracle() {
        let cfg = TpaConfig::new(4, 2, 6, 2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cache = filled_cache(&cfg, 7, &mut rng);
        let q = Query::Factored(random_block(2, 2, 6, &mut rng));
        let expected = materialized(&q, &cache);
        for bs in [1, 2, 7, 64] {
            assert!(
                flash_decode(&q, &cache, bs)
                    .unwrap()
                    .max_abs_diff(&expected)
                    < 1e-10
            );
        }
    }

    #[test]
    fn dense_query_matches_oracle() {
        let cfg = TpaConfig::new(4, 3, 4, 1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cache = filled_cache(&cfg, 9, &mut rng);
        let q = Query::Dense(random_matrix(3, 4, &mut rng));
        let out = flash_decode(&q, &cache, 4).unwrap();
        assert!(out.max_abs_diff(&materialized(&q, &cache)) < 1e-12);
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = TpaConfig::new(4, 2, 4, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cache = filled_cache(&cfg, 50, &mut rng);
        let q = Query::Factored(random_block(3, 2, 4, &mut rng));
        let seq = flash_decode(&q, &cache, 8).unwrap();
        for threads in [1, 2, 3, 16] {
            let par = flash_decode_parallel(&q, &cache, 8, threads, None).unwrap();
            assert!(par.max_abs_diff(&seq) < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let cfg = TpaConfig::new(4, 2, 4, 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let empty = FactorizedKvCache::new(&cfg).unwrap();
        let q = Query::Factored(random_block(1, 2, 4, &mut rng));
        assert!(matches!(
            flash_decode(&q, &empty, 4),
            Err(TpaError::Empty(_))
        ));
        let cache = filled_cache(&cfg, 3, &mut rng);
        let mask = [crate::linalg::MASK_NEG; 3];
        assert!(matches!(
            flash_decode_with(&q, &cache, 2, Some(&mask), &mut NoCount),
            Err(TpaError::DegenerateRow { .. })
        ));
        let mut bad = random_block(1, 2, 4, &mut rng);
        bad.a[(0, 1)] = f64::INFINITY;
        assert!(matches!(
            flash_decode(&Query::Factored(bad), &cache, 2),
            Err(TpaError::NonFinite(_))
        ));
        assert!(flash_decode(&q, &cache, 0).is_err());
    }

    #[test]
    fn counters_per_token() {
        let cfg = TpaConfig::new(4, 4, 8, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cache = filled_cache(&cfg, 10, &mut rng);
        let q = Query::Factored(random_block(3, 4, 8, &mut rng));
        let mut counts = MacCounts::default();
        flash_decode_with(&q, &cache, 4, None, &mut counts).unwrap();
        assert_eq!(counts.mac_score, 10 * 3 * 2 * 8);
        assert_eq!(counts.mac_mix, 10 * 4 * 2 * 4);
        assert_eq!(counts.mac_value, 10 * 4 * 9);
    }

    #[test]
    fn specialized_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = vec![Query::Factored(random_block(2, 3, 4, &mut rng))];
        let k = vec![random_block(1, 3, 4, &mut rng)];
        let v = vec![random_block(2, 3, 4, &mut rng)];
        let out = specialized_full_attention(&q, &k, &v, &causal_mask(1, 1), 8).unwrap();
        assert!(out.token(0).max_abs_diff(&v[0].materialize()) < 1e-15);
    }

    #[test]
    fn decode_loop_first_step_is_value() {
        let cfg = TpaConfig::new(6, 2, 4, 2, 1, 1);
        let w = FactorWeights::init(&cfg, 11).unwrap();
        let table = rope_for(&w, DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = random_matrix(1, 6, &mut rng);
        let run = decode_loop(&xs, &w, &table, 4).unwrap();
        let f = compute_factors(&w, xs.row(0)).unwrap();
        assert!(run.outputs[0].max_abs_diff(&f.v.materialize()) < 1e-15);
        assert_eq!(run.cache.len(), 1);
    }
}
