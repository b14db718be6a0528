//! Materialized-cache decoding for MHA/MQA/GQA, the baseline the factorized
//! decoder is timed and counted against.

use crate::counters::MacSink;
use crate::error::{Result, TpaError};
use crate::linalg::{dot, Matrix};

/// Cache of full per-token keys and values for `kv_heads` key/value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKvCache {
    kv_heads: usize,
    dim: usize,
    value_dim: usize,
    len: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl DenseKvCache {
    pub fn new(kv_heads: usize, dim: usize, value_dim: usize) -> Result<Self> {
        if kv_heads == 0 || dim == 0 || value_dim == 0 {
            return Err(TpaError::Config(
                "dense cache dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            kv_heads,
            dim,
            value_dim,
            len: 0,
            keys: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn with_capacity(
        kv_heads: usize,
        dim: usize,
        value_dim: usize,
        tokens: usize,
    ) -> Result<Self> {
        let mut c = Self::new(kv_heads, dim, value_dim)?;
        c.keys.reserve_exact(tokens * kv_heads * dim);
        c.values.reserve_exact(tokens * kv_heads * value_dim);
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    /// Appends `kv_heads×D` keys and `kv_heads×E` values.
    pub fn append(&mut self, k: &Matrix, v: &Matrix) -> Result<usize> {
        if k.shape() != (self.kv_heads, self.dim) || v.shape() != (self.kv_heads, self.value_dim) {
            return Err(TpaError::shape(
                "DenseKvCache::append",
                format!(
                    "k ({}, {}), v ({}, {})",
                    self.kv_heads, self.dim, self.kv_heads, self.value_dim
                ),
                format!("k {:?}, v {:?}", k.shape(), v.shape()),
            ));
        }
        self.keys.extend_from_slice(k.as_slice());
        self.values.extend_from_slice(v.as_slice());
        self.len += 1;
        Ok(self.len)
    }

    pub fn bytes(&self, element_bytes: usize) -> usize {
        (self.keys.len() + self.values.len()) * element_bytes
    }
}

/// Softmax attention of an `H×D` query over the dense cache; query head `i`
/// reads key/value head `i / (H / kv_heads)`.
pub fn dense_decode<S: MacSink>(q: &Matrix, cache: &DenseKvCache, sink: &mut S) -> Result<Matrix> {
    if cache.is_empty() {
        return Err(TpaError::Empty("decode against an empty cache"));
    }
    let (h, d) = q.shape();
    if d != cache.dim || h % cache.kv_heads != 0 {
        return Err(TpaError::shape(
            "dense_decode query",
            format!("multiple of {} heads x {}", cache.kv_heads, cache.dim),
            format!("{h} x {d}"),
        ));
    }
    let per = h / cache.kv_heads;
    let (g, e, m) = (cache.kv_heads, cache.value_dim, cache.len);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(h, e);
    let mut logits = vec![0.0; m];
    for i in 0..h {
        let j = i / per;
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (t, l) in logits.iter_mut().enumerate() {
            let k = &cache.keys[(t * g + j) * d..(t * g + j + 1) * d];
            *l = dot(qi, k) * scale;
            max = max.max(*l);
        }
        sink.score((m * d) as u64);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (t, &l) in logits.iter().enumerate() {
            let p = (l - max).exp();
            sum += p;
            let v = &cache.values[(t * g + j) * e..(t * g + j + 1) * e];
            for (oe, &ve) in o.iter_mut().zip(v) {
                *oe += p * ve;
            }
        }
        sink.value((m * e) as u64);
        for oe in o.iter_mut() {
            *oe /= sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_reference, HeadTensor};
    use crate::counters::{MacCounts, NoCount};
    use crate::sample::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_reference_for_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cache = DenseKvCache::new(3, 4, 5).unwrap();
        let (mut ks, mut vs) = (Vec::new(), Vec::new());
        for _ in 0..6 {
            let (k, v) = (random_matrix(3, 4, &mut rng), random_matrix(3, 5, &mut rng));
            cache.append(&k, &v).unwrap();
            ks.push(k);
            vs.push(v);
        }
        let q = random_matrix(3, 4, &mut rng);
        let out = dense_decode(&q, &cache, &mut NoCount).unwrap();
        let expected = attention_reference(
            &HeadTensor::from_tokens(&[q]).unwrap(),
            &HeadTensor::from_tokens(&ks).unwrap(),
            &HeadTensor::from_tokens(&vs).unwrap(),
            false,
        )
        .unwrap();
        assert!(out.max_abs_diff(&expected.token(0)) < 1e-14);
    }

    #[test]
    fn grouped_heads_share_kv_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cache = DenseKvCache::new(1, 4, 4).unwrap();
        for _ in 0..5 {
            cache
                .append(
                    &random_matrix(1, 4, &mut rng),
                    &random_matrix(1, 4, &mut rng),
                )
                .unwrap();
        }
        let row = random_matrix(1, 4, &mut rng);
        let q = Matrix::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let mut counts = MacCounts::default();
        let out = dense_decode(&q, &cache, &mut counts).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(counts.mac_score, 2 * 5 * 4);
        assert_eq!(counts.mac_value, 2 * 5 * 4);
    }
}
