//! Materialized multi-head attention, used as the ground-truth oracle, and the
//! constructions that express MHA, MQA and GQA as non-contextual factorizations.

use std::sync::Arc;

use crate::error::{Result, TpaError};
use crate::factor::{
    compute_factors, FactorMap, FactorMaps, FactorWeights, QueryMap, TpaConfig, Variant,
};
use crate::linalg::{is_masked, softmax_lse, vecmat, Matrix, MASK_NEG};
use crate::rope::{apply_rope_rows, RopeTable};

/// Dense `T×h×d` tensor, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    tokens: usize,
    heads: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HeadTensor {
    pub fn zeros(tokens: usize, heads: usize, dim: usize) -> Self {
        Self {
            tokens,
            heads,
            dim,
            data: vec![0.0; tokens * heads * dim],
        }
    }

    pub fn new(tokens: usize, heads: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens * heads * dim {
            return Err(TpaError::shape(
                "HeadTensor::new",
                tokens * heads * dim,
                data.len(),
            ));
        }
        Ok(Self {
            tokens,
            heads,
            dim,
            data,
        })
    }

    /// Stacks per-token `h×d` matrices.
    pub fn from_tokens(slices: &[Matrix]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or(TpaError::Empty("HeadTensor::from_tokens"))?;
        let (heads, dim) = first.shape();
        let mut data = Vec::with_capacity(slices.len() * heads * dim);
        for m in slices {
            if m.shape() != (heads, dim) {
                return Err(TpaError::shape(
                    "HeadTensor::from_tokens",
                    format!("({heads}, {dim})"),
                    format!("{:?}", m.shape()),
                ));
            }
            data.extend_from_slice(m.as_slice());
        }
        Self::new(slices.len(), heads, dim, data)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, t: usize, h: usize) -> &[f64] {
        let start = (t * self.heads + h) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn vector_mut(&mut self, t: usize, h: usize) -> &mut [f64] {
        let start = (t * self.heads + h) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// The `h×d` slice of token `t`.
    pub fn token(&self, t: usize) -> Matrix {
        let n = self.heads * self.dim;
        Matrix::new(self.heads, self.dim, self.data[t * n..(t + 1) * n].to_vec())
            .expect("slice length matches")
    }

    /// `T×(h·d)` view with heads concatenated along the feature axis.
    pub fn concat_heads(&self) -> Matrix {
        Matrix::new(self.tokens, self.heads * self.dim, self.data.clone()).expect("sizes match")
    }

    pub fn max_abs_diff(&self, other: &HeadTensor) -> f64 {
        if (self.tokens, self.heads, self.dim) != (other.tokens, other.heads, other.dim) {
            return f64::INFINITY;
        }
        crate::linalg::max_abs_diff(&self.data, &other.data)
    }
}

/// `T_q×T_k` additive mask where query `i` sits at position `T_k − T_q + i`
/// and may see keys at positions `≤` its own.
pub fn causal_mask(t_q: usize, t_k: usize) -> Matrix {
    let offset = t_k as isize - t_q as isize;
    Matrix::from_fn(t_q, t_k, |i, j| {
        if (j as isize) <= i as isize + offset {
            0.0
        } else {
            MASK_NEG
        }
    })
}

/// Per-head `Softmax(Q_i K_iᵀ / √d) V_i`.
pub fn attention_reference(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    causal: bool,
) -> Result<HeadTensor> {
    let mask = causal.then(|| causal_mask(q.tokens, k.tokens));
    attention_reference_masked(q, k, v, mask.as_ref())
}

pub fn attention_reference_masked(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    mask: Option<&Matrix>,
) -> Result<HeadTensor> {
    if q.tokens == 0 || k.tokens == 0 {
        return Err(TpaError::Empty("attention over an empty sequence"));
    }
    if q.heads != k.heads || q.heads != v.heads || q.dim != k.dim || k.tokens != v.tokens {
        return Err(TpaError::shape(
            "attention_reference",
            format!("Q {}x{}x{} compatible with K", q.tokens, q.heads, q.dim),
            format!(
                "K {}x{}x{}, V {}x{}x{}",
                k.tokens, k.heads, k.dim, v.tokens, v.heads, v.dim
            ),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != (q.tokens, k.tokens) {
            return Err(TpaError::shape(
                "attention mask",
                format!("({}, {})", q.tokens, k.tokens),
                format!("{:?}", m.shape()),
            ));
        }
    }
    let scale = 1.0 / (q.dim as f64).sqrt();
    let mut out = HeadTensor::zeros(q.tokens, q.heads, v.dim);
    let mut logits = vec![0.0; k.tokens];
    for t in 0..q.tokens {
        let row_mask = mask.map(|m| m.row(t));
        for h in 0..q.heads {
            let qv = q.vector(t, h);
            for (s, l) in logits.iter_mut().enumerate() {
                *l = crate::linalg::dot(qv, k.vector(s, h)) * scale;
            }
            let (probs, _) = softmax_lse(&logits, row_mask).map_err(|e| match e {
                TpaError::DegenerateRow { .. } => TpaError::DegenerateRow { row: t },
                other => other,
            })?;
            let o = out.vector_mut(t, h);
            for (s, &p) in probs.iter().enumerate() {
                if p == 0.0 && row_mask.is_some_and(|m| is_masked(m[s])) {
                    continue;
                }
                for (oe, &ve) in o.iter_mut().zip(v.vector(s, h)) {
                    *oe += p * ve;
                }
            }
        }
    }
    Ok(out)
}

/// Materialized Q/K/V of a token sequence (`T×d_model`), optionally with RoPE
/// applied row-wise to the materialized queries and keys.
pub fn materialize_sequence(
    w: &FactorWeights,
    xs: &Matrix,
    rope: Option<&RopeTable>,
) -> Result<(HeadTensor, HeadTensor, HeadTensor)> {
    let mut qs = Vec::with_capacity(xs.rows());
    let mut ks = Vec::with_capacity(xs.rows());
    let mut vs = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let f = compute_factors(w, xs.row(t))?;
        let (mut q, mut k) = (f.q.materialize(), f.k.materialize());
        if let Some(table) = rope {
            q = apply_rope_rows(table, t as i64, &q)?;
            k = apply_rope_rows(table, t as i64, &k)?;
        }
        qs.push(q);
        ks.push(k);
        vs.push(f.v.materialize());
    }
    Ok((
        HeadTensor::from_tokens(&qs)?,
        HeadTensor::from_tokens(&ks)?,
        HeadTensor::from_tokens(&vs)?,
    ))
}

/// Materialize-then-attend forward pass for any factor weights.
pub fn materialized_forward(
    w: &FactorWeights,
    xs: &Matrix,
    rope: Option<&RopeTable>,
    causal: bool,
) -> Result<HeadTensor> {
    let (q, k, v) = materialize_sequence(w, xs, rope)?;
    attention_reference(&q, &k, &v, causal)
}

/// Per-head projections of a grouped-query attention layer.
///
/// `w_q` has one `d_model×d_h` matrix per query head; `w_k`/`w_v` have one per
/// key/value group. MHA is `groups == heads`, MQA is `groups == 1`.
#[derive(Debug, Clone)]
pub struct GroupedWeights {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `(h·d_h)×d_model`.
    pub w_o: Matrix,
}

impl GroupedWeights {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn groups(&self) -> usize {
        self.w_k.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::rows)
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::cols)
    }

    pub fn random<R: rand::Rng + ?Sized>(
        d_model: usize,
        heads: usize,
        groups: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        use crate::sample::random_matrix;
        Self {
            w_q: (0..heads)
                .map(|_| random_matrix(d_model, head_dim, rng))
                .collect(),
            w_k: (0..groups)
                .map(|_| random_matrix(d_model, head_dim, rng))
                .collect(),
            w_v: (0..groups)
                .map(|_| random_matrix(d_model, head_dim, rng))
                .collect(),
            w_o: random_matrix(heads * head_dim, d_model, rng),
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, g) = (self.heads(), self.groups());
        if h == 0 || g == 0 || self.w_v.len() != g {
            return Err(TpaError::Config(format!(
                "need at least one head and matching K/V groups (h={h}, k={g}, v={})",
                self.w_v.len()
            )));
        }
        if h % g != 0 {
            return Err(TpaError::Config(format!(
                "{h} heads not divisible into {g} groups"
            )));
        }
        let shape = (self.d_model(), self.head_dim());
        if self
            .w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .any(|m| m.shape() != shape)
        {
            return Err(TpaError::shape(
                "head projection",
                format!("{shape:?}"),
                "mixed shapes",
            ));
        }
        if self.w_o.shape() != (h * shape.1, shape.0) {
            return Err(TpaError::shape(
                "w_o",
                format!("({}, {})", h * shape.1, shape.0),
                format!("{:?}", self.w_o.shape()),
            ));
        }
        Ok(())
    }
}

/// Rows `i·d_h..(i+1)·d_h` hold `W_iᵀ`, so `W_b·x` stacks `W_iᵀ·x`.
fn stack_transposed(ws: &[Matrix]) -> Matrix {
    let (d, dh) = ws[0].shape();
    let mut out = Matrix::zeros(ws.len() * dh, d);
    for (i, w) in ws.iter().enumerate() {
        for e in 0..dh {
            for j in 0..d {
                out[(i * dh + e, j)] = w[(j, e)];
            }
        }
    }
    out
}

fn contextual_b(ws: &[Matrix]) -> FactorMap {
    FactorMap::Contextual(Arc::new(stack_transposed(ws)))
}

fn assemble(w: &GroupedWeights, a_q: Matrix, a_k: Matrix, a_v: Matrix) -> Result<FactorWeights> {
    let (h, g) = (w.heads(), w.groups());
    let mut cfg = TpaConfig::new(w.d_model(), h, w.head_dim(), h, g, g);
    cfg.variant = Variant::NonContextualA;
    let out = FactorWeights {
        cfg,
        query: QueryMap::Factored(FactorMaps {
            a: FactorMap::Fixed(Arc::new(a_q)),
            b: contextual_b(&w.w_q),
            c: None,
        }),
        key: FactorMaps {
            a: FactorMap::Fixed(Arc::new(a_k)),
            b: contextual_b(&w.w_k),
            c: None,
        },
        value: FactorMaps {
            a: FactorMap::Fixed(Arc::new(a_v)),
            b: contextual_b(&w.w_v),
            c: None,
        },
        w_o: Arc::new(w.w_o.clone()),
    };
    out.validate()?;
    Ok(out)
}

/// `a_i = h·e_i` for every head; the `1/h` prefactor cancels.
fn scaled_basis(h: usize) -> Matrix {
    Matrix::from_fn(h, h, |i, j| if i == j { h as f64 } else { 0.0 })
}

/// MHA as non-contextual TPA with `R_Q = R_K = R_V = h`.
pub fn mha_as_tpa(w: &GroupedWeights) -> Result<FactorWeights> {
    w.validate()?;
    let h = w.heads();
    if w.groups() != h {
        return Err(TpaError::Config(format!(
            "MHA needs one K/V projection per head, got {}",
            w.groups()
        )));
    }
    assemble(w, scaled_basis(h), scaled_basis(h), scaled_basis(h))
}

/// MQA: full-rank queries, `R_K = R_V = 1` with `a^K = a^V = 1_h`.
pub fn mqa_as_tpa(w: &GroupedWeights) -> Result<FactorWeights> {
    w.validate()?;
    if w.groups() != 1 {
        return Err(TpaError::Config(format!(
            "MQA has one shared K/V projection, got {}",
            w.groups()
        )));
    }
    let ones = Matrix::from_fn(1, w.heads(), |_, _| 1.0);
    assemble(w, scaled_basis(w.heads()), ones.clone(), ones)
}

/// GQA with `G` contiguous groups: `a_j = G·mask_j`.
pub fn gqa_as_tpa(w: &GroupedWeights) -> Result<FactorWeights> {
    w.validate()?;
    let (h, g) = (w.heads(), w.groups());
    let per = h / g;
    let masks = Matrix::from_fn(g, h, |j, i| if i / per == j { g as f64 } else { 0.0 });
    assemble(w, scaled_basis(h), masks.clone(), masks)
}

/// Direct grouped-query attention on projected per-head vectors; the native
/// formulation the constructors above are checked against.
pub fn grouped_attention_native(
    w: &GroupedWeights,
    xs: &Matrix,
    rope: Option<&RopeTable>,
    causal: bool,
) -> Result<HeadTensor> {
    w.validate()?;
    let (h, g, dh) = (w.heads(), w.groups(), w.head_dim());
    let t_len = xs.rows();
    if t_len == 0 {
        return Err(TpaError::Empty("attention over an empty sequence"));
    }
    let per = h / g;
    let project = |ws: &[Matrix], rotate: bool| -> Result<Vec<Vec<Vec<f64>>>> {
        (0..t_len)
            .map(|t| {
                ws.iter()
                    .map(|m| {
                        let mut v = vecmat(xs.row(t), m)?;
                        if let (true, Some(table)) = (rotate, rope) {
                            table.rotate_row(t as i64, &mut v);
                        }
                        Ok(v)
                    })
                    .collect()
            })
            .collect()
    };
    let q = project(&w.w_q, true)?;
    let k = project(&w.w_k, true)?;
    let v = project(&w.w_v, false)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = HeadTensor::zeros(t_len, h, dh);
    for (t, q_t) in q.iter().enumerate() {
        let visible = if causal { t + 1 } else { t_len };
        for (i, q_ti) in q_t.iter().enumerate() {
            let j = i / per;
            let scores: Vec<f64> = (0..visible)
                .map(|s| q_ti.iter().zip(&k[s][j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let o = out.vector_mut(t, i);
            for (s, e) in exps.iter().enumerate() {
                for (oe, ve) in o.iter_mut().zip(&v[s][j]) {
                    *oe += e / z * ve;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(t: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> HeadTensor {
        HeadTensor::new(t, h, d, random_matrix(1, t * h * d, rng).into_vec()).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_tensor(1, 2, 3, &mut rng);
        let k = random_tensor(1, 2, 3, &mut rng);
        let v = random_tensor(1, 2, 3, &mut rng);
        assert_eq!(attention_reference(&q, &k, &v, true).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_tensor(1, 1, 4, &mut rng);
        let key = random_matrix(1, 4, &mut rng).into_vec();
        let k = HeadTensor::new(3, 1, 4, key.repeat(3)).unwrap();
        let v = random_tensor(3, 1, 2, &mut rng);
        let out = attention_reference(&q, &k, &v, false).unwrap();
        for e in 0..2 {
            let mean = (0..3).map(|s| v.vector(s, 0)[e]).sum::<f64>() / 3.0;
            assert!((out.vector(0, 0)[e] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let q = HeadTensor::zeros(0, 1, 2);
        assert!(matches!(
            attention_reference(&q, &q, &q, false),
            Err(TpaError::Empty(_))
        ));
    }

    #[test]
    fn fully_masked_row_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_tensor(2, 1, 2, &mut rng);
        let mask = Matrix::from_rows(&[[0.0, 0.0], [MASK_NEG, MASK_NEG]]).unwrap();
        let err = attention_reference_masked(&q, &q, &q, Some(&mask)).unwrap_err();
        assert!(matches!(err, TpaError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn causal_mask_alignment() {
        let m = causal_mask(2, 4);
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0, MASK_NEG]);
        assert_eq!(m.row(1), &[0.0; 4]);
    }

    #[test]
    fn gqa_mask_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = GroupedWeights::random(6, 8, 2, 3, &mut rng);
        let tpa = gqa_as_tpa(&w).unwrap();
        let a = tpa.key.a.matrix();
        assert_eq!(a.row(0), &[2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.row(1), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gqa_rejects_uneven_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = GroupedWeights::random(6, 6, 4, 3, &mut rng);
        assert!(matches!(gqa_as_tpa(&w), Err(TpaError::Config(_))));
    }

    #[test]
    fn mha_rows_are_head_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = GroupedWeights::random(5, 2, 2, 3, &mut rng);
        let tpa = mha_as_tpa(&w).unwrap();
        let x = crate::sample::random_vector(5, &mut rng);
        let f = compute_factors(&tpa, &x).unwrap();
        let q = f.q.materialize();
        for i in 0..2 {
            let direct = vecmat(&x, &w.w_q[i]).unwrap();
            assert!(crate::linalg::max_abs_diff(q.row(i), &direct) < 1e-15);
        }
    }

    #[test]
    fn mqa_rows_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = GroupedWeights::random(5, 3, 1, 4, &mut rng);
        let tpa = mqa_as_tpa(&w).unwrap();
        let f = compute_factors(&tpa, &crate::sample::random_vector(5, &mut rng)).unwrap();
        let k = f.k.materialize();
        assert_eq!(k.row(0), k.row(1));
        assert_eq!(k.row(1), k.row(2));
    }
}
