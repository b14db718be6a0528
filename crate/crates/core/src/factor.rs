//! Contextual factorization of queries, keys and values.
//!
//! Every token `x_t` is mapped to a pair of factor matrices per projection,
//! `A (R×h)` and `B (R×d_h)`, and the head tensor is `(1/R)·Aᵀ·B`. Weight
//! matrices use the merged-rank layout: one `(R·h)×d_model` map whose output is
//! reshaped row-major into `R×h`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpaError};
use crate::linalg::{matvec, outer, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// All factors contextual.
    Full,
    /// Dense query projection, factorized keys and values.
    KvOnly,
    /// Head-dimension factors are fixed parameters.
    NonContextualA,
    /// Feature-dimension factors are fixed parameters.
    NonContextualB,
    /// Keys and values share the feature-factor map.
    SharedB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    Second,
    /// The feature factor is `vec(b ⊗ c)` with `d_h = d_b·d_c`.
    Third,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rank_q: usize,
    pub rank_k: usize,
    pub rank_v: usize,
    pub variant: Variant,
    pub order: Order,
    #[serde(default)]
    pub d_b: usize,
    #[serde(default)]
    pub d_c: usize,
    /// Feature size of the value factors; `head_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_dim: Option<usize>,
}

impl TpaConfig {
    pub fn new(
        d_model: usize,
        heads: usize,
        head_dim: usize,
        rank_q: usize,
        rank_k: usize,
        rank_v: usize,
    ) -> Self {
        Self {
            d_model,
            heads,
            head_dim,
            rank_q,
            rank_k,
            rank_v,
            variant: Variant::Full,
            order: Order::Second,
            d_b: 0,
            d_c: 0,
            value_dim: None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn third_order(mut self, d_b: usize, d_c: usize) -> Self {
        self.order = Order::Third;
        self.d_b = d_b;
        self.d_c = d_c;
        self
    }

    pub fn with_value_dim(mut self, value_dim: usize) -> Self {
        self.value_dim = Some(value_dim);
        self
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim.unwrap_or(self.head_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(TpaError::Config(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("rank_q", self.rank_q),
            ("rank_k", self.rank_k),
            ("rank_v", self.rank_v),
            ("value_dim", self.value_dim()),
        ] {
            if v == 0 {
                return cfg_err(format!("{name} must be at least 1"));
            }
        }
        if self.order == Order::Third {
            if self.d_b * self.d_c != self.head_dim {
                return cfg_err(format!(
                    "third order needs d_b*d_c == head_dim ({}*{} != {})",
                    self.d_b, self.d_c, self.head_dim
                ));
            }
            if !self.d_b.is_multiple_of(2) {
                return cfg_err(format!("d_b must be even for RoPE, got {}", self.d_b));
            }
            if self.variant != Variant::Full {
                return cfg_err("third order is only defined for the Full variant".into());
            }
            if self.value_dim() != self.head_dim {
                return cfg_err("third order requires value_dim == head_dim".into());
            }
        }
        if self.variant == Variant::SharedB {
            if self.rank_k != self.rank_v {
                return cfg_err("SharedB requires rank_k == rank_v".into());
            }
            if self.value_dim() != self.head_dim {
                return cfg_err("SharedB requires value_dim == head_dim".into());
            }
        }
        Ok(())
    }
}

/// Xavier-uniform bound `sqrt(6 / (n_in + n_out))`.
pub fn xavier_bound(n_in: usize, n_out: usize) -> f64 {
    (6.0 / (n_in + n_out) as f64).sqrt()
}

/// `n_out × n_in` matrix with entries drawn from `U(-bound, bound)`.
pub fn xavier_init(n_in: usize, n_out: usize, seed: u64) -> Matrix {
    xavier_init_with(n_in, n_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn xavier_init_with<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Matrix {
    let bound = xavier_bound(n_in, n_out);
    Matrix::from_fn(n_out, n_in, |_, _| rng.random_range(-bound..=bound))
}

/// One factor of a projection: either a linear map of the hidden state or a
/// fixed matrix shared by every token.
#[derive(Debug, Clone)]
pub enum FactorMap {
    /// `(R·n)×d_model` merged-rank weight.
    Contextual(Arc<Matrix>),
    /// `R×n` fixed factor rows.
    Fixed(Arc<Matrix>),
}

impl FactorMap {
    fn produce(&self, x: &[f64], rank: usize, width: usize) -> Result<Matrix> {
        match self {
            FactorMap::Contextual(w) => Matrix::new(rank, width, matvec(w, x)?),
            FactorMap::Fixed(m) => Ok((**m).clone()),
        }
    }

    pub fn matrix(&self) -> &Arc<Matrix> {
        match self {
            FactorMap::Contextual(m) | FactorMap::Fixed(m) => m,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, FactorMap::Fixed(_))
    }

    fn check(&self, what: &'static str, rank: usize, width: usize, d_model: usize) -> Result<()> {
        let expected = match self {
            FactorMap::Contextual(_) => (rank * width, d_model),
            FactorMap::Fixed(_) => (rank, width),
        };
        if self.matrix().shape() != expected {
            return Err(TpaError::shape(
                what,
                format!("{expected:?}"),
                format!("{:?}", self.matrix().shape()),
            ));
        }
        Ok(())
    }
}

/// Factor maps for one of Q/K/V.
#[derive(Debug, Clone)]
pub struct FactorMaps {
    pub a: FactorMap,
    pub b: FactorMap,
    /// Third-order `(R·d_c)×d_model` map; `b` is then `(R·d_b)×d_model`.
    pub c: Option<Arc<Matrix>>,
}

#[derive(Debug, Clone)]
pub enum QueryMap {
    Factored(FactorMaps),
    /// KVonly: `(h·d_h)×d_model` dense projection.
    Dense(Arc<Matrix>),
}

#[derive(Debug, Clone)]
pub struct FactorWeights {
    pub cfg: TpaConfig,
    pub query: QueryMap,
    pub key: FactorMaps,
    pub value: FactorMaps,
    /// `(h·E)×d_model` output projection.
    pub w_o: Arc<Matrix>,
}

impl FactorWeights {
    /// Xavier-initialized weights for `cfg`, deterministic in `seed`.
    pub fn init(cfg: &TpaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let h = cfg.heads;
        let e = cfg.value_dim();
        let maps = |rank: usize, feat: usize, rng: &mut ChaCha8Rng| -> FactorMaps {
            let a = match cfg.variant {
                Variant::NonContextualA => {
                    FactorMap::Fixed(Arc::new(xavier_init_with(h, rank, rng)))
                }
                _ => FactorMap::Contextual(Arc::new(xavier_init_with(d, rank * h, rng))),
            };
            let (b, c) = match (cfg.variant, cfg.order) {
                (Variant::NonContextualB, _) => (
                    FactorMap::Fixed(Arc::new(xavier_init_with(feat, rank, rng))),
                    None,
                ),
                (_, Order::Third) => (
                    FactorMap::Contextual(Arc::new(xavier_init_with(d, rank * cfg.d_b, rng))),
                    Some(Arc::new(xavier_init_with(d, rank * cfg.d_c, rng))),
                ),
                _ => (
                    FactorMap::Contextual(Arc::new(xavier_init_with(d, rank * feat, rng))),
                    None,
                ),
            };
            FactorMaps { a, b, c }
        };
        let query = match cfg.variant {
            Variant::KvOnly => {
                QueryMap::Dense(Arc::new(xavier_init_with(d, h * cfg.head_dim, &mut rng)))
            }
            _ => QueryMap::Factored(maps(cfg.rank_q, cfg.head_dim, &mut rng)),
        };
        let key = maps(cfg.rank_k, cfg.head_dim, &mut rng);
        let mut value = maps(cfg.rank_v, e, &mut rng);
        if cfg.variant == Variant::SharedB {
            value.b = key.b.clone();
        }
        let w_o = Arc::new(xavier_init_with(d, h * e, &mut rng));
        let w = Self {
            cfg: cfg.clone(),
            query,
            key,
            value,
            w_o,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.cfg;
        cfg.validate()?;
        let d = cfg.d_model;
        let feat = |dim: usize| {
            if cfg.order == Order::Third {
                cfg.d_b
            } else {
                dim
            }
        };
        let check = |maps: &FactorMaps, rank: usize, dim: usize| -> Result<()> {
            maps.a.check("a factor", rank, cfg.heads, d)?;
            maps.b.check("b factor", rank, feat(dim), d)?;
            match (&maps.c, cfg.order) {
                (Some(c), Order::Third) if c.shape() == (rank * cfg.d_c, d) => Ok(()),
                (Some(c), Order::Third) => Err(TpaError::shape(
                    "c factor",
                    format!("({}, {d})", rank * cfg.d_c),
                    format!("{:?}", c.shape()),
                )),
                (None, Order::Second) => Ok(()),
                _ => Err(TpaError::Config(
                    "c factor present iff order is Third".into(),
                )),
            }
        };
        match &self.query {
            QueryMap::Factored(q) => check(q, cfg.rank_q, cfg.head_dim)?,
            QueryMap::Dense(w) => {
                if w.shape() != (cfg.heads * cfg.head_dim, d) {
                    return Err(TpaError::shape(
                        "dense query",
                        format!("({}, {d})", cfg.heads * cfg.head_dim),
                        format!("{:?}", w.shape()),
                    ));
                }
            }
        }
        if (cfg.variant == Variant::KvOnly) != matches!(self.query, QueryMap::Dense(_)) {
            return Err(TpaError::Config(
                "dense query projection iff variant is KvOnly".into(),
            ));
        }
        check(&self.key, cfg.rank_k, cfg.head_dim)?;
        check(&self.value, cfg.rank_v, cfg.value_dim())?;
        if cfg.variant == Variant::SharedB && !self.shares_b() {
            return Err(TpaError::Config(
                "SharedB weights must alias the key and value b maps".into(),
            ));
        }
        if self.w_o.shape() != (cfg.heads * cfg.value_dim(), d) {
            return Err(TpaError::shape(
                "w_o",
                format!("({}, {d})", cfg.heads * cfg.value_dim()),
                format!("{:?}", self.w_o.shape()),
            ));
        }
        Ok(())
    }

    /// Whether the key and value feature maps are the same object.
    pub fn shares_b(&self) -> bool {
        Arc::ptr_eq(self.key.b.matrix(), self.value.b.matrix())
    }
}

/// Factor matrices of one token for one of Q/K/V.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBlock {
    /// `R×h`, row `r` is `a_r`.
    pub a: Matrix,
    /// `R×d_h` (or `R×d_b` for third order), row `r` is `b_r`.
    pub b: Matrix,
    /// `R×d_c` for third order.
    pub c: Option<Matrix>,
}

impl FactorBlock {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let block = Self { a, b, c: None };
        block.validate()?;
        Ok(block)
    }

    pub fn third_order(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let block = Self { a, b, c: Some(c) };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.rows() != self.b.rows() {
            return Err(TpaError::shape(
                "FactorBlock rank",
                self.a.rows(),
                self.b.rows(),
            ));
        }
        if let Some(c) = &self.c {
            if c.rows() != self.a.rows() {
                return Err(TpaError::shape(
                    "FactorBlock rank (c)",
                    self.a.rows(),
                    c.rows(),
                ));
            }
        }
        if self.a.rows() == 0 {
            return Err(TpaError::Empty("factor block with rank 0"));
        }
        Ok(())
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.a.cols()
    }

    /// Width of the materialized feature dimension.
    pub fn feature_dim(&self) -> usize {
        match &self.c {
            Some(c) => self.b.cols() * c.cols(),
            None => self.b.cols(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.as_ref().is_none_or(Matrix::is_finite)
    }

    /// Collapses a third-order block into the equivalent second-order one
    /// whose `b` rows are `vec(b_r ⊗ c_r)`.
    pub fn to_second_order(&self) -> FactorBlock {
        match &self.c {
            None => self.clone(),
            Some(c) => {
                let rows: Vec<Vec<f64>> = (0..self.rank())
                    .map(|r| vec_outer(self.b.row(r), c.row(r)))
                    .collect();
                FactorBlock {
                    a: self.a.clone(),
                    b: Matrix::from_rows(&rows).expect("equal-length rows"),
                    c: None,
                }
            }
        }
    }

    /// `(1/R)·Σ_r a_r ⊗ feature_r` as an `h×d_h` matrix.
    pub fn materialize(&self) -> Matrix {
        match &self.c {
            None => materialize(self),
            Some(_) => materialize(&self.to_second_order()),
        }
    }
}

/// Column-stacked `vec(b ⊗ c)`: entry `j·d_b + i` is `b_i·c_j`.
pub fn vec_outer(b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.len() * c.len());
    for &cj in c {
        out.extend(b.iter().map(|&bi| bi * cj));
    }
    out
}

/// `(1/R)·Aᵀ·B`.
pub fn materialize(block: &FactorBlock) -> Matrix {
    let rank = block.rank();
    let (h, d) = (block.a.cols(), block.b.cols());
    let scale = 1.0 / rank as f64;
    let mut out = Matrix::zeros(h, d);
    for r in 0..rank {
        let brow = block.b.row(r);
        for i in 0..h {
            let air = block.a[(r, i)];
            for (o, &b) in out.row_mut(i).iter_mut().zip(brow) {
                *o += air * b;
            }
        }
    }
    for v in out.as_mut_slice() {
        *v *= scale;
    }
    out
}

/// `(1/R)·Σ_r a_r ⊗ vec(b_r ⊗ c_r)`.
pub fn materialize_third_order(block: &FactorBlock, d_h: usize) -> Result<Matrix> {
    let c = block
        .c
        .as_ref()
        .ok_or_else(|| TpaError::Config("block has no third-order c factor".into()))?;
    if block.b.cols() * c.cols() != d_h {
        return Err(TpaError::Config(format!(
            "d_b*d_c = {}*{} does not match d_h = {d_h}",
            block.b.cols(),
            c.cols()
        )));
    }
    let scale = 1.0 / block.rank() as f64;
    let mut out = Matrix::zeros(block.heads(), d_h);
    for r in 0..block.rank() {
        let term = outer(block.a.row(r), &vec_outer(block.b.row(r), c.row(r)));
        out = out.add(&term)?;
    }
    Ok(out.scale(scale))
}

/// Query representation handed to attention: factorized, or dense for KVonly.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Factored(FactorBlock),
    /// `h×d_h` dense query.
    Dense(Matrix),
}

impl Query {
    pub fn materialize(&self) -> Matrix {
        match self {
            Query::Factored(b) => b.materialize(),
            Query::Dense(m) => m.clone(),
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            Query::Factored(b) => b.heads(),
            Query::Dense(m) => m.rows(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Query::Factored(b) => b.feature_dim(),
            Query::Dense(m) => m.cols(),
        }
    }

    pub fn as_factored(&self) -> Option<&FactorBlock> {
        match self {
            Query::Factored(b) => Some(b),
            Query::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenFactors {
    pub q: Query,
    pub k: FactorBlock,
    pub v: FactorBlock,
}

fn apply_maps(
    maps: &FactorMaps,
    cfg: &TpaConfig,
    x: &[f64],
    rank: usize,
    dim: usize,
) -> Result<FactorBlock> {
    let a = maps.a.produce(x, rank, cfg.heads)?;
    match &maps.c {
        Some(wc) => {
            let b = maps.b.produce(x, rank, cfg.d_b)?;
            let c = Matrix::new(rank, cfg.d_c, matvec(wc, x)?)?;
            FactorBlock::third_order(a, b, c)
        }
        None => FactorBlock::new(a, maps.b.produce(x, rank, dim)?),
    }
}

/// Factor matrices of token `x_t` for Q, K and V.
pub fn compute_factors(w: &FactorWeights, x: &[f64]) -> Result<TokenFactors> {
    let cfg = &w.cfg;
    if x.len() != cfg.d_model {
        return Err(TpaError::shape(
            "compute_factors input",
            cfg.d_model,
            x.len(),
        ));
    }
    let q = match &w.query {
        QueryMap::Factored(maps) => {
            Query::Factored(apply_maps(maps, cfg, x, cfg.rank_q, cfg.head_dim)?)
        }
        QueryMap::Dense(wq) => Query::Dense(Matrix::new(cfg.heads, cfg.head_dim, matvec(wq, x)?)?),
    };
    Ok(TokenFactors {
        q,
        k: apply_maps(&w.key, cfg, x, cfg.rank_k, cfg.head_dim)?,
        v: apply_maps(&w.value, cfg, x, cfg.rank_v, cfg.value_dim())?,
    })
}
