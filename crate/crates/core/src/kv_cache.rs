//! Append-only factorized KV cache.
//!
//! Each token contributes `A_K (R_K×h)`, pre-rotated `B̃_K (R_K×d_h)`,
//! `A_V (R_V×h)` and `B_V (R_V×E)`, stored in four flat arrays.

use crate::error::{Result, TpaError};
use crate::factor::{FactorBlock, Order, TpaConfig};
use crate::linalg::Matrix;
use crate::rope::PreRotatedKey;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedKvCache {
    cfg: TpaConfig,
    len: usize,
    a_k: Vec<f64>,
    b_k: Vec<f64>,
    a_v: Vec<f64>,
    b_v: Vec<f64>,
}

impl FactorizedKvCache {
    pub fn new(cfg: &TpaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            len: 0,
            a_k: Vec::new(),
            b_k: Vec::new(),
            a_v: Vec::new(),
            b_v: Vec::new(),
        })
    }

    pub fn with_capacity(cfg: &TpaConfig, tokens: usize) -> Result<Self> {
        let mut cache = Self::new(cfg)?;
        let (rk, rv, h, d, e) = cache.dims();
        cache.a_k.reserve_exact(tokens * rk * h);
        cache.b_k.reserve_exact(tokens * rk * d);
        cache.a_v.reserve_exact(tokens * rv * h);
        cache.b_v.reserve_exact(tokens * rv * e);
        Ok(cache)
    }

    /// Rebuilds a cache from raw factor arrays (used by deserialization).
    pub fn from_parts(
        cfg: &TpaConfig,
        len: usize,
        a_k: Vec<f64>,
        b_k: Vec<f64>,
        a_v: Vec<f64>,
        b_v: Vec<f64>,
    ) -> Result<Self> {
        let mut cache = Self::new(cfg)?;
        let (rk, rv, h, d, e) = cache.dims();
        for (name, got, per) in [
            ("a_k", a_k.len(), rk * h),
            ("b_k", b_k.len(), rk * d),
            ("a_v", a_v.len(), rv * h),
            ("b_v", b_v.len(), rv * e),
        ] {
            if got != len * per {
                return Err(TpaError::Format(format!(
                    "{name} holds {got} values, expected {len}x{per}"
                )));
            }
        }
        if [&a_k, &b_k, &a_v, &b_v]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(TpaError::NonFinite("cache factors"));
        }
        cache.len = len;
        cache.a_k = a_k;
        cache.b_k = b_k;
        cache.a_v = a_v;
        cache.b_v = b_v;
        Ok(cache)
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let c = &self.cfg;
        (c.rank_k, c.rank_v, c.heads, c.head_dim, c.value_dim())
    }

    pub fn config(&self) -> &TpaConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rank_k(&self) -> usize {
        self.cfg.rank_k
    }

    pub fn rank_v(&self) -> usize {
        self.cfg.rank_v
    }

    pub fn heads(&self) -> usize {
        self.cfg.heads
    }

    pub fn key_dim(&self) -> usize {
        self.cfg.head_dim
    }

    pub fn value_dim(&self) -> usize {
        self.cfg.value_dim()
    }

    /// Appends one token. The key must have been rotated for position `len()`;
    /// third-order blocks are stored in their collapsed second-order form.
    pub fn append(&mut self, key: &PreRotatedKey, value: &FactorBlock) -> Result<usize> {
        if key.position() != self.len {
            return Err(TpaError::Position {
                rotated_at: key.position(),
                expected: self.len,
            });
        }
        let (rk, rv, h, d, e) = self.dims();
        let k = collapse(key.block(), &self.cfg);
        let v = collapse(value, &self.cfg);
        for (what, got, want) in [
            ("key a", k.a.shape(), (rk, h)),
            ("key b", k.b.shape(), (rk, d)),
            ("value a", v.a.shape(), (rv, h)),
            ("value b", v.b.shape(), (rv, e)),
        ] {
            if got != want {
                return Err(TpaError::shape(
                    what,
                    format!("{want:?}"),
                    format!("{got:?}"),
                ));
            }
        }
        if !k.is_finite() || !v.is_finite() {
            return Err(TpaError::NonFinite("appended factors"));
        }
        self.a_k.extend_from_slice(k.a.as_slice());
        self.b_k.extend_from_slice(k.b.as_slice());
        self.a_v.extend_from_slice(v.a.as_slice());
        self.b_v.extend_from_slice(v.b.as_slice());
        self.len += 1;
        Ok(self.len)
    }

    /// All cached `A_K`, token-major (`M·R_K·h`).
    pub fn a_k(&self) -> &[f64] {
        &self.a_k
    }

    pub fn b_k(&self) -> &[f64] {
        &self.b_k
    }

    pub fn a_v(&self) -> &[f64] {
        &self.a_v
    }

    pub fn b_v(&self) -> &[f64] {
        &self.b_v
    }

    /// Stored key factors of token `t`.
    pub fn key(&self, t: usize) -> Option<FactorBlock> {
        let (rk, _, h, d, _) = self.dims();
        (t < self.len).then(|| FactorBlock {
            a: slice_matrix(&self.a_k, t, rk, h),
            b: slice_matrix(&self.b_k, t, rk, d),
            c: None,
        })
    }

    pub fn value(&self, t: usize) -> Option<FactorBlock> {
        let (_, rv, h, _, e) = self.dims();
        (t < self.len).then(|| FactorBlock {
            a: slice_matrix(&self.a_v, t, rv, h),
            b: slice_matrix(&self.b_v, t, rv, e),
            c: None,
        })
    }

    /// Logical footprint: `bytes_per_token × len`.
    pub fn logical_bytes(&self, element_bytes: usize) -> usize {
        bytes_per_token(&self.cfg, element_bytes) * self.len
    }
}

fn collapse(block: &FactorBlock, cfg: &TpaConfig) -> FactorBlock {
    match (cfg.order, &block.c) {
        (Order::Third, Some(_)) => block.to_second_order(),
        _ => block.clone(),
    }
}

fn slice_matrix(data: &[f64], t: usize, rows: usize, cols: usize) -> Matrix {
    let n = rows * cols;
    Matrix::new(rows, cols, data[t * n..(t + 1) * n].to_vec()).expect("sizes match")
}

/// Numbers cached per token: `R_K(h + d_h) + R_V(h + E)`.
pub fn numbers_per_token(cfg: &TpaConfig) -> usize {
    cfg.rank_k * (cfg.heads + cfg.head_dim) + cfg.rank_v * (cfg.heads + cfg.value_dim())
}

pub fn bytes_per_token(cfg: &TpaConfig, element_bytes: usize) -> usize {
    numbers_per_token(cfg) * element_bytes
}

/// Factorized footprint relative to caching full `K_t` and `V_t`.
pub fn compression_ratio(cfg: &TpaConfig) -> f64 {
    let full = cfg.heads * cfg.head_dim + cfg.heads * cfg.value_dim();
    numbers_per_token(cfg) as f64 / full as f64
}
