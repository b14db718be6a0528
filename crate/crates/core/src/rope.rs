//! Rotary position embedding on factor rows.
//!
//! Vectors are rows and RoPE post-multiplies: `RoPE_t(v) = v·T_t` with
//! `T_t = R_tᵀ`, where `R_t` is block-diagonal with 2×2 blocks
//! `[[cos tθ_j, −sin tθ_j], [sin tθ_j, cos tθ_j]]`. Equivalently each coordinate
//! pair of `v` is rotated by `+tθ_j`. Because the map is linear it can be
//! applied to the `B` factor alone, which is what makes pre-rotated key caching
//! possible.

use crate::error::{Result, TpaError};
use crate::factor::{FactorBlock, Query};
use crate::linalg::Matrix;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    dim: usize,
    angles: Vec<f64>,
}

impl RopeTable {
    /// `θ_j = base^(−2j/dim)` for `j = 0..dim/2`.
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(TpaError::Config(format!(
                "RoPE dim must be even and positive, got {dim}"
            )));
        }
        if !(base > 1.0 && base.is_finite()) {
            return Err(TpaError::Config(format!(
                "RoPE base must exceed 1, got {base}"
            )));
        }
        let angles = (0..dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / dim as f64))
            .collect();
        Ok(Self { dim, angles })
    }

    /// Table with an explicit frequency schedule; `dim = 2·angles.len()`.
    pub fn with_angles(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() || angles.iter().any(|a| !a.is_finite()) {
            return Err(TpaError::Config(
                "RoPE angles must be finite and non-empty".into(),
            ));
        }
        Ok(Self {
            dim: 2 * angles.len(),
            angles,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// `R_t`.
    pub fn rotation_matrix(&self, t: i64) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.dim);
        for (j, &theta) in self.angles.iter().enumerate() {
            let (s, c) = (t as f64 * theta).sin_cos();
            let k = 2 * j;
            m[(k, k)] = c;
            m[(k, k + 1)] = -s;
            m[(k + 1, k)] = s;
            m[(k + 1, k + 1)] = c;
        }
        m
    }

    /// Rotates one row in place: `v ← v·R_tᵀ`.
    pub fn rotate_row(&self, t: i64, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        for (j, &theta) in self.angles.iter().enumerate() {
            let (s, c) = (t as f64 * theta).sin_cos();
            let (x0, x1) = (v[2 * j], v[2 * j + 1]);
            v[2 * j] = c * x0 - s * x1;
            v[2 * j + 1] = s * x0 + c * x1;
        }
    }
}

/// Applies `RoPE_t` to every row of `m`.
pub fn apply_rope_rows(table: &RopeTable, t: i64, m: &Matrix) -> Result<Matrix> {
    if m.cols() != table.dim() {
        return Err(TpaError::shape("apply_rope_rows", table.dim(), m.cols()));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        table.rotate_row(t, out.row_mut(i));
    }
    Ok(out)
}

/// Key factors whose feature rows were rotated for a specific position.
///
/// Only [`pre_rotate_key`] produces these, so a cache can check that every
/// entry was rotated at the position it is stored under.
#[derive(Debug, Clone, PartialEq)]
pub struct PreRotatedKey {
    block: FactorBlock,
    position: usize,
}

impl PreRotatedKey {
    pub fn block(&self) -> &FactorBlock {
        &self.block
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn into_block(self) -> FactorBlock {
        self.block
    }
}

fn rotate_block(block: &FactorBlock, t: i64, table: &RopeTable) -> Result<FactorBlock> {
    Ok(FactorBlock {
        a: block.a.clone(),
        b: apply_rope_rows(table, t, &block.b)?,
        c: block.c.clone(),
    })
}

/// `B̃_K ← RoPE_t(B_K)`; `A` (and a third-order `c`) are untouched.
///
/// For third-order blocks `table` spans `d_b` and the rotation acts on `b`.
pub fn pre_rotate_key(
    block: &FactorBlock,
    position: usize,
    table: &RopeTable,
) -> Result<PreRotatedKey> {
    Ok(PreRotatedKey {
        block: rotate_block(block, position as i64, table)?,
        position,
    })
}

/// Rotates the query's feature factor (or the dense query rows) for position `t`.
pub fn rotate_query(q: &Query, t: usize, table: &RopeTable) -> Result<Query> {
    Ok(match q {
        Query::Factored(b) => Query::Factored(rotate_block(b, t as i64, table)?),
        Query::Dense(m) => Query::Dense(apply_rope_rows(table, t as i64, m)?),
    })
}

/// `T_t = I_{d_c} ⊗ R_tᵀ` acting on `vec(b ⊗ c)` rows by post-multiplication.
pub fn higher_order_transform(table: &RopeTable, t: i64, d_c: usize) -> Result<Matrix> {
    if d_c == 0 {
        return Err(TpaError::Config("d_c must be at least 1".into()));
    }
    let db = table.dim();
    let rt = table.rotation_matrix(t).transpose();
    let mut out = Matrix::zeros(db * d_c, db * d_c);
    for blk in 0..d_c {
        for i in 0..db {
            for j in 0..db {
                out[(blk * db + i, blk * db + j)] = rt[(i, j)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use crate::sample::random_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn angle_schedule() {
        let t = RopeTable::new(8, DEFAULT_BASE).unwrap();
        assert_eq!(t.angles()[0], 1.0);
        assert!(t.angles().windows(2).all(|w| w[1] < w[0]));
        assert!((t.angles()[1] - 10_000f64.powf(-0.25)).abs() < 1e-15);
        assert!(RopeTable::new(7, DEFAULT_BASE).is_err());
        assert!(RopeTable::new(8, 1.0).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let t = RopeTable::new(6, DEFAULT_BASE).unwrap();
        assert_eq!(t.rotation_matrix(0), Matrix::identity(6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(3, 6, &mut rng);
        assert_eq!(apply_rope_rows(&t, 0, &m).unwrap(), m);
    }

    #[test]
    fn quarter_turn() {
        let t = RopeTable::with_angles(vec![FRAC_PI_2]).unwrap();
        let r = t.rotation_matrix(1);
        let expected = Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]]).unwrap();
        assert!(r.max_abs_diff(&expected) < 1e-15);

        // e1 as a row goes to e1·R_1ᵀ = (R_1 e1)ᵀ = e2.
        let e1 = Matrix::row_vector(&[1.0, 0.0]);
        let rotated = apply_rope_rows(&t, 1, &e1).unwrap();
        let via_matrix = matmul(&e1, &r.transpose()).unwrap();
        assert!(rotated.max_abs_diff(&via_matrix) < 1e-15);
        assert!((rotated[(0, 1)] - 1.0).abs() < 1e-15);
        assert!(rotated[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn orthogonal_and_relative() {
        let table = RopeTable::new(8, DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t: i64 = rng.random_range(0..1024);
            let s: i64 = rng.random_range(0..1024);
            let rt = table.rotation_matrix(t);
            let rtr = matmul(&rt.transpose(), &rt).unwrap();
            assert!(rtr.max_abs_diff(&Matrix::identity(8)) < 1e-12);
            let rel = matmul(&rt, &table.rotation_matrix(s).transpose()).unwrap();
            assert!(rel.max_abs_diff(&table.rotation_matrix(t - s)) < 1e-12);
        }
    }

    #[test]
    fn rows_keep_norm_and_invert() {
        let table = RopeTable::new(8, 500.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(4, 8, &mut rng);
        let r = apply_rope_rows(&table, 37, &m).unwrap();
        for i in 0..4 {
            let n0: f64 = m.row(i).iter().map(|x| x * x).sum();
            let n1: f64 = r.row(i).iter().map(|x| x * x).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-12);
        }
        let back = apply_rope_rows(&table, -37, &r).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-12);
        assert!(apply_rope_rows(&table, 1, &random_matrix(2, 6, &mut rng)).is_err());
    }

    #[test]
    fn higher_order_transform_shape_cases() {
        let table = RopeTable::new(4, DEFAULT_BASE).unwrap();
        let t1 = higher_order_transform(&table, 5, 1).unwrap();
        assert!(t1.max_abs_diff(&table.rotation_matrix(5).transpose()) < 1e-15);
        assert_eq!(
            higher_order_transform(&table, 0, 3).unwrap(),
            Matrix::identity(12)
        );
        let t = higher_order_transform(&table, 9, 2).unwrap();
        let ortho = matmul(&t, &t.transpose()).unwrap();
        assert!(ortho.max_abs_diff(&Matrix::identity(8)) < 1e-12);
    }

    #[test]
    fn pre_rotation_leaves_a_alone() {
        let table = RopeTable::new(4, DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = crate::sample::random_block(2, 3, 4, &mut rng);
        let k = pre_rotate_key(&block, 0, &table).unwrap();
        assert_eq!(k.block(), &block);
        let k = pre_rotate_key(&block, 12, &table).unwrap();
        assert_eq!(k.block().a, block.a);
        assert_eq!(k.position(), 12);
        assert_ne!(k.block().b, block.b);
    }
}
