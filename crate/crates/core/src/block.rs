//! Forward pass of a pre-norm transformer block with a TPA attention sublayer
//! and a SwiGLU feed-forward network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::causal_mask;
use crate::error::{Result, TpaError};
use crate::factor::{xavier_init_with, FactorWeights, TpaConfig};
use crate::flash::{prepare_sequence, specialized_full_attention, DEFAULT_BLOCK};
use crate::linalg::{matmul, vecmat, Matrix};
use crate::rope::RopeTable;

pub const RMS_EPS: f64 = 1e-6;

/// SwiGLU hidden size for `d_model`: `8/3·d_model` rounded up to a multiple of 8.
pub fn default_d_ff(d_model: usize) -> usize {
    (8 * d_model).div_ceil(3).div_ceil(8) * 8
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub tpa: FactorWeights,
    pub rms_gain_attn: Vec<f64>,
    pub rms_gain_ffn: Vec<f64>,
    /// `d_model×d_ff`.
    pub w1: Matrix,
    /// `d_model×d_ff`.
    pub w2: Matrix,
    /// `d_ff×d_model`.
    pub w3: Matrix,
}

impl BlockWeights {
    /// Xavier-initialized block with unit RMSNorm gains.
    pub fn init(cfg: &TpaConfig, d_ff: usize, seed: u64) -> Result<Self> {
        let tpa = FactorWeights::init(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4947_4c55);
        let d = cfg.d_model;
        // xavier_init_with returns n_out×n_in and the bound is symmetric, so
        // asking for (d_ff, d) gives the d×d_ff layout row vectors multiply.
        let w1 = xavier_init_with(d_ff, d, &mut rng);
        let w2 = xavier_init_with(d_ff, d, &mut rng);
        let w3 = xavier_init_with(d, d_ff, &mut rng);
        let w = Self {
            tpa,
            rms_gain_attn: vec![1.0; d],
            rms_gain_ffn: vec![1.0; d],
            w1,
            w2,
            w3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.tpa.validate()?;
        let d = self.tpa.cfg.d_model;
        let f = self.d_ff();
        if f == 0 {
            return Err(TpaError::Config("d_ff must be at least 1".into()));
        }
        for (what, got, want) in [
            ("rms_gain_attn", (1, self.rms_gain_attn.len()), (1, d)),
            ("rms_gain_ffn", (1, self.rms_gain_ffn.len()), (1, d)),
            ("w1", self.w1.shape(), (d, f)),
            ("w2", self.w2.shape(), (d, f)),
            ("w3", self.w3.shape(), (f, d)),
        ] {
            if got != want {
                return Err(TpaError::shape(
                    what,
                    format!("{want:?}"),
                    format!("{got:?}"),
                ));
            }
        }
        Ok(())
    }
}

/// `x / sqrt(mean(x²) + ε) ⊙ gain`.
pub fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), gain.len());
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// `[SiLU(x·W1) ⊙ (x·W2)]·W3`.
pub fn swiglu_ffn(x: &[f64], w1: &Matrix, w2: &Matrix, w3: &Matrix) -> Result<Vec<f64>> {
    let gate = vecmat(x, w1)?;
    let up = vecmat(x, w2)?;
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    vecmat(&hidden, w3)
}

/// Causal TPA sublayer on normalized inputs: factorize, rotate, attend in
/// factor space, concatenate heads and project with `W_O`. Row `t` of `xs`
/// is rotated for position `start + t`.
pub fn tpa_sublayer(
    xs: &Matrix,
    w: &FactorWeights,
    rope: &RopeTable,
    start: usize,
) -> Result<Matrix> {
    let (q, k, v) = prepare_sequence(w, xs, rope, start)?;
    let t = xs.rows();
    let heads = specialized_full_attention(&q, &k, &v, &causal_mask(t, t), DEFAULT_BLOCK)?;
    matmul(&heads.concat_heads(), &w.w_o)
}

/// Block frame with a caller-supplied attention sublayer mapping the
/// normalized `T×d_model` input to `T×d_model`.
pub fn block_forward_with<F>(xs: &Matrix, w: &BlockWeights, attn: F) -> Result<Matrix>
where
    F: FnOnce(&Matrix) -> Result<Matrix>,
{
    w.validate()?;
    let d = w.tpa.cfg.d_model;
    if xs.rows() == 0 {
        return Err(TpaError::Empty("block_forward needs at least one token"));
    }
    if xs.cols() != d {
        return Err(TpaError::shape("block_forward input", d, xs.cols()));
    }
    let mut normed = Matrix::zeros(xs.rows(), d);
    for t in 0..xs.rows() {
        normed
            .row_mut(t)
            .copy_from_slice(&rms_norm(xs.row(t), &w.rms_gain_attn));
    }
    let attn_out = attn(&normed)?;
    if attn_out.shape() != xs.shape() {
        return Err(TpaError::shape(
            "attention sublayer output",
            format!("{:?}", xs.shape()),
            format!("{:?}", attn_out.shape()),
        ));
    }
    let mut h = xs.add(&attn_out)?;
    for t in 0..h.rows() {
        let ffn = swiglu_ffn(&rms_norm(h.row(t), &w.rms_gain_ffn), &w.w1, &w.w2, &w.w3)?;
        for (x, f) in h.row_mut(t).iter_mut().zip(ffn) {
            *x += f;
        }
    }
    Ok(h)
}

/// `x ← x + TPA(RMSNorm(x)); x ← x + FFN(RMSNorm(x))`, causal.
pub fn block_forward(xs: &Matrix, w: &BlockWeights, rope: &RopeTable) -> Result<Matrix> {
    block_forward_at(xs, w, rope, 0)
}

/// [`block_forward`] for a sequence starting at position `start`.
pub fn block_forward_at(
    xs: &Matrix,
    w: &BlockWeights,
    rope: &RopeTable,
    start: usize,
) -> Result<Matrix> {
    block_forward_with(xs, w, |normed| tpa_sublayer(normed, &w.tpa, rope, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{random_matrix, random_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn d_ff_default() {
        assert_eq!(default_d_ff(16), 48);
        assert_eq!(default_d_ff(768), 2048);
        assert_eq!(default_d_ff(10), 32);
    }

    #[test]
    fn rms_norm_cases() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = rms_norm(&x, &[1.0; 4]);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(rms_norm(&[0.0; 3], &[2.0; 3]), vec![0.0; 3]);
        let g = [0.5, 2.0, 1.0, 3.0];
        let y = rms_norm(&x, &g);
        assert!((y[3] + 6.0 * y[0]).abs() < 1e-12);
    }

    #[test]
    fn swiglu_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w1, w2, w3) = (
            random_matrix(4, 6, &mut rng),
            random_matrix(4, 6, &mut rng),
            random_matrix(6, 4, &mut rng),
        );
        assert_eq!(swiglu_ffn(&[0.0; 4], &w1, &w2, &w3).unwrap(), vec![0.0; 4]);
        let x = random_vector(4, &mut rng);
        let zero = Matrix::zeros(4, 6);
        assert_eq!(swiglu_ffn(&x, &w1, &zero, &w3).unwrap(), vec![0.0; 4]);
        assert_eq!(silu(0.0), 0.0);
        assert!(swiglu_ffn(&x[..3], &w1, &w2, &w3).is_err());
    }

    #[test]
    fn toy_block_is_finite_and_deterministic() {
        let cfg = TpaConfig::new(16, 2, 8, 1, 1, 1);
        let w = BlockWeights::init(&cfg, default_d_ff(16), 3).unwrap();
        let rope = RopeTable::new(8, crate::rope::DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = random_matrix(4, 16, &mut rng);
        let a = block_forward(&xs, &w, &rope).unwrap();
        let b = block_forward(&xs, &w, &rope).unwrap();
        assert_eq!(a.shape(), (4, 16));
        assert!(a.is_finite());
        assert_eq!(a, b);
    }
}
