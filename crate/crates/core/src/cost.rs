//! Closed-form parameter, KV-cache and decode cost counts for attention
//! mechanisms. FLOPs are multiply-accumulates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "MQA")]
    Mqa,
    #[serde(rename = "GQA")]
    Gqa,
    #[serde(rename = "MLA")]
    Mla,
    #[serde(rename = "TPA")]
    Tpa,
    #[serde(rename = "TPA_KVonly")]
    TpaKvOnly,
    #[serde(rename = "TPA_NonCtxA")]
    TpaNonCtxA,
    #[serde(rename = "TPA_NonCtxB")]
    TpaNonCtxB,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Mha => "MHA",
            Mechanism::Mqa => "MQA",
            Mechanism::Gqa => "GQA",
            Mechanism::Mla => "MLA",
            Mechanism::Tpa => "TPA",
            Mechanism::TpaKvOnly => "TPA_KVonly",
            Mechanism::TpaNonCtxA => "TPA_NonCtxA",
            Mechanism::TpaNonCtxB => "TPA_NonCtxB",
        }
    }

    fn is_tpa(self) -> bool {
        matches!(
            self,
            Mechanism::Tpa | Mechanism::TpaKvOnly | Mechanism::TpaNonCtxA | Mechanism::TpaNonCtxB
        )
    }
}

/// Dimensions of one attention layer. Fields not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSpec {
    pub kind: Mechanism,
    pub d_model: u64,
    pub h: u64,
    pub d_h: u64,
    /// GQA groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_q: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_v: Option<u64>,
    /// MLA KV compression dim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_c: Option<u64>,
    /// MLA query compression dim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_c_prime: Option<u64>,
    /// MLA decoupled RoPE dim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_h_rope: Option<u64>,
}

impl MechanismSpec {
    fn base(kind: Mechanism, d_model: u64, h: u64, d_h: u64) -> Self {
        Self {
            kind,
            d_model,
            h,
            d_h,
            g: None,
            r_q: None,
            r_k: None,
            r_v: None,
            d_c: None,
            d_c_prime: None,
            d_h_rope: None,
        }
    }

    pub fn mha(d_model: u64, h: u64, d_h: u64) -> Self {
        Self::base(Mechanism::Mha, d_model, h, d_h)
    }

    pub fn mqa(d_model: u64, h: u64, d_h: u64) -> Self {
        Self::base(Mechanism::Mqa, d_model, h, d_h)
    }

    pub fn gqa(d_model: u64, h: u64, d_h: u64, g: u64) -> Self {
        Self {
            g: Some(g),
            ..Self::base(Mechanism::Gqa, d_model, h, d_h)
        }
    }

    pub fn mla(d_model: u64, h: u64, d_h: u64, d_c: u64, d_c_prime: u64, d_h_rope: u64) -> Self {
        Self {
            d_c: Some(d_c),
            d_c_prime: Some(d_c_prime),
            d_h_rope: Some(d_h_rope),
            ..Self::base(Mechanism::Mla, d_model, h, d_h)
        }
    }

    /// A TPA-family spec; `kind` must be one of the TPA variants.
    pub fn tpa(kind: Mechanism, d_model: u64, h: u64, d_h: u64, ranks: (u64, u64, u64)) -> Self {
        Self {
            r_q: Some(ranks.0),
            r_k: Some(ranks.1),
            r_v: Some(ranks.2),
            ..Self::base(kind, d_model, h, d_h)
        }
    }

    fn need(&self, v: Option<u64>, name: &str) -> Result<u64> {
        match v {
            Some(x) if x > 0 => Ok(x),
            Some(_) => Err(TpaError::Config(format!(
                "{}: {name} must be positive",
                self.kind.name()
            ))),
            None => Err(TpaError::Config(format!(
                "{} requires {name}",
                self.kind.name()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d_model", self.d_model), ("h", self.h), ("d_h", self.d_h)] {
            if v == 0 {
                return Err(TpaError::Config(format!("{name} must be positive")));
            }
        }
        match self.kind {
            Mechanism::Gqa => {
                let g = self.need(self.g, "g")?;
                if !self.h.is_multiple_of(g) {
                    return Err(TpaError::Config(format!(
                        "GQA: h={} not divisible by g={g}",
                        self.h
                    )));
                }
            }
            Mechanism::Mla => {
                self.need(self.d_c, "d_c")?;
                self.need(self.d_c_prime, "d_c_prime")?;
                self.need(self.d_h_rope, "d_h_rope")?;
            }
            k if k.is_tpa() => {
                self.ranks()?;
            }
            _ => {}
        }
        Ok(())
    }

    fn ranks(&self) -> Result<(u64, u64, u64)> {
        let r_q = if self.kind == Mechanism::TpaKvOnly {
            self.r_q.unwrap_or(0)
        } else {
            self.need(self.r_q, "r_q")?
        };
        Ok((
            r_q,
            self.need(self.r_k, "r_k")?,
            self.need(self.r_v, "r_v")?,
        ))
    }

    fn mla_dims(&self) -> Result<(u64, u64, u64)> {
        Ok((
            self.need(self.d_c, "d_c")?,
            self.need(self.d_c_prime, "d_c_prime")?,
            self.need(self.d_h_rope, "d_h_rope")?,
        ))
    }

    /// Short label such as `MHA`, `GQA(g=4)` or `TPA(16,1,1)`.
    pub fn label(&self) -> String {
        match self.kind {
            Mechanism::Gqa => format!("GQA(g={})", self.g.unwrap_or(0)),
            Mechanism::TpaKvOnly => format!(
                "TPA_KVonly({},{})",
                self.r_k.unwrap_or(0),
                self.r_v.unwrap_or(0)
            ),
            k if k.is_tpa() => format!(
                "{}({},{},{})",
                k.name(),
                self.r_q.unwrap_or(0),
                self.r_k.unwrap_or(0),
                self.r_v.unwrap_or(0)
            ),
            k => k.name().to_string(),
        }
    }
}

impl fmt::Display for MechanismSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Numbers cached per token.
pub fn kv_numbers_per_token(spec: &MechanismSpec) -> Result<u64> {
    spec.validate()?;
    let (h, dh) = (spec.h, spec.d_h);
    Ok(match spec.kind {
        Mechanism::Mha => 2 * h * dh,
        Mechanism::Mqa => 2 * dh,
        Mechanism::Gqa => 2 * spec.need(spec.g, "g")? * dh,
        Mechanism::Mla => {
            let (d_c, _, d_hr) = spec.mla_dims()?;
            d_c + d_hr
        }
        Mechanism::Tpa | Mechanism::TpaKvOnly => {
            let (_, rk, rv) = spec.ranks()?;
            (rk + rv) * (h + dh)
        }
        Mechanism::TpaNonCtxA => {
            let (_, rk, rv) = spec.ranks()?;
            (rk + rv) * dh
        }
        Mechanism::TpaNonCtxB => {
            let (_, rk, rv) = spec.ranks()?;
            (rk + rv) * h
        }
    })
}

/// Attention-layer parameters including the output projection.
pub fn attention_params(spec: &MechanismSpec) -> Result<u64> {
    spec.validate()?;
    let (d, h, dh) = (spec.d_model, spec.h, spec.d_h);
    let w_o = d * h * dh;
    Ok(match spec.kind {
        Mechanism::Mha => 4 * d * h * dh,
        Mechanism::Mqa => d * dh * (2 * h + 2),
        Mechanism::Gqa => d * dh * (2 * h + 2 * spec.need(spec.g, "g")?),
        Mechanism::Mla => {
            let (d_c, d_cp, d_hr) = spec.mla_dims()?;
            d_cp * (d + h * dh + h * d_hr) + d * (d_hr + h * dh) + d_c * (d + 2 * h * dh)
        }
        Mechanism::Tpa => {
            let (rq, rk, rv) = spec.ranks()?;
            d * (rq + rk + rv) * (h + dh) + w_o
        }
        Mechanism::TpaKvOnly => {
            let (_, rk, rv) = spec.ranks()?;
            d * (rk + rv) * (h + dh) + 2 * w_o
        }
        Mechanism::TpaNonCtxA => {
            let (rq, rk, rv) = spec.ranks()?;
            (rq + rk + rv) * (d * dh + h) + w_o
        }
        Mechanism::TpaNonCtxB => {
            let (rq, rk, rv) = spec.ranks()?;
            (rq + rk + rv) * (d * h + dh) + w_o
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeFlops {
    /// Per-token Q/K/V projection.
    pub projection: u64,
    /// Attention cost per cached token; total attention is `coeff · M`.
    pub attention_coeff: u64,
}

impl DecodeFlops {
    pub fn total(&self, cache_len: u64) -> u64 {
        self.projection + self.attention_coeff * cache_len
    }
}

/// Decode cost of one new token. `D = E = d_h`.
pub fn decode_flops(spec: &MechanismSpec) -> Result<DecodeFlops> {
    spec.validate()?;
    let (d, h, dh) = (spec.d_model, spec.h, spec.d_h);
    let dense_attn = 2 * h * dh;
    let (projection, attention_coeff) = match spec.kind {
        Mechanism::Mha => (3 * d * h * dh, dense_attn),
        Mechanism::Mqa => (d * (h * dh + 2 * dh), dense_attn),
        Mechanism::Gqa => (d * (h + 2 * spec.need(spec.g, "g")?) * dh, dense_attn),
        Mechanism::Mla => {
            let (d_c, _, d_hr) = spec.mla_dims()?;
            (d * ((d_c + d_hr) * h + d_c + d_hr), h * (2 * d_c + d_hr))
        }
        Mechanism::Tpa => {
            let (rq, rk, rv) = spec.ranks()?;
            (
                d * (rq + rk + rv) * (h + dh),
                tpa_decode_coeff(rq, rk, rv, h, dh, dh),
            )
        }
        Mechanism::TpaKvOnly => {
            let (_, rk, rv) = spec.ranks()?;
            (
                d * (h * dh + (rk + rv) * (h + dh)),
                rk * h * (dh + 1) + rv * h * (1 + dh),
            )
        }
        Mechanism::TpaNonCtxA => {
            let (rq, rk, rv) = spec.ranks()?;
            (
                d * (rq + rk + rv) * dh,
                tpa_decode_coeff(rq, rk, rv, h, dh, dh),
            )
        }
        Mechanism::TpaNonCtxB => {
            let (rq, rk, rv) = spec.ranks()?;
            (
                d * (rq + rk + rv) * h,
                tpa_decode_coeff(rq, rk, rv, h, dh, dh),
            )
        }
    };
    Ok(DecodeFlops {
        projection,
        attention_coeff,
    })
}

/// `R_K(R_Q D + H R_Q + H) + R_V H (1 + E)`.
pub fn tpa_decode_coeff(r_q: u64, r_k: u64, r_v: u64, h: u64, d: u64, e: u64) -> u64 {
    r_k * (r_q * d + h * r_q + h) + r_v * h * (1 + e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeedCheck {
    /// `R_Q R_K D + H R_Q R_K + H R_V E`.
    pub lhs: u64,
    /// `2 H D`.
    pub rhs: u64,
    pub holds: bool,
}

/// Whether factor-space attention needs fewer FLOPs per query-key pair than
/// materialized attention (strict inequality).
pub fn speed_inequality(r_q: u64, r_k: u64, r_v: u64, h: u64, d: u64, e: u64) -> SpeedCheck {
    let lhs = r_q * r_k * d + h * r_q * r_k + h * r_v * e;
    let rhs = 2 * h * d;
    SpeedCheck {
        lhs,
        rhs,
        holds: lhs < rhs,
    }
}

/// [`speed_inequality`] for a TPA spec.
pub fn specialized_speedup_holds(spec: &MechanismSpec, d: u64, e: u64) -> Result<SpeedCheck> {
    if spec.kind != Mechanism::Tpa {
        return Err(TpaError::Config(format!(
            "speed inequality is defined for TPA, got {}",
            spec.kind.name()
        )));
    }
    spec.validate()?;
    let (rq, rk, rv) = spec.ranks()?;
    Ok(speed_inequality(rq, rk, rv, spec.h, d, e))
}
