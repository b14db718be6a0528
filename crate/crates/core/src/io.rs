//! Binary tensor files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header describing each tensor, then raw little-endian `f64` data.
//!
//! Used for factor weights and KV-cache snapshots. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpaError};
use crate::factor::{FactorMap, FactorMaps, FactorWeights, QueryMap, TpaConfig, Variant};
use crate::kv_cache::FactorizedKvCache;
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"TPATENS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    FactorWeights,
    KvCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed: bool,
    /// Tensor stored once under another name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: FileKind,
    pub config: TpaConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Default)]
struct Builder {
    tensors: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Builder {
    fn push(&mut self, name: &str, shape: Vec<usize>, values: &[f64], fixed: bool) {
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.data.len(),
            len: values.len(),
            fixed,
            alias_of: None,
        });
        self.data.extend_from_slice(values);
    }

    fn matrix(&mut self, name: &str, m: &Matrix, fixed: bool) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice(), fixed);
    }

    fn alias(&mut self, name: &str, target: &str) {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == target)
            .expect("alias target written")
            .clone();
        self.tensors.push(TensorEntry {
            name: name.into(),
            alias_of: Some(target.into()),
            ..t
        });
    }

    fn maps(&mut self, prefix: &str, maps: &FactorMaps) {
        self.matrix(&format!("{prefix}.a"), maps.a.matrix(), maps.a.is_fixed());
        self.matrix(&format!("{prefix}.b"), maps.b.matrix(), maps.b.is_fixed());
        if let Some(c) = &maps.c {
            self.matrix(&format!("{prefix}.c"), c, false);
        }
    }
}

fn write_file<W: Write>(mut out: W, header: &Header, data: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn read_file<R: Read>(mut input: R) -> Result<(Header, Vec<f64>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TpaError::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(TpaError::Format(format!(
            "data section of {} bytes is not f64-aligned",
            raw.len()
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    for t in &header.tensors {
        if t.shape.iter().product::<usize>() != t.len || t.offset + t.len > data.len() {
            return Err(TpaError::Format(format!(
                "tensor {} out of bounds or misshapen",
                t.name
            )));
        }
    }
    Ok((header, data))
}

struct Tensors<'a> {
    header: &'a Header,
    data: &'a [f64],
}

impl Tensors<'_> {
    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TpaError::Format(format!("missing tensor {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.header.tensors.iter().any(|t| t.name == name)
    }

    fn vec(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.entry(name)?;
        Ok(self.data[t.offset..t.offset + t.len].to_vec())
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.entry(name)?;
        match t.shape[..] {
            [r, c] => Matrix::new(r, c, self.vec(name)?),
            _ => Err(TpaError::Format(format!("tensor {name} is not 2-d"))),
        }
    }

    fn map(&self, name: &str) -> Result<FactorMap> {
        let m = Arc::new(self.matrix(name)?);
        Ok(if self.entry(name)?.fixed {
            FactorMap::Fixed(m)
        } else {
            FactorMap::Contextual(m)
        })
    }

    fn maps(&self, prefix: &str) -> Result<FactorMaps> {
        let c = format!("{prefix}.c");
        Ok(FactorMaps {
            a: self.map(&format!("{prefix}.a"))?,
            b: self.map(&format!("{prefix}.b"))?,
            c: if self.has(&c) {
                Some(Arc::new(self.matrix(&c)?))
            } else {
                None
            },
        })
    }
}

pub fn write_weights<W: Write>(out: W, w: &FactorWeights) -> Result<()> {
    w.validate()?;
    let mut b = Builder::default();
    match &w.query {
        QueryMap::Factored(maps) => b.maps("q", maps),
        QueryMap::Dense(m) => b.matrix("q.dense", m, false),
    }
    b.maps("k", &w.key);
    if w.cfg.variant == Variant::SharedB {
        b.matrix("v.a", w.value.a.matrix(), w.value.a.is_fixed());
        b.alias("v.b", "k.b");
    } else {
        b.maps("v", &w.value);
    }
    b.matrix("w_o", &w.w_o, false);
    let header = Header {
        kind: FileKind::FactorWeights,
        config: w.cfg.clone(),
        tensors: b.tensors,
        meta: BTreeMap::new(),
    };
    write_file(out, &header, &b.data)
}

pub fn read_weights<R: Read>(input: R) -> Result<FactorWeights> {
    let (header, data) = read_file(input)?;
    if header.kind != FileKind::FactorWeights {
        return Err(TpaError::Format("file does not hold factor weights".into()));
    }
    let t = Tensors {
        header: &header,
        data: &data,
    };
    let query = if t.has("q.dense") {
        QueryMap::Dense(Arc::new(t.matrix("q.dense")?))
    } else {
        QueryMap::Factored(t.maps("q")?)
    };
    let key = t.maps("k")?;
    let value = if t.entry("v.b")?.alias_of.as_deref() == Some("k.b") {
        FactorMaps {
            a: t.map("v.a")?,
            b: key.b.clone(),
            c: None,
        }
    } else {
        t.maps("v")?
    };
    let w = FactorWeights {
        cfg: header.config.clone(),
        query,
        key,
        value,
        w_o: Arc::new(t.matrix("w_o")?),
    };
    w.validate()?;
    Ok(w)
}

pub fn write_cache<W: Write>(out: W, cache: &FactorizedKvCache) -> Result<()> {
    let mut b = Builder::default();
    let cfg = cache.config();
    let m = cache.len();
    let (rk, rv, h) = (cache.rank_k(), cache.rank_v(), cache.heads());
    b.push("a_k", vec![m, rk, h], cache.a_k(), false);
    b.push("b_k", vec![m, rk, cache.key_dim()], cache.b_k(), false);
    b.push("a_v", vec![m, rv, h], cache.a_v(), false);
    b.push("b_v", vec![m, rv, cache.value_dim()], cache.b_v(), false);
    let mut meta = BTreeMap::new();
    meta.insert("len".to_string(), serde_json::Value::from(m));
    let header = Header {
        kind: FileKind::KvCache,
        config: cfg.clone(),
        tensors: b.tensors,
        meta,
    };
    write_file(out, &header, &b.data)
}

pub fn read_cache<R: Read>(input: R) -> Result<FactorizedKvCache> {
    let (header, data) = read_file(input)?;
    if header.kind != FileKind::KvCache {
        return Err(TpaError::Format("file does not hold a KV cache".into()));
    }
    let len = header
        .meta
        .get("len")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| TpaError::Format("missing cache length".into()))? as usize;
    let t = Tensors {
        header: &header,
        data: &data,
    };
    FactorizedKvCache::from_parts(
        &header.config,
        len,
        t.vec("a_k")?,
        t.vec("b_k")?,
        t.vec("a_v")?,
        t.vec("b_v")?,
    )
}

/// Reads the header only.
pub fn read_header<R: Read>(input: R) -> Result<Header> {
    read_file(input).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let err = read_weights(&b"NOTATENS\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TpaError::Format(_)));
        let w = FactorWeights::init(&TpaConfig::new(4, 2, 2, 1, 1, 1), 1).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_weights(&buf[..]).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let cfg = TpaConfig::new(4, 2, 2, 1, 1, 1);
        let mut buf = Vec::new();
        write_cache(&mut buf, &FactorizedKvCache::new(&cfg).unwrap()).unwrap();
        assert!(read_weights(&buf[..]).is_err());
        assert_eq!(read_cache(&buf[..]).unwrap().len(), 0);
    }
}
