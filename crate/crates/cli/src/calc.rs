//! Cost-model tables: a JSON list of mechanism specs in, one CSV row per spec out.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use tpa_core::{attention_params, decode_flops, kv_numbers_per_token, MechanismSpec};

use crate::error::{CliError, Result};

pub const COLUMNS: [&str; 5] = [
    "kind",
    "params",
    "kv_numbers_per_token",
    "projection_flops",
    "attention_coeff",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CalcRow {
    pub kind: String,
    pub params: u64,
    pub kv_numbers_per_token: u64,
    pub projection_flops: u64,
    pub attention_coeff: u64,
}

pub fn row(spec: &MechanismSpec) -> Result<CalcRow> {
    let flops = decode_flops(spec)?;
    Ok(CalcRow {
        kind: spec.label(),
        params: attention_params(spec)?,
        kv_numbers_per_token: kv_numbers_per_token(spec)?,
        projection_flops: flops.projection,
        attention_coeff: flops.attention_coeff,
    })
}

/// Parses a JSON array of specs; `origin` names the source in error messages.
pub fn parse_specs(text: &str, origin: &Path) -> Result<Vec<MechanismSpec>> {
    serde_json::from_str(text).map_err(|e| CliError::parse(origin, &e))
}

pub fn write_csv<W: Write>(out: W, rows: &[CalcRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    // Written explicitly so an empty table still has its header.
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.kind.clone(),
            r.params.to_string(),
            r.kv_numbers_per_token.to_string(),
            r.projection_flops.to_string(),
            r.attention_coeff.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    Ok(())
}

/// Reads `specs` and writes the table to `out`.
pub fn run<W: Write>(specs: &Path, out: W) -> Result<Vec<CalcRow>> {
    let text = std::fs::read_to_string(specs).map_err(|e| CliError::io(specs, e))?;
    let rows = parse_specs(&text, specs)?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            row(s).map_err(|e| {
                CliError::Usage(format!(
                    "{}: spec {i} ({}): {e}",
                    specs.display(),
                    s.label()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(out, &rows)?;
    Ok(rows)
}
