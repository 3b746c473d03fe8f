//! Binary emission and feature files, plus the shared JSON document writer.
//!
//! Emission file layout (little-endian):
//!
//! ```text
//! "CTCL" | version u16 = 1 | kind u8 | reserved u8 = 0 | T u32 | V u32 | T*V f32
//! ```
//!
//! Feature files use magic `CTCF` and carry `T u32 | m u32` right after the
//! version. Payloads are row-major. Values are computed in f64 and narrowed
//! to f32 on write.

use std::path::Path;

use ndarray::Array2;
use serde_json::Value;

use crate::error::{Error, Result};

pub const EMISSION_MAGIC: &[u8; 4] = b"CTCL";
pub const FEATURE_MAGIC: &[u8; 4] = b"CTCF";
pub const FORMAT_VERSION: u16 = 1;

const EMISSION_HEADER: usize = 16;
const FEATURE_HEADER: usize = 14;

/// Row-sum tolerance for stored probabilities.
pub const STORED_PROB_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    Probabilities = 0,
    Logits = 1,
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn json_document(value: &Value) -> String {
    // serde_json's default map is a BTreeMap, so keys come out sorted.
    let mut s = serde_json::to_string_pretty(value).expect("Value always serializes");
    s.push('\n');
    s
}

fn push_payload(out: &mut Vec<u8>, data: &Array2<f64>) {
    for &x in data.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn read_payload(bytes: &[u8], rows: usize, cols: usize) -> Result<Array2<f64>> {
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

fn check_header(bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < header_len {
        return Err(Error::TruncatedFile {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let version = u16_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    Ok(())
}

pub fn encode_emissions(kind: EmissionKind, data: &Array2<f64>) -> Vec<u8> {
    let (t, v) = data.dim();
    let mut out = Vec::with_capacity(EMISSION_HEADER + 4 * t * v);
    out.extend_from_slice(EMISSION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.push(0);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(v as u32).to_le_bytes());
    push_payload(&mut out, data);
    out
}

pub fn decode_emissions(bytes: &[u8]) -> Result<(EmissionKind, Array2<f64>)> {
    check_header(bytes, EMISSION_MAGIC, EMISSION_HEADER)?;
    let kind = match bytes[6] {
        0 => EmissionKind::Probabilities,
        1 => EmissionKind::Logits,
        k => return Err(Error::Format(format!("unknown emission kind {k}"))),
    };
    if bytes[7] != 0 {
        return Err(Error::Format("reserved byte must be zero".into()));
    }
    let (t, v) = (u32_at(bytes, 8), u32_at(bytes, 12));
    let data = read_payload(&bytes[EMISSION_HEADER..], t, v)?;
    if kind == EmissionKind::Probabilities {
        for (row_idx, row) in data.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > STORED_PROB_TOLERANCE || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Format(format!(
                    "row {row_idx} is not a probability distribution (sum {sum})"
                )));
            }
        }
    }
    Ok((kind, data))
}

pub fn encode_features(data: &Array2<f64>) -> Vec<u8> {
    let (t, m) = data.dim();
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * t * m);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    push_payload(&mut out, data);
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    check_header(bytes, FEATURE_MAGIC, FEATURE_HEADER)?;
    let (t, m) = (u32_at(bytes, 6), u32_at(bytes, 10));
    read_payload(&bytes[FEATURE_HEADER..], t, m)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_emission_file(path: &Path) -> Result<(EmissionKind, Array2<f64>)> {
    decode_emissions(&read_bytes(path)?)
}

pub fn write_emission_file(path: &Path, kind: EmissionKind, data: &Array2<f64>) -> Result<()> {
    write_bytes(path, &encode_emissions(kind, data))
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f64>> {
    decode_features(&read_bytes(path)?)
}

pub fn write_feature_file(path: &Path, data: &Array2<f64>) -> Result<()> {
    write_bytes(path, &encode_features(data))
}
