//! ATN1 attention files and mask selection exports (JSON / CSV).
//!
//! ATN1 layout, all little-endian:
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `"ATN1"`                 |
//! | 4      | 4         | `u32` patch count `k`          |
//! | 8      | 4         | `u32` iteration `t`            |
//! | 12     | `4*k*k`   | `f32` attention, row-major     |

use std::path::Path;

use serde::Serialize;

use crate::curriculum::{MaskSelection, Seeds};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::semantic_mask::AttentionMap;

pub const ATN_MAGIC: &[u8; 4] = b"ATN1";
pub const ATN_HEADER_LEN: usize = 12;

/// Rows further than this from 1 are rejected outright.
pub const ROW_SUM_REJECT: f64 = 1e-2;
/// Rows further than this from 1 are accepted but reported.
pub const ROW_SUM_WARN: f64 = 1e-4;
/// Entries below this are rejected; entries between it and 0 are clamped.
pub const NEGATIVE_REJECT: f64 = -1e-6;
/// Rows within this of 1 are kept bit-for-bit; f32 storage alone cannot push a
/// row past it.
pub const ROW_SUM_EXACT: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtnHeader {
    pub k: u32,
    pub iteration: u32,
}

fn read_header(bytes: &[u8]) -> Result<AtnHeader> {
    if bytes.len() < 4 || &bytes[..4] != ATN_MAGIC {
        return Err(Error::at_byte(0, "bad magic, expected \"ATN1\""));
    }
    if bytes.len() < 8 {
        return Err(Error::at_byte(4, "truncated header: missing patch count"));
    }
    if bytes.len() < ATN_HEADER_LEN {
        return Err(Error::at_byte(8, "truncated header: missing iteration"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let iteration = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if k == 0 {
        return Err(Error::validation("ATN1 patch count is 0"));
    }
    Ok(AtnHeader { k, iteration })
}

/// Parses and validates an ATN1 buffer; accepted rows are renormalized to sum to 1.
pub fn parse_attention(bytes: &[u8]) -> Result<AttentionMap> {
    let header = read_header(bytes)?;
    let k = header.k as usize;
    let expected = (k as u64) * (k as u64) * 4;
    let available = (bytes.len() - ATN_HEADER_LEN) as u64;
    if available < expected {
        let first_missing = ATN_HEADER_LEN as u64 + (available / 4) * 4;
        return Err(Error::at_byte(
            first_missing,
            format!("truncated payload: need {} floats, found {}", k * k, available / 4),
        ));
    }
    if available > expected {
        return Err(Error::at_byte(
            ATN_HEADER_LEN as u64 + expected,
            "trailing bytes after attention payload",
        ));
    }

    let mut data: Vec<f64> = bytes[ATN_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    for (i, row) in data.chunks_exact_mut(k).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(format!("row {i}, column {j} is not finite")));
            }
            if *v < NEGATIVE_REJECT {
                return Err(Error::validation(format!("row {i}, column {j} is negative ({v})")));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = row.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev > ROW_SUM_REJECT {
            return Err(Error::validation(format!("row {i} sums to {sum}, expected 1")));
        }
        if dev > ROW_SUM_WARN {
            log::warn!("attention row {i} sums to {sum}; renormalizing");
        }
        if dev > ROW_SUM_EXACT {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    AttentionMap::new(Matrix::from_vec(k, k, data), header.iteration as u64)
}

pub fn load_attention(path: impl AsRef<Path>) -> Result<AttentionMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_attention(&bytes)
}

/// Iterations beyond `u32::MAX` are saturated in the header.
pub fn encode_attention(attn: &AttentionMap) -> Vec<u8> {
    let k = attn.len();
    let mut out = Vec::with_capacity(ATN_HEADER_LEN + 4 * k * k);
    out.extend_from_slice(ATN_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    let iteration = u32::try_from(attn.iteration()).unwrap_or(u32::MAX);
    out.extend_from_slice(&iteration.to_le_bytes());
    for v in attn.matrix().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn save_attention(attn: &AttentionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_attention(attn)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionFormat {
    Json,
    Csv,
}

impl SelectionFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SelectionFormat::Csv,
            _ => SelectionFormat::Json,
        }
    }
}

impl std::str::FromStr for SelectionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(SelectionFormat::Json),
            "csv" => Ok(SelectionFormat::Csv),
            other => Err(Error::argument(format!("unknown selection format {other:?}"))),
        }
    }
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    num_patches: usize,
    ratio: f64,
    alpha: Option<f64>,
    t: Option<u64>,
    #[serde(rename = "T")]
    total_iters: Option<u64>,
    masked_indices: Vec<usize>,
    scores: &'a [f64],
    seeds: Option<Seeds>,
    config_hash: Option<&'a str>,
}

/// Pretty-printed JSON with a fixed key order and a trailing newline.
pub fn selection_to_json(sel: &MaskSelection) -> String {
    let prov = sel.provenance();
    let record = SelectionRecord {
        num_patches: sel.num_patches(),
        ratio: sel.ratio(),
        alpha: prov.map(|p| p.alpha),
        t: prov.map(|p| p.t),
        total_iters: prov.map(|p| p.total_iters),
        masked_indices: sel.masked_indices(),
        scores: sel.scores().values(),
        seeds: prov.map(|p| p.seeds),
        config_hash: prov.map(|p| p.config_hash.as_str()),
    };
    let mut out = serde_json::to_string_pretty(&record).expect("selection serializes");
    out.push('\n');
    out
}

/// Header `index,score,masked`, then one row per patch.
pub fn selection_to_csv(sel: &MaskSelection) -> String {
    let mut out = String::from("index,score,masked\n");
    for (i, (&score, &masked)) in sel.scores().values().iter().zip(sel.masked()).enumerate() {
        out.push_str(&format!("{i},{score},{}\n", masked as u8));
    }
    out
}

pub fn save_selection(sel: &MaskSelection, path: impl AsRef<Path>, format: SelectionFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        SelectionFormat::Json => selection_to_json(sel),
        SelectionFormat::Csv => selection_to_csv(sel),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
