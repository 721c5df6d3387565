//! `.grlg` Gram dumps: `"GRLG"`, version `u32`, `H` as `u32`, sample count
//! as `u64`, then `H·H` little-endian `f64` values, row-major.

use super::GramStats;
use crate::error::{FormatError, Result};
use crate::model::format::FORMAT_VERSION;
use crate::tensor::Tensor;
use std::path::Path;

pub const GRAM_MAGIC: &[u8; 4] = b"GRLG";
const HEADER: usize = 4 + 4 + 4 + 8;

pub fn encode_gram(stats: &GramStats) -> Vec<u8> {
    let h = stats.width();
    let mut out = Vec::with_capacity(HEADER + 8 * h * h);
    out.extend_from_slice(GRAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&stats.n_samples().to_le_bytes());
    for &v in stats.g().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn truncated(what: &str, needed: usize, available: usize) -> FormatError {
    FormatError::Truncated {
        what: what.into(),
        needed,
        available,
    }
}

/// Decoded statistics carry no tap; the file does not record one.
pub fn decode_gram(bytes: &[u8]) -> Result<GramStats> {
    if bytes.len() < 4 {
        return Err(truncated("gram header", HEADER, bytes.len()).into());
    }
    if &bytes[..4] != GRAM_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "GRLG".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    if bytes.len() < HEADER {
        return Err(truncated("gram header", HEADER, bytes.len()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            kind: "gram",
            expected: FORMAT_VERSION,
            found: version,
        }
        .into());
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if h == 0 {
        return Err(FormatError::ManifestMismatch("gram width is zero".into()).into());
    }
    let payload = &bytes[HEADER..];
    let need = 8 * h * h;
    if payload.len() < need {
        return Err(truncated("gram payload", need, payload.len()).into());
    }
    if payload.len() > need {
        return Err(FormatError::ManifestMismatch(format!(
            "{} trailing bytes after gram payload",
            payload.len() - need
        ))
        .into());
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GramStats::from_parts(Tensor::new(vec![h, h], data)?, n, None)
}

pub fn save_gram(stats: &GramStats, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_gram(stats))?;
    Ok(())
}

pub fn load_gram(path: impl AsRef<Path>) -> Result<GramStats> {
    decode_gram(&std::fs::read(path)?)
}
