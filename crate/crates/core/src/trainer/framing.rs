//! Shared binary framing: magic, version, JSON header, raw payload.
//!
//! ```text
//! b"MODP" | u32 LE version | u32 LE header length | header JSON | payload
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MODP";
pub const VERSION: u32 = 1;
const PREFIX: usize = 12;

pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a framed file into its parsed header and payload bytes.
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    if bytes.len() < PREFIX {
        return Err(FormatError::Truncated {
            needed: PREFIX,
            available: bytes.len(),
        }
        .into());
    }
    if bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: bytes[..4].to_vec(),
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION.to_string(),
            found: version.to_string(),
        }
        .into());
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREFIX + len;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            needed: end,
            available: bytes.len(),
        }
        .into());
    }
    let header = serde_json::from_slice(&bytes[PREFIX..end])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

/// Frames `header` and `payload` after storing, in the field `crc` points
/// at, the CRC-32 of the header JSON (with that field zeroed) followed by
/// the payload.
pub fn seal<H: Serialize>(
    mut header: H,
    crc: fn(&mut H) -> &mut u32,
    payload: &[u8],
) -> Result<Vec<u8>> {
    *crc(&mut header) = 0;
    *crc(&mut header) = checksum(&header, payload)?;
    encode(&header, payload)
}

/// Recomputes the checksum written by [`seal`].
pub fn verify_seal<H: Serialize + Clone>(
    header: &H,
    crc: fn(&mut H) -> &mut u32,
    payload: &[u8],
) -> Result<()> {
    let mut zeroed = header.clone();
    let expected = std::mem::take(crc(&mut zeroed));
    let found = checksum(&zeroed, payload)?;
    if found != expected {
        return Err(FormatError::Checksum { expected, found }.into());
    }
    Ok(())
}

fn checksum<H: Serialize>(header: &H, payload: &[u8]) -> Result<u32> {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&serde_json::to_vec(header)?);
    hasher.update(payload);
    Ok(hasher.finalize())
}

/// Checks a header's format tag.
pub fn expect_format(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(FormatError::VersionMismatch {
            expected: expected.into(),
            found: found.into(),
        }
        .into());
    }
    Ok(())
}

pub fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Reads `count` little-endian f32 values starting at byte `offset`.
pub fn read_f32(payload: &[u8], offset: usize, count: usize, name: &str) -> Result<Vec<f64>> {
    let end = offset
        .checked_add(count * 4)
        .ok_or_else(|| index_error(name, "offset overflow"))?;
    if end > payload.len() {
        return Err(FormatError::Truncated {
            needed: end,
            available: payload.len(),
        }
        .into());
    }
    Ok(payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

pub fn index_error(name: &str, detail: impl Into<String>) -> Error {
    FormatError::Index {
        name: name.into(),
        detail: detail.into(),
    }
    .into()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rounds to the nearest f32, the precision every file stores.
pub fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}
