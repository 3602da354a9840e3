//! Hybrid binary file helpers: magic, JSON header, raw payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Layout: 8-byte magic, u32 LE header length, JSON header, payload.
pub(crate) fn write_hybrid(
    path: &Path,
    magic: &[u8; 8],
    header: &[u8],
    payload: &[u8],
) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + header.len() + payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_hybrid(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "{} is not a {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Format(format!("{} is truncated", path.display())));
    }
    let header = bytes[12..12 + header_len].to_vec();
    let payload = bytes[12 + header_len..].to_vec();
    Ok((header, payload))
}

pub(crate) fn fill_from_iter(dst: &mut [f64], src: &mut impl Iterator<Item = f64>) {
    for v in dst {
        *v = src.next().expect("payload length checked by caller");
    }
}
