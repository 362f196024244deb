//! `EMB1` binary embedding files.
//!
//! Layout (all little-endian): bytes 0..4 magic `EMB1`, 4..8 row count
//! (u32), 8..12 dimension (u32), 12..16 reserved zero, then `count * dim`
//! row-major f32 values.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Position, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

const CONTEXT: &str = "embedding file";

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::format(CONTEXT, Position::Byte(offset as u64), msg)
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses an in-memory embedding file.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt_err(0, format!("bad magic {:?}, expected \"EMB1\"", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let count = u32_at(bytes, 4) as usize;
    let dim = u32_at(bytes, 8) as usize;
    if dim == 0 {
        return Err(fmt_err(8, "dimension must be positive"));
    }
    if u32_at(bytes, 12) != 0 {
        return Err(fmt_err(12, "reserved header field is not zero"));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt_err(4, format!("header size {count}x{dim} overflows")))?;
    if bytes.len() < expected {
        let rows = (bytes.len() - HEADER_LEN) / (4 * dim);
        return Err(fmt_err(
            bytes.len(),
            format!("truncated body: header declares {count} rows of dim {dim} ({expected} bytes), file holds {} bytes ({rows} complete rows)", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fmt_err(expected, format!("{} trailing bytes after {count} rows", bytes.len() - expected)));
    }
    let mut data = Vec::with_capacity(count * dim);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fmt_err(
                HEADER_LEN + 4 * k,
                format!("non-finite value in row {}, column {}", k / dim, k % dim),
            ));
        }
        data.push(v as f64);
    }
    Ok(Array2::from_shape_vec((count, dim), data).expect("length checked"))
}

/// Serializes rows as f32; values are rounded to single precision.
pub fn encode_embeddings(matrix: &Array2<f64>) -> Result<Vec<u8>> {
    let (count, dim) = matrix.dim();
    if dim == 0 {
        return Err(Error::shape("embedding dimension must be positive"));
    }
    let count32 = u32::try_from(count).map_err(|_| Error::shape("too many rows for EMB1"))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::shape("dimension too large for EMB1"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * count * dim);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count32.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in matrix.iter() {
        let v = *v as f32;
        if !v.is_finite() {
            return Err(Error::numerical("cannot store non-finite embedding value"));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| match e {
        Error::Format { position, message, .. } => Error::format(path.display().to_string(), position, message),
        other => other,
    })
}

pub fn write_embeddings(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(matrix)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
