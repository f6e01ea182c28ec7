//! Single-tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `GRTF` |
//! | 1 | version (1) |
//! | 1 | dtype code: 1 = f32, 2 = f64 |
//! | 1 | rank |
//! | 4 × rank | dims as `u32` |
//! | rest | row-major payload |

use std::fs;
use std::path::Path;

use geo_repnet_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GRTF";
pub const VERSION: u8 = 1;

pub fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

pub fn header_len(rank: usize) -> usize {
    7 + 4 * rank
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + t.numel() * t.dtype().size_in_bytes());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype_code(t.dtype()));
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decodes one tensor occupying all of `bytes`. `base` is added to reported offsets.
pub fn decode_at(bytes: &[u8], base: u64) -> Result<Tensor> {
    let err = |at: usize, msg: String| Error::format(base + at as u64, msg);
    if bytes.len() < 4 {
        return Err(err(0, format!("file is {} bytes, too short for the magic", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:02x?}, expected \"GRTF\"", &bytes[..4])));
    }
    let version = *bytes.get(4).ok_or_else(|| err(4, "missing version byte".into()))?;
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let code = *bytes.get(5).ok_or_else(|| err(5, "missing dtype byte".into()))?;
    let dtype = match code {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(err(5, format!("unknown dtype code {other}"))),
    };
    let rank = *bytes.get(6).ok_or_else(|| err(6, "missing rank byte".into()))? as usize;
    if rank == 0 {
        return Err(err(6, "rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 7 + 4 * i;
        let raw = bytes
            .get(at..at + 4)
            .ok_or_else(|| err(at.min(bytes.len()), format!("header truncated inside dimension {i}")))?;
        let d = u32::from_le_bytes(raw.try_into().expect("four bytes")) as usize;
        if d == 0 {
            return Err(err(at, format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let start = header_len(rank);
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(7, "element count overflows".into()))?;
    let width = dtype.size_in_bytes();
    let expected = count
        .checked_mul(width)
        .ok_or_else(|| err(7, "payload size overflows".into()))?;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(err(
            bytes.len(),
            format!("payload truncated: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(err(
            start + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let v = match dtype {
            DType::F32 => f32::from_le_bytes(chunk.try_into().expect("four bytes")) as f64,
            DType::F64 => f64::from_le_bytes(chunk.try_into().expect("eight bytes")),
        };
        if !v.is_finite() {
            return Err(err(start + i * width, format!("non-finite value at element {i}")));
        }
        data.push(v);
    }
    Ok(Tensor::new(&shape, data, dtype)?)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    decode_at(bytes, 0)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
