//! Binary matrix container.
//!
//! Layout: `b"CZSL"`, `u32` version, `u64` rows, `u64` dim, then row-major
//! little-endian values. Version 1 stores 32-bit floats (features);
//! version 2 stores 64-bit floats (checkpoints, encoder weights). An archive
//! is several records back to back.

use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"CZSL";
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32 = 1,
    F64 = 2,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes at offset {0}")]
    BadMagic(usize),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record at offset {offset}: need {need} bytes, have {have}")]
    Truncated { offset: usize, need: usize, have: usize },
    #[error("record shape {rows}x{dim} overflows")]
    Overflow { rows: u64, dim: u64 },
    #[error("non-finite value in record at offset {0}")]
    NonFinite(usize),
    #[error("expected {expected} record(s), found {found}")]
    RecordCount { expected: usize, found: usize },
}

pub fn encode_matrix(m: &Matrix, precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * precision.width());
    write_matrix(&mut out, m, precision);
    out
}

pub fn write_matrix(out: &mut Vec<u8>, m: &Matrix, precision: Precision) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(precision as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match precision {
        Precision::F32 => m
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Precision::F64 => m
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_archive(ms: &[&Matrix], precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    for m in ms {
        write_matrix(&mut out, m, precision);
    }
    out
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

/// Decodes one record starting at `offset`; returns it and the offset just
/// past it.
pub fn decode_record(
    bytes: &[u8],
    offset: usize,
) -> Result<(Matrix, Precision, usize), ContainerError> {
    let rest = &bytes[offset..];
    if rest.len() < HEADER_LEN {
        return Err(ContainerError::Truncated {
            offset,
            need: HEADER_LEN,
            have: rest.len(),
        });
    }
    if &rest[..4] != MAGIC {
        return Err(ContainerError::BadMagic(offset));
    }
    let precision = match read_u32(&rest[4..8]) {
        1 => Precision::F32,
        2 => Precision::F64,
        v => return Err(ContainerError::UnsupportedVersion(v)),
    };
    let rows = read_u64(&rest[8..16]);
    let dim = read_u64(&rest[16..24]);
    let overflow = ContainerError::Overflow { rows, dim };
    let count = rows
        .checked_mul(dim)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or(overflow.clone())?;
    let need = count.checked_mul(precision.width()).ok_or(overflow)?;
    let payload = &rest[HEADER_LEN..];
    if payload.len() < need {
        return Err(ContainerError::Truncated {
            offset,
            need: HEADER_LEN + need,
            have: rest.len(),
        });
    }
    let data: Vec<f64> = match precision {
        Precision::F32 => payload[..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => payload[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ContainerError::NonFinite(offset));
    }
    let m = Matrix::from_vec(rows as usize, dim as usize, data).expect("shape checked");
    Ok((m, precision, offset + HEADER_LEN + need))
}

/// Every record in `bytes`; trailing garbage is an error.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<Matrix>, ContainerError> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (m, _, next) = decode_record(bytes, offset)?;
        out.push(m);
        offset = next;
    }
    Ok(out)
}

/// Exactly one record.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Matrix, Precision), ContainerError> {
    let (m, p, end) = decode_record(bytes, 0)?;
    if end != bytes.len() {
        return Err(ContainerError::RecordCount {
            expected: 1,
            found: 1 + decode_archive(&bytes[end..]).map_or(1, |v| v.len()),
        });
    }
    Ok((m, p))
}
