//! `.emb` embedding dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCOE" | u16 version = 1 | u8 dtype = 1 (f32 LE) | u32 dim | u64 count
//!        | u32 tag_len | tag (UTF-8) | count × dim × f32
//! ```
//!
//! Rows carry no ids; readers number them `0..count`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::numerics::Matrix;

pub const EMB_MAGIC: &[u8; 4] = b"LCOE";
pub const EMB_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
const MAX_TAG_LEN: u32 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbDumpHeader {
    pub dim: u32,
    pub count: u64,
    pub modality: String,
}

impl EmbDumpHeader {
    pub fn payload_len(&self) -> u64 {
        self.count * self.dim as u64 * 4
    }
}

pub fn write_emb<W: Write>(modality: &str, vectors: &Matrix, mut out: W) -> Result<()> {
    if !vectors.is_finite() {
        return Err(Error::NonFinite("embedding dump".into()));
    }
    if modality.len() as u64 > MAX_TAG_LEN as u64 {
        return Err(Error::Format("modality tag too long".into()));
    }
    let dim = u32::try_from(vectors.cols()).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(23 + modality.len() + vectors.len() * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(vectors.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(modality.len() as u32).to_le_bytes());
    buf.extend_from_slice(modality.as_bytes());
    for v in vectors.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(format!("file ends inside the {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn parse_emb(mut bytes: &[u8]) -> Result<(EmbDumpHeader, Matrix)> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != EMB_MAGIC {
        return Err(Error::Format("not an embedding dump (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(b, 2, "header")?.try_into().unwrap());
    if version != EMB_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let dtype = take(b, 1, "header")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let dim = u32::from_le_bytes(take(b, 4, "header")?.try_into().unwrap());
    let count = u64::from_le_bytes(take(b, 8, "header")?.try_into().unwrap());
    let tag_len = u32::from_le_bytes(take(b, 4, "header")?.try_into().unwrap());
    if tag_len > MAX_TAG_LEN {
        return Err(Error::Format(format!("modality tag length {tag_len} is implausible")));
    }
    let modality = String::from_utf8(take(b, tag_len as usize, "modality tag")?.to_vec())
        .map_err(|_| Error::Format("modality tag is not UTF-8".into()))?;
    let header = EmbDumpHeader { dim, count, modality };
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    let got = b.len() as u64;
    if got < expected {
        return Err(Error::Truncated(format!("payload has {got} bytes, header promises {expected}")));
    }
    if got > expected {
        return Err(Error::Format(format!("{} trailing bytes after payload", got - expected)));
    }
    let data: Vec<f64> = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding dump payload".into()));
    }
    let m = Matrix::from_vec(count as usize, dim as usize, data)?;
    Ok((header, m))
}

pub fn read_emb<R: Read>(mut input: R) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let (header, m) = parse_emb(&bytes)?;
    Ok(EmbeddingSet::from_matrix(&header.modality, m))
}
