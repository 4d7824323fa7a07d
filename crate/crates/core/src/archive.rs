//! Binary weight archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPTW"                      4-byte magic
//! u64                         record count
//! per record:
//!   u32, [u8]                 name length, UTF-8 name
//!   u8                        dtype code (1 = f32, 2 = f64)
//!   u32, [u64; rank]          rank, extents
//!   [u8]                      element data, IEEE-754 little-endian
//! ```

use std::collections::HashSet;
use std::path::Path;

use dpt_tensor::{DType, Scalar, Tensor};

use crate::error::{DptError, Result};
use crate::params::{ParamStore, Plan};

pub const MAGIC: &[u8; 4] = b"DPTW";

fn archive_err(msg: impl Into<String>) -> DptError {
    DptError::Archive(msg.into())
}

/// A record as stored, before dtype and plan checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_stored() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t, _) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                archive_err(format!(
                    "truncated archive: {what} needs {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len().saturating_sub(self.pos)
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses the container structure without interpreting element data.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<RawRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(archive_err("bad magic, not a weight archive"));
    }
    let count = r.u64("record count")?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| archive_err(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| archive_err(format!("record `{name}`: unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| archive_err(format!("record `{name}`: shape overflows")))?;
        let size = numel
            .checked_mul(dtype.size_of())
            .ok_or_else(|| archive_err(format!("record `{name}`: size overflows")))?;
        let data = r
            .take(size, &format!("data of `{name}`"))?
            .to_vec();
        if !seen.insert(name.clone()) {
            return Err(archive_err(format!("duplicate record `{name}`")));
        }
        records.push(RawRecord { name, dtype, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(archive_err(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// Decodes and validates against `plan`: every planned tensor must be
/// present with the planned shape and the requested dtype, and nothing
/// else may be present.
pub fn decode<T: Scalar>(bytes: &[u8], plan: &Plan) -> Result<ParamStore<T>> {
    let records = decode_records(bytes)?;
    for rec in &records {
        let spec = plan
            .get(&rec.name)
            .ok_or_else(|| archive_err(format!("unexpected record `{}`", rec.name)))?;
        if rec.shape != spec.shape {
            return Err(archive_err(format!(
                "record `{}` has shape {:?}, expected {:?}",
                rec.name, rec.shape, spec.shape
            )));
        }
        if rec.dtype != T::DTYPE {
            return Err(archive_err(format!(
                "record `{}` has dtype {}, expected {}",
                rec.name,
                rec.dtype,
                T::DTYPE
            )));
        }
    }
    let mut store = ParamStore::default();
    for spec in plan.specs() {
        let rec = records
            .iter()
            .find(|r| r.name == spec.name)
            .ok_or_else(|| archive_err(format!("missing record `{}`", spec.name)))?;
        let size = T::DTYPE.size_of();
        let data: Vec<T> = rec.data.chunks_exact(size).map(T::read_le).collect();
        store.insert(&spec.name, Tensor::new(&rec.shape, data)?, spec.kind);
    }
    Ok(store)
}

/// Element type of the first record, `None` for an empty archive.
pub fn peek_dtype(bytes: &[u8]) -> Result<Option<DType>> {
    Ok(decode_records(bytes)?.first().map(|r| r.dtype))
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, plan: &Plan) -> Result<ParamStore<T>> {
    decode(&std::fs::read(path)?, plan)
}
