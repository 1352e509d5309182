//! `DTA1` named-tensor archive.
//!
//! Layout: magic `DTA1`, then one record per tensor:
//! `u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 values[]`,
//! all little-endian. Records are written in lexicographic name order.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::fileio::{push_f32s, write_atomic, ByteReader};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DTA1";

pub fn encode_archive(store: &ParamStore) -> Vec<u8> {
    let mut out = ARCHIVE_MAGIC.to_vec();
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != ARCHIVE_MAGIC {
        return Err(r.fail("missing DTA1 magic"));
    }
    let mut store = ParamStore::new();
    while !r.at_end() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail(format!("`{name}`: dimensions overflow")))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("`{name}`: {e}")))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| r.fail(format!("duplicate tensor `{name}`")))?;
    }
    Ok(store)
}

pub fn write_archive(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_archive(store))
}

pub fn read_archive(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path)?;
    decode_archive(&bytes, path)
}
