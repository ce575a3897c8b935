//! `SSHW1` weight container.
//!
//! Layout: the 5-byte magic `SSHW1`, a little-endian `u32` header length, a
//! JSON header `{"tensors":[{"name","shape","dtype","byte_offset"}, ...]}`,
//! then the raw little-endian f32 payloads. `byte_offset` counts from the
//! first payload byte.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SSHW1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<Entry>,
}

pub fn encode(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::format(format!("duplicate tensor name `{name}`")));
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::format("weight header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(9 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(Error::format("missing SSHW1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("truncated weight header"))?;
    let header: Header = serde_json::from_slice(&bytes[9..header_end])?;
    let payload = &bytes[header_end..];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        if !seen.insert(e.name.clone()) {
            return Err(Error::format(format!("duplicate tensor name `{}`", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = usize::try_from(e.byte_offset)
            .map_err(|_| Error::format("byte offset overflow"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::format(format!("tensor `{}` exceeds payload", e.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
    }
    Ok(out)
}

pub fn write_to(mut w: impl Write, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&encode(tensors)?)?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}
