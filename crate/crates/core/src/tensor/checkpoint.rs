// SPDX-License-Identifier: Apache-2.0

//! Flat binary checkpoint: parameter paths mapped to shaped `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "MOECKPT\0"
//! version   u32       currently 1
//! meta_len  u32       length of the metadata block
//! meta      bytes     UTF-8 JSON object (may be empty)
//! count     u32       number of entries
//! entry*    name_len u32, name UTF-8, ndim u32, dims u64×ndim, values f64×numel
//! ```
//!
//! Entries are written in lexicographic path order. Values are stored via
//! `f64::to_bits`, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"MOECKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(w, self.meta.len())?;
        w.write_all(self.meta.as_bytes())?;
        write_len(w, self.entries.len())?;
        for (name, t) in &self.entries {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_len(w, t.ndim())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta = read_string(r)?;
        let count = read_u32(r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
            }
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_len(w: &mut impl Write, n: usize) -> Result<(), CheckpointError> {
    let n = u32::try_from(n).map_err(|_| CheckpointError::Corrupt("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
