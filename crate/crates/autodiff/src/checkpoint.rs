use std::io::{Read, Write};

use crate::error::AutodiffError;
use crate::params::ParamStore;
use crate::Result;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FINN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One tensor as stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Layout: magic, u32 version, u64 entry count, then per entry a u64 name
/// length, UTF-8 name, u64 rank, u64 dims and little-endian f64 values.
pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, entry) in store.entries() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(entry.shape.len() as u64).to_le_bytes())?;
        for &d in &entry.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on any single length field, to fail fast on corrupt files.
const MAX_FIELD: u64 = 1 << 32;

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    if count > MAX_FIELD {
        return Err(AutodiffError::Checkpoint("entry count out of range".into()));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_FIELD {
            return Err(AutodiffError::Checkpoint("name length out of range".into()));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank > 8 {
            return Err(AutodiffError::Checkpoint(format!("rank {rank} out of range")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n as u64 > MAX_FIELD {
            return Err(AutodiffError::Checkpoint("tensor size out of range".into()));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok(entries)
}

impl ParamStore {
    /// Overwrites values by name. Every store entry must be present in the
    /// checkpoint with an identical shape; extra checkpoint entries are an
    /// error as well.
    pub fn assign_checkpoint(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for e in entries {
            let id = self.id(&e.name)?;
            if self.entry(id).shape != e.shape {
                return Err(AutodiffError::Checkpoint(format!(
                    "entry {} has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    self.entry(id).shape
                )));
            }
        }
        for e in entries {
            let id = self.id(&e.name)?;
            self.set_value(id, &e.values)?;
        }
        Ok(())
    }
}
