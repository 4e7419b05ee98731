use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub type Hash = [u8; 32];

/// SHA-256 over the little-endian bytes of a tensor's values.
pub fn hash_tensor(t: &Tensor) -> Hash {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Snapshot of every frozen parameter taken when a model is built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub frozen: Vec<(String, Hash)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreezeReport {
    /// `(name, unchanged)` per frozen parameter.
    pub entries: Vec<(String, bool)>,
    pub trainable: usize,
    pub total: usize,
}

impl FreezeReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|(_, ok)| *ok)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect()
    }

    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total.max(1) as f64
    }
}

impl FreezePolicy {
    pub fn snapshot(store: &ParamStore) -> Self {
        let frozen =
            store.iter().filter(|(_, p)| p.frozen).map(|(_, p)| (p.name.clone(), hash_tensor(&p.tensor))).collect();
        FreezePolicy { frozen }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.frozen.iter().any(|(n, _)| n == name)
    }
}

/// Checks every snapshotted parameter against its hash. A parameter that is
/// missing or no longer frozen also fails.
pub fn assert_frozen(policy: &FreezePolicy, store: &ParamStore) -> FreezeReport {
    let entries = policy
        .frozen
        .iter()
        .map(|(name, hash)| {
            let ok = store.by_name(name).is_ok_and(|p| p.frozen && hash_tensor(&p.tensor) == *hash);
            (name.clone(), ok)
        })
        .collect();
    FreezeReport { entries, trainable: store.trainable_count(), total: store.total_count() }
}

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u32 = 1;

/// Writes all parameters: magic `MSCK`, `u32` version, `u32` count, then per
/// parameter `u32` name length, name, `u8` frozen, `u32` rank, `u32` dims,
/// `u64` payload offset in bytes, 32-byte SHA-256; then the concatenated
/// little-endian `f32` payload.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(store))?;
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.frozen));
        out.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&hash_tensor(&p.tensor));
        offset += 4 * p.tensor.numel() as u64;
    }
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub tensor: Tensor,
    pub hash: Hash,
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut c = Cursor(bytes);
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let mut heads = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let frozen = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
        let hash: Hash = c.take(32)?.try_into().expect("32 bytes");
        heads.push((name, frozen, dims, offset, hash));
    }
    let payload = c.0;
    heads
        .into_iter()
        .map(|(name, frozen, dims, offset, hash)| {
            let count: usize = dims.iter().product();
            let raw = payload
                .get(offset..offset + 4 * count)
                .ok_or_else(|| Error::Format(format!("payload of {name} out of range")))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(dims, data)?;
            if hash_tensor(&tensor) != hash {
                return Err(Error::Format(format!("hash mismatch for {name}")));
            }
            Ok(CheckpointEntry { name, frozen, tensor, hash })
        })
        .collect()
}

/// Copies checkpoint values into an existing store with matching names and
/// shapes.
pub fn load_into(store: &mut ParamStore, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} parameters, model has {}", entries.len(), store.len())));
    }
    for e in entries {
        let p = store.by_name_mut(&e.name).map_err(|_| Error::Format(format!("unknown parameter {}", e.name)))?;
        if p.tensor.shape() != e.tensor.shape() {
            return Err(Error::Format(format!("shape mismatch for {}", e.name)));
        }
        p.tensor.data_mut().copy_from_slice(e.tensor.data());
    }
    Ok(())
}
