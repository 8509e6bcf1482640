//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SMLP`, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! raw `f64` values. A trailing `u32` CRC32 covers every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::OptimState;

pub const MAGIC: &[u8; 4] = b"SMLP";
pub const VERSION: u32 = 1;

const OPTIM_STEP: &str = "optim.step";

pub fn encode(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
    for (name, t) in entries {
        let len = u32::try_from(name.len()).map_err(|_| too_big("name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("{what} does not fit in a u32"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint(format!("{} bytes is too short", bytes.len())));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| too_big("dimension"))))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| too_big("element count"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| too_big("tensor"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} unread bytes before the CRC", body.len() - r.pos)));
    }
    Ok(entries)
}

/// Parameters, then optimizer moments and step when given.
pub fn save_checkpoint(path: &Path, store: &ParamStore, optim: Option<&OptimState>) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    if let Some(o) = optim {
        for (id, spec, _) in store.iter() {
            if let Some((m, v)) = o.moments(id) {
                owned.push((format!("optim.m.{}", spec.name), m.clone()));
                owned.push((format!("optim.v.{}", spec.name), v.clone()));
            }
        }
        owned.push((OPTIM_STEP.into(), Tensor::scalar(o.step as f64)));
    }
    let mut entries: Vec<(&str, &Tensor)> = store.iter().map(|(_, s, t)| (s.name.as_str(), t)).collect();
    entries.extend(owned.iter().map(|(n, t)| (n.as_str(), t)));
    let bytes = encode(&entries)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads every store tensor by name; optimizer entries are read only when
/// `optim` is given.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, optim: Option<&mut OptimState>) -> Result<()> {
    let entries = decode(&fs::read(path)?)?;
    let mut by_name: std::collections::HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.name(id).to_string();
        let t = by_name.remove(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        store.set(id, t.clone())?;
    }
    if let Some(o) = optim {
        let mut fresh = OptimState::new(store, o.hyper);
        for &id in &ids {
            if fresh.moments(id).is_none() {
                continue;
            }
            let name = store.name(id);
            let mut get = |kind: &str| {
                let key = format!("optim.{kind}.{name}");
                by_name
                    .remove(key.as_str())
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))
            };
            let (m, v) = (get("m")?, get("v")?);
            fresh.set_moments(store, id, m, v)?;
        }
        let step = by_name.remove(OPTIM_STEP).ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        fresh.step = step.data().first().copied().unwrap_or(0.0) as u64;
        *o = fresh;
    }
    Ok(())
}
