//! Content-addressed intermediate cache.
//!
//! One file per (stage, key): a JSON metadata header followed by a raw
//! little-endian f64 blob. Values are stored at full precision, and every
//! producer round-trips its own output through the cache encoding, so a run
//! over cached intermediates is byte-identical to a fresh one.

use std::fs;
use std::path::PathBuf;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::seed::hash_bytes;

const MAGIC: &[u8; 8] = b"smapblob";

/// Cache directory handle; `enabled = false` turns every lookup into a miss
/// and every store into a no-op.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
    enabled: bool,
}

impl Cache {
    pub fn new(dir: PathBuf, enabled: bool) -> Self {
        Self { dir, enabled }
    }

    pub fn disabled() -> Self {
        Self {
            dir: PathBuf::new(),
            enabled: false,
        }
    }

    fn path(&self, stage: &str, key: u64) -> PathBuf {
        self.dir.join(format!("{stage}-{key:016x}.bin"))
    }

    /// Store metadata + f64 payload under `(stage, key)`. Written via a
    /// temporary file and rename so concurrent folds never observe a
    /// half-written entry.
    pub fn store<M: Serialize>(&self, stage: &str, key: u64, meta: &M, data: &[f64]) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        fs::create_dir_all(&self.dir).map_err(Error::io(&self.dir))?;
        let meta_json = serde_json::to_vec(meta).expect("serializable cache meta");
        let mut bytes =
            Vec::with_capacity(MAGIC.len() + 16 + meta_json.len() + data.len() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&meta_json);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = self.path(stage, key);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, &path).map_err(Error::io(&path))?;
        Ok(())
    }

    /// Fetch a previously stored entry; `None` on miss or withdrawable
    /// corruption (a corrupt entry is treated as absent).
    pub fn load<M: DeserializeOwned>(&self, stage: &str, key: u64) -> Option<(M, Vec<f64>)> {
        if !self.enabled {
            return None;
        }
        let bytes = fs::read(self.path(stage, key)).ok()?;
        if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
            return None;
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().ok()?) as usize;
        let data_len = u64::from_le_bytes(bytes[16..24].try_into().ok()?) as usize;
        let meta_end = 24 + meta_len;
        if bytes.len() != meta_end + data_len * 8 {
            return None;
        }
        let meta: M = serde_json::from_slice(&bytes[24..meta_end]).ok()?;
        let data = bytes[meta_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect();
        Some((meta, data))
    }
}

/// Key derivation from serializable descriptors.
pub fn key_of(parts: &[&dyn erased_ser::ErasedSer]) -> u64 {
    let mut bytes = Vec::new();
    for p in parts {
        bytes.extend_from_slice(&p.to_json_bytes());
        bytes.push(0x1e);
    }
    hash_bytes(&bytes)
}

/// Object-safe serialization shim so heterogeneous key parts can be hashed
/// together.
pub mod erased_ser {
    pub trait ErasedSer {
        fn to_json_bytes(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> ErasedSer for T {
        fn to_json_bytes(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("serializable key part")
        }
    }
}
