//! `GRANATT1` parameter checkpoints.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, UTF-8 JSON
//! header (`version`, `config`, `params` as name/shape pairs), then every
//! parameter as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRANATT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetworkConfig,
    params: Vec<ParamEntry>,
}

impl Network {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.store.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing GRANATT1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {len} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("invalid header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut net = Network::new(header.config).map_err(|e| bad(format!("invalid config: {e}")))?;
        if header.params.len() != net.store.len() {
            return Err(bad(format!(
                "{} parameters listed, the configured network has {}",
                header.params.len(),
                net.store.len()
            )));
        }
        let mut data = &bytes[end..];
        let ids: Vec<_> = net.store.ids().collect();
        for (entry, id) in header.params.iter().zip(ids) {
            let t = net.store.get(id);
            if entry.name != net.store.name(id) || entry.shape != t.shape() {
                return Err(bad(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    net.store.name(id),
                    t.shape()
                )));
            }
            let n = t.len();
            if data.len() < 8 * n {
                return Err(bad(format!("data truncated in parameter {}", entry.name)));
            }
            let values: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite value in parameter {}", entry.name)));
            }
            net.store.set(id, Tensor::new(&entry.shape, values)?);
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, net.to_checkpoint_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Network::from_checkpoint_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
