//! Binary checkpoints: `LMKCKPT1`, u64 LE header length, JSON header, then the parameters
//! and (optionally) the optimizer velocity as f32 LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::NetworkModel;
use crate::nn::{build_from_spec, NetworkSpec};

const MAGIC: &[u8; 8] = b"LMKCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub plan_hash: String,
    pub classes: Vec<String>,
    pub epoch: usize,
    pub iteration: usize,
    pub param_count: usize,
    pub has_velocity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub velocity: Option<Vec<f32>>,
}

fn push_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    buf.reserve(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        push_f32s(&mut buf, &self.params);
        if let Some(v) = &self.velocity {
            push_f32s(&mut buf, v);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
        let n = header.param_count;
        let want = 16 + hlen + n * 4 * if header.has_velocity { 2 } else { 1 };
        if bytes.len() != want {
            return Err(Error::format(path, format!("expected {want} bytes, found {}", bytes.len())));
        }
        let data = &bytes[16 + hlen..];
        let params = read_f32s(&data[..n * 4]);
        let velocity = header.has_velocity.then(|| read_f32s(&data[n * 4..]));
        Ok(Checkpoint { header, params, velocity })
    }

    pub fn into_model(self) -> Result<NetworkModel> {
        let (net, init) = build_from_spec(self.header.spec.clone(), 0);
        if init.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} parameters, its network needs {}",
                self.params.len(),
                init.len()
            )));
        }
        Ok(NetworkModel { net, params: self.params })
    }
}
