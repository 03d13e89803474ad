//! Checkpoint archives.
//!
//! Layout: the 8-byte magic `IMLCKPT1`, a little-endian `u64` header length,
//! a JSON header (metadata, network config and a tensor table), then every
//! tensor as little-endian `f32` in table order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::params::{ModelParameters, Param};
use crate::volume_io::nifti::atomic_write;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"IMLCKPT1";
pub const EXTENSION: &str = "ckpt";

/// A snapshot of model parameters with the validation score it earned.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: NetworkConfig,
    pub parameters: ModelParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch_index: u64,
    pub val_dice: f64,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

pub fn now_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, parameters: ModelParameters, epoch_index: u64, val_dice: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&val_dice) {
            return Err(Error::Config(format!("val_dice {val_dice} outside [0, 1]")));
        }
        parameters.check_matches(&config)?;
        Ok(Self {
            meta: CheckpointMeta {
                epoch_index,
                val_dice,
                created_at: now_seconds(),
            },
            config,
            parameters,
        })
    }

    pub fn file_name(&self) -> String {
        format!("epoch_{:06}_dice_{:.6}.{EXTENSION}", self.meta.epoch_index, self.meta.val_dice)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            config: self.config.clone(),
            tensors: self
                .parameters
                .tensors
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.parameters.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.parameters.tensors.values() {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        let mut parameters = ModelParameters::default();
        let mut rest = body;
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            if rest.len() < 4 * len {
                return Err(Error::Malformed(format!("checkpoint truncated in tensor {}", entry.name)));
            }
            let (chunk, tail) = rest.split_at(4 * len);
            rest = tail;
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            parameters.tensors.insert(entry.name, Param { shape: entry.shape, values });
        }
        if !rest.is_empty() {
            return Err(Error::Malformed("trailing bytes after checkpoint tensors".into()));
        }
        parameters.check_matches(&header.config)?;
        Ok(Self {
            meta: header.meta,
            config: header.config,
            parameters,
        })
    }

    /// Write into `dir` under [`Checkpoint::file_name`]; readers never see a
    /// partial file.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        atomic_write(&path, &self.to_bytes())?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Malformed("not a checkpoint archive".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Malformed("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    Ok((header, &bytes[16 + len..]))
}

/// Read only the metadata of a checkpoint file.
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..8] != MAGIC {
        return Err(Error::Malformed(format!("{} is not a checkpoint archive", path.display())));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    file.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    Ok(header.meta)
}

/// Checkpoints in `dir`, oldest epoch first. Unreadable files are skipped.
pub fn list_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, CheckpointMeta)>> {
    let dir = dir.as_ref();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
            continue;
        }
        match read_meta(&path) {
            Ok(meta) => out.push((path, meta)),
            Err(e) => log::warn!("skipping checkpoint {}: {e}", path.display()),
        }
    }
    out.sort_by(|a, b| a.1.epoch_index.cmp(&b.1.epoch_index).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// The checkpoint with the highest validation dice; the later one on ties.
pub fn best_checkpoint(dir: impl AsRef<Path>) -> Result<Option<Checkpoint>> {
    let mut best: Option<(PathBuf, CheckpointMeta)> = None;
    for (path, meta) in list_checkpoints(dir)? {
        if best.as_ref().is_none_or(|(_, b)| meta.val_dice >= b.val_dice) {
            best = Some((path, meta));
        }
    }
    best.map(|(p, _)| Checkpoint::load(p)).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet3d::init_params;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_features: 2,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 1,
            patch_dims: [4, 4, 4],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_and_best() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let a = Checkpoint::new(cfg.clone(), init_params(&cfg, 1).unwrap(), 3, 0.5).unwrap();
        let b = Checkpoint::new(cfg.clone(), init_params(&cfg, 2).unwrap(), 9, 0.75).unwrap();
        let pa = a.save(dir.path()).unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(pa.file_name().unwrap(), "epoch_000003_dice_0.500000.ckpt");
        assert_eq!(Checkpoint::load(&pa).unwrap(), a);
        assert_eq!(best_checkpoint(dir.path()).unwrap().unwrap(), b);
        let listed: Vec<u64> = list_checkpoints(dir.path()).unwrap().iter().map(|(_, m)| m.epoch_index).collect();
        assert_eq!(listed, vec![3, 9]);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let cfg = tiny();
        let bytes = Checkpoint::new(cfg.clone(), init_params(&cfg, 1).unwrap(), 0, 0.1).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"IMLCKPT0\0\0\0\0\0\0\0\0").is_err());
        assert!(Checkpoint::new(cfg.clone(), init_params(&cfg, 1).unwrap(), 0, 1.5).is_err());
        assert!(best_checkpoint("/nonexistent/ckpts").unwrap().is_none());
    }
}
