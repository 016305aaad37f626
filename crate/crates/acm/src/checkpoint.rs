//! Checkpoint container: magic "ACMN", version, a JSON metadata blob, then
//! named little-endian f32 tensors. Writing is canonical (tensors sorted by
//! name), so save -> load -> save reproduces the file byte for byte.

use crate::error::{AcmError, Result};
use crate::model::{ModelConfig, ModelParams, NamedTensor};
use crate::train::AdamState;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ACMN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
    /// First epoch a resumed run should execute.
    pub next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    next_epoch: usize,
    adam_t: Option<u64>,
}

fn write_tensor(w: &mut impl Write, t: &NamedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[t.shape.len() as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| AcmError::Format(format!("truncated checkpoint: {e}")))
}

fn read_tensor(r: &mut impl Read) -> Result<NamedTensor> {
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| AcmError::Format("tensor name is not UTF-8".to_string()))?;
    let mut b1 = [0u8; 1];
    read_exact(r, &mut b1)?;
    let ndim = b1[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut b4 = [0u8; 4];
    for _ in 0..ndim {
        read_exact(r, &mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(r, &mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Ok(NamedTensor { name, shape, data })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = Meta {
        config: ckpt.params.config.clone(),
        next_epoch: ckpt.next_epoch,
        adam_t: ckpt.adam.as_ref().map(|a| a.t),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut tensors = ckpt.params.named_tensors();
    if let Some(adam) = &ckpt.adam {
        tensors.push(NamedTensor {
            name: "zz_adam.m".to_string(),
            shape: vec![adam.m.len()],
            data: adam.m.clone(),
        });
        tensors.push(NamedTensor {
            name: "zz_adam.v".to_string(),
            shape: vec![adam.v.len()],
            data: adam.v.clone(),
        });
    }
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    buf.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    buf.write_all(&meta_json)?;
    buf.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        write_tensor(&mut buf, t)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(AcmError::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(AcmError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4)?;
    let meta_len = u32::from_le_bytes(b4) as usize;
    let mut meta_json = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_json)?;
    let meta: Meta = serde_json::from_slice(&meta_json)
        .map_err(|e| AcmError::Format(format!("bad checkpoint metadata: {e}")))?;
    read_exact(&mut r, &mut b4)?;
    let tensor_count = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        tensors.push(read_tensor(&mut r)?);
    }
    if !r.is_empty() {
        return Err(AcmError::Format("trailing bytes after checkpoint payload".to_string()));
    }
    let params = ModelParams::from_named_tensors(&meta.config, &tensors)?;
    let adam = match meta.adam_t {
        None => None,
        Some(t) => {
            let find = |name: &str| -> Result<Vec<f32>> {
                tensors
                    .iter()
                    .find(|x| x.name == name)
                    .map(|x| x.data.clone())
                    .ok_or_else(|| {
                        AcmError::Format(format!("checkpoint missing tensor '{name}'"))
                    })
            };
            let m = find("zz_adam.m")?;
            let v = find("zz_adam.v")?;
            if m.len() != params.trainable_count() || v.len() != m.len() {
                return Err(AcmError::Format(
                    "optimizer state size does not match parameter count".to_string(),
                ));
            }
            Some(AdamState { m, v, t })
        }
    };
    Ok(Checkpoint { params, adam, next_epoch: meta.next_epoch })
}

/// Stable fingerprint of a parameter set (FNV-1a over the serialized tensors).
pub fn params_fingerprint(params: &ModelParams<f32>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for t in params.named_tensors() {
        eat(t.name.as_bytes());
        for &v in &t.data {
            eat(&v.to_le_bytes());
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            image_size: 16,
            encoder_channels: vec![4, 8],
            feature_dim: 8,
            descriptor_dim: 4,
            rotation_classes: 4,
            init_seed: 77,
        };
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let count = params.trainable_count();
        let mut adam = AdamState::new(count);
        adam.t = 5;
        adam.m[0] = 0.25;
        adam.v[1] = 1.5;
        Checkpoint { params, adam: Some(adam), next_epoch: 3 }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(ckpt, loaded);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(AcmError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(AcmError::Format(_))));
    }

    #[test]
    fn fingerprint_tracks_parameter_changes() {
        let ckpt = sample_checkpoint();
        let f1 = params_fingerprint(&ckpt.params);
        let mut other = ckpt.params.clone();
        other.proj_b[0] += 1.0;
        assert_ne!(f1, params_fingerprint(&other));
        assert_eq!(f1, params_fingerprint(&ckpt.params));
    }
}
