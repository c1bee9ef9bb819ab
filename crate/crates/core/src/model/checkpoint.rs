//! Model checkpoints: a small versioned binary container of named parameter
//! tensors with shapes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DSIMCKPT"
//! version u32      currently 1
//! dtype   u8       4 = f32, 8 = f64
//! config           hidden_dim u32, latent_dim u32, birdview_resolution u32,
//!                  feature_dim u32, obs_sigma f64, kinematic mode (u16 len +
//!                  utf8 name), encoder channel count u32 + channels u32...
//! count   u32      number of parameters, then per parameter:
//!                  name (u16 len + utf8), ndim u8, dims u32..., raw values
//! ```
//!
//! Writing is deterministic: identical models produce identical bytes.

use super::{AgentModel, AgentModelConfig, ParamSet};
use crate::autodiff::{Scalar, Tensor};
use crate::kinematics::KinematicMode;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DSIMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint stores {stored}-byte floats, expected {expected}-byte")]
    DtypeMismatch { stored: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn dtype_code<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    Ok(u16::from_le_bytes(read_exact(r, 2)?.try_into().unwrap()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u16(r)? as usize;
    String::from_utf8(read_exact(r, len)?)
        .map_err(|_| CheckpointError::Malformed("invalid utf8 in name".into()))
}

/// Serializes a model to checkpoint bytes.
pub fn checkpoint_bytes<T: Scalar>(model: &AgentModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype_code::<T>());

    let c = &model.config;
    out.extend_from_slice(&(c.hidden_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.birdview_resolution as u32).to_le_bytes());
    out.extend_from_slice(&(c.feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&c.obs_sigma.to_le_bytes());
    write_str(&mut out, c.kinematic_mode.name());
    out.extend_from_slice(&(c.encoder_channels.len() as u32).to_le_bytes());
    for &ch in &c.encoder_channels {
        out.extend_from_slice(&(ch as u32).to_le_bytes());
    }

    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.tensors() {
        write_str(&mut out, name);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            let bits = v.to_f64();
            if std::mem::size_of::<T>() == 4 {
                out.extend_from_slice(&(bits as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(
    model: &AgentModel<T>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AgentModel<T>, CheckpointError> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_exact(&mut f, 8)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let dtype = read_exact(&mut f, 1)?[0];
    if dtype != dtype_code::<T>() {
        return Err(CheckpointError::DtypeMismatch {
            stored: dtype,
            expected: dtype_code::<T>(),
        });
    }

    let hidden_dim = read_u32(&mut f)? as usize;
    let latent_dim = read_u32(&mut f)? as usize;
    let birdview_resolution = read_u32(&mut f)? as usize;
    let feature_dim = read_u32(&mut f)? as usize;
    let obs_sigma = f64::from_le_bytes(read_exact(&mut f, 8)?.try_into().unwrap());
    let mode_name = read_str(&mut f)?;
    let kinematic_mode = KinematicMode::parse(&mode_name)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown kinematic mode {mode_name}")))?;
    let n_channels = read_u32(&mut f)? as usize;
    let mut encoder_channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        encoder_channels.push(read_u32(&mut f)? as usize);
    }
    let config = AgentModelConfig {
        hidden_dim,
        latent_dim,
        birdview_resolution,
        encoder_channels,
        feature_dim,
        obs_sigma,
        kinematic_mode,
    };

    let count = read_u32(&mut f)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut f)?;
        let ndim = read_exact(&mut f, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut f)? as usize);
        }
        let n: usize = shape.iter().product();
        let elem = std::mem::size_of::<T>();
        let raw = read_exact(&mut f, n * elem)?;
        let data: Vec<T> = raw
            .chunks_exact(elem)
            .map(|c| {
                if elem == 4 {
                    T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    T::from_f64(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)));
    }

    Ok(AgentModel {
        config,
        params: ParamSet::from_entries(entries),
    })
}

/// FNV-1a of a byte stream; used to stamp rollout exports with the model they
/// came from.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentModelConfig;

    #[test]
    fn roundtrip_preserves_everything() {
        let model = AgentModel::<f32>::init(AgentModelConfig::toy(), 99).unwrap();
        let dir = std::env::temp_dir().join("drivesim-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((na, ta), (nb, tb)) in model.params.tensors().zip(loaded.params.tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
        // deterministic bytes
        assert_eq!(checkpoint_bytes(&model), checkpoint_bytes(&loaded));
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let model = AgentModel::<f32>::init(AgentModelConfig::toy(), 1).unwrap();
        let dir = std::env::temp_dir().join("drivesim-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model32.ckpt");
        save_checkpoint(&model, &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = std::env::temp_dir().join("drivesim-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
