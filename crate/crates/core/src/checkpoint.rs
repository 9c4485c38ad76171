//! Versioned binary checkpoints shared by both models.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, a JSON
//! header (architecture tag, model config, tensor manifest with byte offsets),
//! then every tensor as little-endian `f32`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Manifest, ParamSet};
use crate::student::{StudentConfig, StudentParams};
use crate::teacher::{first_mismatch, TeacherConfig, TeacherParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint, not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        self.header
            .tensors
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect()
    }

    fn check(&self, architecture: &str, expected: &Manifest) -> Result<()> {
        if self.header.architecture != architecture {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a `{}`, expected `{architecture}`",
                self.header.architecture
            )));
        }
        let got = self.manifest();
        if &got != expected {
            return Err(Error::Checkpoint(format!(
                "manifest mismatch: {}",
                first_mismatch(expected, &got)
            )));
        }
        Ok(())
    }

    /// Teacher weights, validated against `cfg` (or the stored config).
    pub fn teacher(&self, cfg: Option<&TeacherConfig>) -> Result<(TeacherConfig, TeacherParams)> {
        let cfg = match cfg {
            Some(c) => c.clone(),
            None => serde_json::from_value(self.header.config.clone())?,
        };
        self.check(TeacherParams::ARCHITECTURE, &cfg.manifest())?;
        let mut p = TeacherParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.assign(self.tensors.clone())?;
        Ok((cfg, p))
    }

    pub fn student(&self, cfg: Option<&StudentConfig>) -> Result<(StudentConfig, StudentParams)> {
        let cfg = match cfg {
            Some(c) => c.clone(),
            None => serde_json::from_value(self.header.config.clone())?,
        };
        self.check(StudentParams::ARCHITECTURE, &cfg.manifest())?;
        let mut p = StudentParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.assign(self.tensors.clone())?;
        Ok((cfg, p))
    }
}

pub fn encode<P: ParamSet, C: Serialize>(params: &P, config: &C) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, t) in params.names().into_iter().zip(params.tensors()) {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len();
    }
    let header = Header {
        architecture: P::ARCHITECTURE.to_string(),
        config: serde_json::to_value(config)?,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has a non-contiguous offset",
                e.name
            )));
        }
        let end = e.offset + 4 * n;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated inside `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save_checkpoint<P: ParamSet, C: Serialize>(
    path: &Path,
    params: &P,
    config: &C,
) -> Result<()> {
    let bytes = encode(params, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Rounds every parameter through `f32`, matching what a save/load cycle
/// would produce.
pub fn quantize<P: ParamSet>(params: &mut P) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher() -> (TeacherConfig, TeacherParams) {
        let cfg = TeacherConfig {
            layers: 2,
            dim: 3,
            kernel: 2,
            history: 4,
            horizon: 2,
            ..TeacherConfig::default()
        };
        let p = TeacherParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_quantized_identity() {
        let (cfg, p) = teacher();
        let ck = decode(&encode(&p, &cfg).unwrap()).unwrap();
        let (cfg2, p2) = ck.teacher(None).unwrap();
        assert_eq!(cfg, cfg2);
        let mut q = p.clone();
        quantize(&mut q);
        assert_eq!(p2, q);
        // A quantized set survives another cycle unchanged.
        let (_, p3) = decode(&encode(&p2, &cfg).unwrap())
            .unwrap()
            .teacher(Some(&cfg))
            .unwrap();
        assert_eq!(p3, p2);
    }

    #[test]
    fn mismatch_names_first_shape() {
        let (cfg, p) = teacher();
        let ck = decode(&encode(&p, &cfg).unwrap()).unwrap();
        let other = TeacherConfig { horizon: 3, ..cfg };
        let err = ck.teacher(Some(&other)).unwrap_err().to_string();
        assert!(err.contains("readout.weight"), "{err}");
        assert!(ck.student(None).is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (cfg, p) = teacher();
        let bytes = encode(&p, &cfg).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode(&v2).unwrap_err().to_string().contains("version 2"));
    }
}
