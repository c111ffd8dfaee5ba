//! Checkpoint container.
//!
//! Layout: the magic bytes `DRIF`, one version byte, a little-endian `u32`
//! manifest length, the JSON manifest (model config, step counter, parameter
//! names and shapes), then every parameter as little-endian `f32` in manifest
//! order. Manifest order is the sorted key order of the parameter store, so
//! saving an unchanged model always yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::persist;

pub const MAGIC: &[u8; 4] = b"DRIF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    params: Vec<ParamEntry>,
}

/// Serializes a model to the container format.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let manifest = Manifest {
        config: model.config().clone(),
        step: model.step,
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                dims: t.dims().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + 4 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a model from container bytes, validating every section.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Corruption(format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = *bytes
        .get(4)
        .ok_or_else(|| Error::Corruption("truncated before the version byte".into()))?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Corruption("truncated manifest length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(9..9 + len)
        .ok_or_else(|| Error::Corruption("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Corruption(format!("unreadable manifest: {e}")))?;
    let mut model = Model::new(manifest.config).map_err(|e| Error::Corruption(format!("manifest config: {e}")))?;
    model.step = manifest.step;

    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.dims().to_vec()))
        .collect();
    for (name, _) in &expected {
        if !manifest.params.iter().any(|p| &p.name == name) {
            return Err(Error::Corruption(format!("missing parameter {name}")));
        }
    }
    if manifest.params.len() != expected.len() {
        let extra = manifest
            .params
            .iter()
            .find(|p| model.params.get(&p.name).is_none())
            .map_or_else(|| "duplicate entries".to_string(), |p| p.name.clone());
        return Err(Error::Corruption(format!("unexpected parameter {extra}")));
    }

    let mut offset = 9 + len;
    for entry in &manifest.params {
        let slot = model.params.get_mut(&entry.name).expect("checked above");
        if slot.dims() != entry.dims.as_slice() {
            return Err(Error::Corruption(format!(
                "parameter {} has shape {:?}, config implies {:?}",
                entry.name,
                entry.dims,
                slot.dims()
            )));
        }
        let n = slot.len();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Corruption(format!("payload truncated at parameter {}", entry.name)))?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the payload",
            bytes.len() - offset
        )));
    }
    if !model.params.all_finite() {
        return Err(Error::Corruption("non-finite parameter values".into()));
    }
    Ok(model)
}

/// Writes atomically and fsyncs before returning.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    persist::write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&persist::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let mut cfg = ModelConfig::toy();
        cfg.backbone.base_dim = 8;
        cfg.backbone.fuse_blocks = 1;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn roundtrip_and_errors() {
        let mut m = tiny();
        m.step = 17;
        m.params.randomize(5, 0.1);
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes[4], VERSION);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.step, 17);
        assert_eq!(to_bytes(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        for cut in [2, 7, 30, bytes.len() - 3] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
    }
}
