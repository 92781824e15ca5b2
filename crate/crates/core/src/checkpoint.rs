//! Checkpoint archive: a JSON manifest (architecture config, mixer kind,
//! seeds, training step) followed by raw little-endian 32-bit parameter
//! blobs keyed by canonical parameter path strings.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"MMCK";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CkptManifest {
    config: ModelConfig,
    train_step: u64,
    n_params: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, train_step: u64) -> Result<()> {
    let manifest = CkptManifest {
        config: model.cfg.clone(),
        train_step,
        n_params: model.store.len(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (name, slot) in model.store.entries() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(slot.len as u64).to_le_bytes());
        for &v in model.store.get(slot) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Rebuild the model from the manifest config and fill every parameter from
/// its named blob. Loaded parameters are exactly f32-representable, so a
/// further save/load cycle is the identity.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |offset: usize, msg: String| Error::Parse {
        offset: offset as u64,
        msg,
    };
    let need = |pos: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| err(bytes.len(), format!("truncated checkpoint at {pos}+{n}")))
    };
    if need(0, 4)? != CKPT_MAGIC {
        return Err(err(0, "bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(err(4, format!("unsupported checkpoint version {version}")));
    }
    let mlen = u32::from_le_bytes(need(6, 4)?.try_into().unwrap()) as usize;
    let manifest: CkptManifest =
        serde_json::from_slice(need(10, mlen)?).map_err(|e| err(10, format!("manifest: {e}")))?;
    let mut model = Model::new(manifest.config)?;
    let mut pos = 10 + mlen;
    let mut loaded = 0usize;
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(need(pos, 2)?.try_into().unwrap()) as usize;
        pos += 2;
        let name = std::str::from_utf8(need(pos, name_len)?)
            .map_err(|e| err(pos, format!("parameter path: {e}")))?
            .to_string();
        pos += name_len;
        let count = u64::from_le_bytes(need(pos, 8)?.try_into().unwrap()) as usize;
        pos += 8;
        let raw = need(pos, 4 * count)?;
        pos += 4 * count;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.store.load_named(&name, &values)?;
        loaded += count;
    }
    if loaded != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {loaded} parameters, model needs {}",
            model.store.len()
        )));
    }
    Ok((model, manifest.train_step))
}
