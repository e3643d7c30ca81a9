use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::Params;
use crate::error::{Error, Result};

/// Parameters plus the metadata needed to rebuild the model that owns them.
pub struct Checkpoint {
    pub kind: String,
    pub metadata: HashMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        let raw = self
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("no config entry".into()))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies stored tensors into the freshly built parameters of `params`.
    pub fn apply(&self, params: &Params) -> Result<()> {
        for (name, var) in params.named_vars() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Writes a safetensors file whose header metadata carries `kind`, the JSON
/// config and any `extra` entries.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    params: &Params,
    extra: &[(&str, String)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut meta = HashMap::new();
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    for (k, v) in extra {
        meta.insert((*k).to_string(), v.clone());
    }
    let named = params.named_vars();
    let tensors: Vec<(String, Tensor)> = named
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    safetensors::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let kind = metadata
        .get("kind")
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no kind entry", path.display())))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint {
        kind,
        metadata,
        tensors,
    })
}
