//! Checkpoint directories: one `<f8` NPY file per parameter plus
//! `manifest.json`. Nothing time- or host-dependent is written, so equal runs
//! give byte-identical directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use angleattn_core::model::{ModelConfig, ModelParams};
use angleattn_core::{seeded, Tensor};

use crate::config::RunConfig;
use crate::npy::{self, NpyData};
use crate::raster::{read_bytes, write_bytes};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: RunConfig,
    pub bands: usize,
    pub classes: usize,
    /// 0 when training ran no epochs.
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    pub fn model(&self) -> Result<ModelConfig> {
        self.config.model(self.bands, self.classes)
    }
}

/// Writes `params` and a manifest describing them into `dir` (created if
/// needed). `manifest.params` is filled in here.
pub fn save(dir: &Path, mut manifest: Manifest, params: &ModelParams) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.params.clear();
    for p in params.params() {
        let file = format!("{}.npy", p.name);
        let bytes = npy::encode(p.value.shape(), &NpyData::F8(p.value.data().to_vec()));
        write_bytes(&dir.join(&file), &bytes)?;
        manifest.params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_bytes(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Manifest {
        path,
        detail: e.to_string(),
    })
}

fn param_error(name: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        param: name.to_string(),
        detail: detail.into(),
    }
}

/// Reads a checkpoint and checks every tensor against the architecture the
/// manifest describes.
pub fn load(dir: &Path) -> Result<(Manifest, ModelConfig, ModelParams)> {
    let manifest = load_manifest(dir)?;
    let cfg = manifest.model()?;
    // Initialization only provides the layout; every value is overwritten.
    let mut params = ModelParams::init(&cfg, &mut seeded(0))?;
    let mut slots = params.params_mut();
    if slots.len() != manifest.params.len() {
        return Err(Error::Manifest {
            path: dir.join(MANIFEST),
            detail: format!(
                "architecture has {} parameters, manifest lists {}",
                slots.len(),
                manifest.params.len()
            ),
        });
    }
    for (slot, entry) in slots.iter_mut().zip(&manifest.params) {
        if slot.name != entry.name {
            return Err(param_error(
                &slot.name,
                format!("manifest lists `{}` in its place", entry.name),
            ));
        }
        let file = dir.join(&entry.file);
        let bytes = read_bytes(&file).map_err(|e| param_error(&slot.name, e.to_string()))?;
        let array = npy::decode(&bytes).map_err(|e| param_error(&slot.name, format!("{}: {e}", file.display())))?;
        let NpyData::F8(data) = array.data else {
            return Err(param_error(&slot.name, "expected <f8 data"));
        };
        if array.shape != slot.value.shape() {
            return Err(param_error(
                &slot.name,
                format!("shape {:?}, architecture needs {:?}", array.shape, slot.value.shape()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(param_error(&slot.name, "non-finite value"));
        }
        slot.value = Tensor::new(&array.shape, data)?;
    }
    drop(slots);
    Ok((manifest, cfg, params))
}
