//! Bundle directories: `manifest.json` plus one little-endian `f32` blob per
//! named tensor, each verified by length and SHA-256 on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Component, ModelBundle, ModelParams, NetConfig, Param, ParamSet, Provenance};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub component: Component,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: NetConfig,
    pub frozen: BTreeSet<Component>,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_bundle(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for component in Component::ALL {
        for p in &bundle.params.get(component).tensors {
            let file = format!("{}.{}.f32", component.name(), p.name);
            let bytes = tensor_bytes(&p.data);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                component,
                name: p.name.clone(),
                shape: p.shape.clone(),
                file,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        frozen: bundle.frozen.clone(),
        provenance: bundle.provenance.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Bundle {
        component: "manifest".into(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Bundle {
            component: "manifest".into(),
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    manifest.config.validate()?;

    let mut params = ModelParams {
        ufe: ParamSet::zeros(&Component::Ufe.layout(&manifest.config)),
        tpu: ParamSet::zeros(&Component::Tpu.layout(&manifest.config)),
        ipu: ParamSet::zeros(&Component::Ipu.layout(&manifest.config)),
        srn: ParamSet::zeros(&Component::Srn.layout(&manifest.config)),
    };
    for component in Component::ALL {
        let entries: Vec<&TensorEntry> = manifest.tensors.iter().filter(|t| t.component == component).collect();
        let set = params.get_mut(component);
        let fail = |reason: String| Error::Bundle {
            component: component.name().into(),
            reason,
        };
        if entries.len() != set.tensors.len() {
            return Err(fail(format!(
                "expected {} tensors, manifest lists {}",
                set.tensors.len(),
                entries.len()
            )));
        }
        for (slot, entry) in set.tensors.iter_mut().zip(entries) {
            load_tensor(dir, entry, slot).map_err(fail)?;
        }
    }
    Ok(ModelBundle {
        config: manifest.config,
        params,
        frozen: manifest.frozen,
        provenance: manifest.provenance,
    })
}

fn load_tensor(dir: &Path, entry: &TensorEntry, slot: &mut Param<f32>) -> std::result::Result<(), String> {
    if entry.name != slot.name || entry.shape != slot.shape {
        return Err(format!(
            "tensor {} {:?} does not match expected {} {:?}",
            entry.name, entry.shape, slot.name, slot.shape
        ));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() != slot.data.len() * 4 {
        return Err(format!(
            "tensor {} has {} bytes, expected {}",
            entry.name,
            bytes.len(),
            slot.data.len() * 4
        ));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(format!("tensor {} checksum mismatch", entry.name));
    }
    for (v, c) in slot.data.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Ok(())
}
